// Command-line driver: one subcommand per pipeline step.
// Exit codes: 0 success, 2 usage or configuration error, 1 runtime error.
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "motis/benchmark.hpp"
#include "motis/checkpoint.hpp"
#include "motis/data_synth.hpp"
#include "motis/eval_bench.hpp"
#include "motis/image_io.hpp"
#include "motis/service.hpp"
#include "motis/train_pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace motis;

namespace {

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string report_dir;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "experiment config JSON")->check(CLI::ExistingFile);
  sub->add_option("--set", c.overrides, "dotted override, e.g. train.stage2_epochs=3")->take_all();
  sub->add_option("--seed", c.seed, "seed (student init and shuffles; corpus seed for synth)");
  sub->add_option("--report-dir", c.report_dir, "write tables.md, tables.csv and runs/*.json here");
}

bench::ExperimentConfig resolve(const Common& c) {
  auto cfg = c.config.empty() ? bench::ExperimentConfig{} : bench::load_config(c.config);
  for (const auto& o : c.overrides) cfg.apply_override(o);
  if (c.seed) {
    cfg.train.seed = *c.seed;
    cfg.seeds = {*c.seed};
  }
  cfg.validate();
  return cfg;
}

void log(const std::string& s) { std::cerr << "motis: " << s << '\n'; }

void save_model(const fs::path& path, const enc::DualEncoder& m) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  ckpt::save(path, m);
  log("wrote " + path.string());
}

void emit(const Common& c, const eval::Tables& t) {
  if (c.report_dir.empty()) return;
  eval::emit_tables(c.report_dir, t);
  log("report in " + c.report_dir);
}

eval::ResultRow row(const std::string& name, const eval::Recall& r) {
  eval::ResultRow out;
  out.name = name;
  out.per_seed.push_back(r);
  return out;
}

const data::Split& pick(const data::Corpus& c, const std::string& split) {
  if (split == "train") return c.train;
  if (split == "val") return c.val;
  if (split == "test") return c.test;
  throw UsageError("unknown split '" + split + "'");
}

// Encoder configs of a corpus on disk must match the model's input shape.
void check_shapes(const enc::DualEncoder& m, const data::Corpus& c) {
  const auto& ic = m.image.config();
  if (ic.num_patches != c.manifest.world.num_patches || ic.patch_dim != c.manifest.world.patch_dim)
    throw std::runtime_error("model expects " + std::to_string(ic.num_patches) + "×" + std::to_string(ic.patch_dim) +
                             " patches, corpus has " + std::to_string(c.manifest.world.num_patches) + "×" +
                             std::to_string(c.manifest.world.patch_dim));
}

int run(int argc, char** argv) {
  CLI::App app{"motis: compact text-to-image retrieval by two-stage distillation"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "show help for every subcommand");

  Common common;

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic paired corpus");
  std::string synth_out;
  std::optional<std::size_t> n_train, n_val, n_test;
  bool synth_general = false;
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--n", n_train, "training pairs");
  synth->add_option("--n-val", n_val, "validation pairs");
  synth->add_option("--n-test", n_test, "test pairs");
  synth->add_flag("--general", synth_general, "generate the general-domain corpus instead of the in-domain one");
  add_common(synth, common);

  // train-teacher
  auto* teacher = app.add_subcommand("train-teacher", "pretrain the teacher on general pairs, then fine-tune it");
  std::string general_dir, data_dir, out_dir;
  teacher->add_option("--general", general_dir, "general corpus directory")->required();
  teacher->add_option("--data", data_dir, "in-domain corpus directory")->required();
  teacher->add_option("--out", out_dir, "writes teacher.ckpt and teacher_ft.ckpt here")->required();
  add_common(teacher, common);

  // stage1
  auto* stage1 = app.add_subcommand("stage1", "distill each tower from the pretrained teacher");
  std::string teacher_ckpt, init_ckpt, out_ckpt;
  stage1->add_option("--teacher", teacher_ckpt, "pretrained teacher checkpoint")->required();
  stage1->add_option("--general", general_dir, "general corpus directory")->required();
  stage1->add_option("--init", init_ckpt, "start from this student instead of a seeded random init");
  stage1->add_option("--out", out_ckpt, "student checkpoint to write")->required();
  add_common(stage1, common);

  // stage2
  auto* stage2 = app.add_subcommand("stage2", "fine-tune the student in-domain against the fine-tuned teacher");
  std::string teacher_ft_ckpt, scope = "dual";
  stage2->add_option("--teacher-ft", teacher_ft_ckpt, "fine-tuned teacher checkpoint")->required();
  stage2->add_option("--data", data_dir, "in-domain corpus directory")->required();
  stage2->add_option("--student", init_ckpt, "stage-1 student; omitted: seeded random init");
  stage2->add_option("--scope", scope, "dual or image")->check(CLI::IsMember({"dual", "image"}));
  stage2->add_option("--out", out_ckpt, "student checkpoint to write")->required();
  add_common(stage2, common);

  // baseline
  auto* baseline = app.add_subcommand("baseline", "train a student with inter-modal InfoNCE only");
  baseline->add_option("--general", general_dir, "general corpus directory")->required();
  baseline->add_option("--data", data_dir, "in-domain corpus directory")->required();
  baseline->add_option("--out", out_ckpt, "student checkpoint to write")->required();
  add_common(baseline, common);

  // ablate
  auto* ablate = app.add_subcommand("ablate", "run every ablation variant and emit the table");
  ablate->add_option("--general", general_dir, "general corpus directory")->required();
  ablate->add_option("--data", data_dir, "in-domain corpus directory")->required();
  ablate->add_option("--teacher", teacher_ckpt, "pretrained teacher checkpoint")->required();
  ablate->add_option("--teacher-ft", teacher_ft_ckpt, "fine-tuned teacher checkpoint")->required();
  add_common(ablate, common);

  // eval
  auto* evaluate = app.add_subcommand("eval", "text-to-image recall on a corpus split");
  std::string eval_ckpt, eval_text_ckpt, split = "test", name;
  evaluate->add_option("--checkpoint", eval_ckpt, "model checkpoint")->required();
  evaluate->add_option("--text-checkpoint", eval_text_ckpt, "take the text tower from this checkpoint");
  evaluate->add_option("--data", data_dir, "corpus directory")->required();
  evaluate->add_option("--split", split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  evaluate->add_option("--name", name, "row name in the report");
  add_common(evaluate, common);

  // bench
  auto* benchmark = app.add_subcommand("bench", "disk size and encoding throughput per model");
  std::vector<std::string> bench_ckpts;
  std::string reference;
  std::size_t timed = 10;
  benchmark->add_option("--checkpoint", bench_ckpts, "checkpoints to compare (repeatable)")->required();
  benchmark->add_option("--reference", reference, "model the speedups are relative to (default: first)");
  benchmark->add_option("--timed", timed, "timed runs per measurement")->check(CLI::Range(10, 1000));
  add_common(benchmark, common);

  // index
  auto* index_cmd = app.add_subcommand("index", "add image files to a gallery");
  std::string model_dir, gallery_dir, model_name = "student", index_mode = "exact";
  std::vector<std::string> images;
  index_cmd->add_option("--model-dir", model_dir, "directory holding <model>.ckpt");
  index_cmd->add_option("--gallery-dir", gallery_dir, "gallery directory");
  index_cmd->add_option("--model", model_name, "teacher or student")->check(CLI::IsMember({"teacher", "student"}));
  index_cmd->add_option("images", images, "PNG or JPEG files")->required()->check(CLI::ExistingFile);
  add_common(index_cmd, common);

  // serve
  auto* serve = app.add_subcommand("serve", "run the HTTP search service");
  std::string host = "127.0.0.1";
  std::optional<int> port;
  serve->add_option("--host", host, "bind address");
  serve->add_option("--port", port, "port (default MOTIS_PORT or 8080)");
  serve->add_option("--model-dir", model_dir, "directory holding <model>.ckpt (default MOTIS_MODEL_DIR)");
  serve->add_option("--gallery-dir", gallery_dir, "gallery directory (default MOTIS_GALLERY_DIR)");
  serve->add_option("--model", model_name, "teacher or student")->check(CLI::IsMember({"teacher", "student"}));
  serve->add_option("--index", index_mode, "exact or ivf")->check(CLI::IsMember({"exact", "ivf"}));
  add_common(serve, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  const auto cfg = resolve(common);

  if (synth->parsed()) {
    auto params = synth_general ? cfg.general : cfg.domain;
    if (n_train) params.n_train = *n_train;
    if (n_val) params.n_val = *n_val;
    if (n_test) params.n_test = *n_test;
    if (common.seed) params.seed = *common.seed;
    params.validate();
    const auto corpus = data::generate_corpus(cfg.world, params);
    data::write_corpus(synth_out, corpus);
    log("wrote " + std::to_string(corpus.train.size()) + "/" + std::to_string(corpus.val.size()) + "/" +
        std::to_string(corpus.test.size()) + " pairs to " + synth_out);
    return 0;
  }

  if (teacher->parsed()) {
    const auto general = data::read_corpus(general_dir);
    const auto domain = data::read_corpus(data_dir);
    auto t = bench::prepare_teachers(cfg, general, domain, {}, log);
    save_model(fs::path(out_dir) / "teacher.ckpt", t.teacher);
    save_model(fs::path(out_dir) / "teacher_ft.ckpt", t.teacher_ft);
    const auto test = eval::evaluate_retrieval(t.teacher_ft.image, t.teacher_ft.text, domain.test);
    std::cout << json{{"teacher_ft_test", eval::recall_json(test.recall)}}.dump() << '\n';
    eval::Tables tables;
    tables.retrieval.push_back(row("teacher_ft", test.recall));
    tables.runs = {{"teacher_pretrain", t.pretrain.to_json()}, {"teacher_finetune", t.finetune.to_json()}};
    emit(common, tables);
    return 0;
  }

  if (stage1->parsed()) {
    const auto general = data::read_corpus(general_dir);
    const auto t = ckpt::load(teacher_ckpt);
    check_shapes(t, general);
    auto student = init_ckpt.empty() ? enc::DualEncoder(bench::student_text(general.manifest.world),
                                                        bench::student_image(general.manifest.world),
                                                        enc::Role::kStudent, cfg.train.seed)
                                     : ckpt::load(init_ckpt);
    const auto report = train::run_stage1(student, t, general.train, cfg.train);
    save_model(out_ckpt, student);
    eval::Tables tables;
    tables.runs = {{"stage1", report.to_json(true)}};
    emit(common, tables);
    return 0;
  }

  if (stage2->parsed()) {
    const auto domain = data::read_corpus(data_dir);
    const auto ft = ckpt::load(teacher_ft_ckpt);
    check_shapes(ft, domain);
    const auto student = init_ckpt.empty() ? enc::DualEncoder(bench::student_text(domain.manifest.world),
                                                              bench::student_image(domain.manifest.world),
                                                              enc::Role::kStudent, cfg.train.seed)
                                           : ckpt::load(init_ckpt);
    const auto result = train::run_stage2_student(
        student, ft, domain.train, domain.val, cfg.train,
        scope == "image" ? train::Stage2Scope::kImageOnly : train::Stage2Scope::kDual);
    save_model(out_ckpt, result.model);
    const auto test = eval::evaluate_retrieval(result.model.image, result.model.text, domain.test);
    std::cout << json{{"test", eval::recall_json(test.recall)}}.dump() << '\n';
    eval::Tables tables;
    tables.retrieval.push_back(row("student", test.recall));
    tables.runs = {{"stage2", result.report.to_json(true)}};
    emit(common, tables);
    return 0;
  }

  if (baseline->parsed()) {
    const auto general = data::read_corpus(general_dir);
    const auto domain = data::read_corpus(data_dir);
    const auto& w = domain.manifest.world;
    const auto result = train::train_baseline_intermodal(bench::student_text(w), bench::student_image(w),
                                                         general.train, domain.train, domain.val, cfg.train);
    save_model(out_ckpt, result.model);
    const auto test = eval::evaluate_retrieval(result.model.image, result.model.text, domain.test);
    std::cout << json{{"test", eval::recall_json(test.recall)}}.dump() << '\n';
    eval::Tables tables;
    tables.retrieval.push_back(row("baseline", test.recall));
    tables.runs = {{"baseline", result.report.to_json(true)}};
    emit(common, tables);
    return 0;
  }

  if (ablate->parsed()) {
    const auto general = data::read_corpus(general_dir);
    const auto domain = data::read_corpus(data_dir);
    const auto t = ckpt::load(teacher_ckpt);
    const auto ft = ckpt::load(teacher_ft_ckpt);
    check_shapes(ft, domain);
    const auto general_cache = train::embed_dual(t, general.train);
    const auto train_cache = train::embed_dual(ft, domain.train);
    const auto& w = domain.manifest.world;
    const train::Workbench wb{&general.train,       &domain.train,           &domain.val, &domain.test, &t, &ft,
                              bench::student_text(w), bench::student_image(w), &general_cache, &train_cache};
    const auto result = train::run_ablation_suite(wb, cfg.train, cfg.seeds, [](const train::VariantRun& r) {
      log(train::to_string(r.variant) + " seed " + std::to_string(r.seed) +
          ": R@1 " + std::to_string(r.test.recall.at(1)));
    });
    eval::Tables tables;
    tables.ablation = result.rows;
    for (const auto& r : result.runs)
      tables.runs.emplace_back("ablation_" + train::to_string(r.variant) + "_seed" + std::to_string(r.seed),
                               json{{"stage1", r.stage1.to_json()}, {"stage2", r.stage2.to_json()},
                                    {"test", r.test.to_json()}});
    json out = json::array();
    for (const auto& r : result.rows)
      out.push_back({{"name", r.name}, {"r1_mean", r.mean(1)}, {"delta_r1", r.mean(1) - result.rows.front().mean(1)},
                     {"note", r.note}});
    std::cout << out.dump(2) << '\n';
    emit(common, tables);
    return 0;
  }

  if (evaluate->parsed()) {
    const auto model = ckpt::load(eval_ckpt);
    const auto text = eval_text_ckpt.empty() ? model.text : ckpt::load(eval_text_ckpt).text;
    const auto corpus = data::read_corpus(data_dir);
    check_shapes(model, corpus);
    auto run = eval::evaluate_retrieval(model.image, text, pick(corpus, split));
    run.image_model = fs::path(eval_ckpt).stem().string();
    run.text_model = eval_text_ckpt.empty() ? run.image_model : fs::path(eval_text_ckpt).stem().string();
    std::cout << json{{"split", split}, {"n", run.corpus_size}, {"recall", eval::recall_json(run.recall)}}.dump() << '\n';
    eval::Tables tables;
    tables.retrieval.push_back(row(name.empty() ? run.image_model : name, run.recall));
    tables.runs = {{"eval_" + (name.empty() ? run.image_model : name), run.to_json()}};
    emit(common, tables);
    return 0;
  }

  if (benchmark->parsed()) {
    eval::Tables tables;
    const auto scratch = fs::temp_directory_path() / ("motis_bench_" + std::to_string(::getpid()));
    for (const auto& path : bench_ckpts) {
      const auto model = ckpt::load(path);
      const auto label = fs::path(path).stem().string();
      log("measuring " + label);
      tables.efficiency.entries.push_back(bench::measure_efficiency(label, model, scratch, timed));
    }
    fs::remove_all(scratch);
    tables.efficiency.reference = reference.empty() ? tables.efficiency.entries.front().model : reference;
    tables.efficiency.find(tables.efficiency.reference);  // throws for an unknown reference
    std::cout << tables.efficiency.to_json().dump(2) << '\n';
    emit(common, tables);
    return 0;
  }

  if (index_cmd->parsed() || serve->parsed()) {
    svc::ServiceOptions base;
    base.model_dir = model_dir;
    base.gallery_dir = gallery_dir;
    base.model = model_name;
    base.index_mode = index::mode_from_string(index_mode);
    auto opts = svc::ServiceOptions::from_env(base);
    if (opts.gallery_dir.empty()) throw UsageError("no gallery directory: pass --gallery-dir or set MOTIS_GALLERY_DIR");
    if (index_cmd->parsed()) {
      opts.measure_qps = false;
      svc::Service service(opts);
      if (!service.model_loaded()) throw std::runtime_error("no " + model_name + " checkpoint in the model directory");
      int added = 0;
      for (const auto& path : images) {
        std::ifstream in(path, std::ios::binary);
        const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        try {
          const auto r = service.add_image(bytes);
          std::cout << path << '\t' << r.id << '\n';
          ++added;
        } catch (const svc::DuplicateImage& d) {
          std::cout << path << '\t' << d.existing_id() << "\tduplicate\n";
        }
      }
      log("added " + std::to_string(added) + " images; gallery holds " +
          std::to_string(service.stats()["image_count"].get<std::size_t>()));
      return 0;
    }
    if (!port) {
      const char* env = std::getenv("MOTIS_PORT");
      port = env ? std::atoi(env) : 8080;
    }
    if (*port < 0 || *port > 65535) throw UsageError("port out of range");
    svc::Service service(opts);
    log("serving on http://" + host + ":" + std::to_string(*port));
    if (!service.listen(host, *port)) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(*port));
    return 0;
  }
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const train::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const data::ParamError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const enc::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
