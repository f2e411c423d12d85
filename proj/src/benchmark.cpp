#include "motis/benchmark.hpp"

#include <fstream>
#include <sstream>

#include "motis/checkpoint.hpp"

namespace motis::bench {

namespace fs = std::filesystem;
using nlohmann::json;

ExperimentConfig::ExperimentConfig() {
  general.n_train = 20000;
  general.n_val = 500;
  general.n_test = 10;
  general.prior = data::LatentPrior::kUniform;
  general.mismatch_rate = 0.3;
  general.seed = 101;
  general.first_id = 1000000;  // disjoint from in-domain ids
  domain.seed = 7;
}

void ExperimentConfig::validate() const {
  world.validate();
  general.validate();
  domain.validate();
  train.validate();
  if (seeds.empty()) throw train::ConfigError("seeds must not be empty");
  const auto overlap = [](const data::CorpusParams& a, const data::CorpusParams& b) {
    const auto a_end = a.first_id + a.n_train + a.n_val + a.n_test;
    const auto b_end = b.first_id + b.n_train + b.n_val + b.n_test;
    return a.first_id < b_end && b.first_id < a_end;
  };
  if (overlap(general, domain)) throw train::ConfigError("general and domain corpora must use disjoint id ranges");
}

json ExperimentConfig::to_json() const {
  return {{"world", world.to_json()},   {"general", general.to_json()},    {"domain", domain.to_json()},
          {"train", train.to_json()},   {"teacher_seed", teacher_seed},    {"seeds", seeds}};
}

namespace {

void reject_unknown(const json& j, const json& reference, const std::string& where) {
  if (!j.is_object()) throw train::ConfigError(where + " must be an object");
  for (const auto& [key, _] : j.items())
    if (!reference.contains(key)) throw train::ConfigError("unknown key '" + where + "." + key + "'");
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  reject_unknown(j, c.to_json(), "config");
  try {
    if (j.contains("world")) {
      reject_unknown(j["world"], c.world.to_json(), "world");
      auto merged = c.world.to_json();
      merged.update(j["world"]);
      c.world = data::WorldParams::from_json(merged);
    }
    for (auto [name, target] : {std::pair{"general", &c.general}, std::pair{"domain", &c.domain}}) {
      if (!j.contains(name)) continue;
      reject_unknown(j[name], target->to_json(), name);
      auto merged = target->to_json();
      merged.update(j[name]);
      *target = data::CorpusParams::from_json(merged);
    }
    if (j.contains("train")) c.train = train::TrainConfig::from_json(j["train"]);
    if (j.contains("teacher_seed")) c.teacher_seed = j["teacher_seed"].get<std::uint64_t>();
    if (j.contains("seeds")) c.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
  } catch (const json::exception& e) {
    throw train::ConfigError(std::string("config: ") + e.what());
  } catch (const data::ParamError& e) {
    throw train::ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

void ExperimentConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw train::ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  std::string pointer;
  for (std::size_t start = 0; start <= key.size();) {
    const auto dot = std::min(key.find('.', start), key.size());
    if (dot == start) throw train::ConfigError("override '" + assignment + "' has an empty path segment");
    pointer += "/" + key.substr(start, dot - start);
    start = dot + 1;
  }
  auto j = to_json();
  const json::json_pointer ptr(pointer);
  if (!j.contains(ptr)) throw train::ConfigError("override: unknown key '" + key + "'");
  j[ptr] = value;
  *this = from_json(j);
}

std::string ExperimentConfig::teacher_key() const {
  const auto t = train.to_json();
  json relevant = {{"world", world.to_json()},
                   {"general", general.to_json()},
                   {"domain", domain.to_json()},
                   {"teacher_seed", teacher_seed},
                   {"text", teacher_text(world).to_json()},
                   {"image", teacher_image(world).to_json()}};
  for (const char* k : {"learning_rate", "weight_decay", "batch_size", "teacher_epochs", "pretrain_epochs",
                        "warmup_steps", "warmup_fraction", "adam", "grad_clip", "eval_batch"})
    relevant["train"][k] = t.at(k);
  return ckpt::config_digest(relevant).substr(0, 16);
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw train::ConfigError("cannot read config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw train::ConfigError("config file " + path.string() + ": " + e.what());
  }
  return ExperimentConfig::from_json(j);
}

enc::EncoderConfig teacher_text(const data::WorldParams& w) { return enc::teacher_text_config(w.vocab_size); }
enc::EncoderConfig teacher_image(const data::WorldParams& w) {
  return enc::teacher_image_config(w.num_patches, w.patch_dim);
}
enc::EncoderConfig student_text(const data::WorldParams& w) { return enc::student_text_config(w.vocab_size); }
enc::EncoderConfig student_image(const data::WorldParams& w) {
  return enc::student_image_config(w.num_patches, w.patch_dim);
}

train::StageReport pretrain_teacher(enc::DualEncoder& teacher, const data::Corpus& general,
                                    const ExperimentConfig& cfg) {
  auto t = cfg.train;
  t.allow_joint_unfreeze = true;
  t.seed = cfg.teacher_seed;
  return train::pretrain_dual(teacher, general.train, &general.val, t);
}

Teachers prepare_teachers(const ExperimentConfig& cfg, const data::Corpus& general, const data::Corpus& domain,
                          const fs::path& cache_dir, const Log& log) {
  const auto say = [&](const std::string& s) {
    if (log) log(s);
  };
  Teachers out;
  fs::path dir;
  if (!cache_dir.empty()) {
    dir = cache_dir / cfg.teacher_key();
    if (fs::exists(dir / "teacher.ckpt") && fs::exists(dir / "teacher_ft.ckpt")) {
      out.teacher = ckpt::load(dir / "teacher.ckpt");
      out.teacher_ft = ckpt::load(dir / "teacher_ft.ckpt");
      out.from_cache = true;
      say("teachers loaded from " + dir.string());
      return out;
    }
  }
  out.teacher = enc::DualEncoder(teacher_text(cfg.world), teacher_image(cfg.world), enc::Role::kTeacher,
                                 cfg.teacher_seed);
  say("pretraining teacher on " + std::to_string(general.train.size()) + " general pairs");
  out.pretrain = pretrain_teacher(out.teacher, general, cfg);
  auto ft_cfg = cfg.train;
  ft_cfg.seed = cfg.teacher_seed;
  say("fine-tuning teacher on " + std::to_string(domain.train.size()) + " in-domain pairs");
  out.teacher_ft = train::finetune_teacher_sequential(out.teacher, domain.train, domain.val, ft_cfg, &out.finetune);
  if (!dir.empty()) {
    // Write to a temporary directory first so a partial cache is never read.
    const auto tmp = dir.string() + ".tmp";
    fs::remove_all(tmp);
    fs::create_directories(tmp);
    ckpt::save(fs::path(tmp) / "teacher.ckpt", out.teacher);
    ckpt::save(fs::path(tmp) / "teacher_ft.ckpt", out.teacher_ft);
    std::ofstream(fs::path(tmp) / "config.json") << cfg.to_json().dump(2) << '\n';
    fs::remove_all(dir);
    fs::rename(tmp, dir);
  }
  return out;
}

eval::EfficiencyEntry measure_efficiency(const std::string& name, const enc::DualEncoder& model,
                                         const fs::path& scratch_dir, std::size_t timed) {
  fs::create_directories(scratch_dir);
  const auto image_path = scratch_dir / (name + ".image.ckpt");
  const auto text_path = scratch_dir / (name + ".text.ckpt");
  ckpt::save_image(image_path, model.image, model.role, model.step);
  ckpt::save_text(text_path, model.text, model.role, model.step);
  eval::EfficiencyEntry e;
  e.model = name;
  e.disk_bytes_image = ckpt::disk_size(image_path);
  e.disk_bytes_text = ckpt::disk_size(text_path);
  e.qps_image = eval::qps_image(model.image, 32, 3, timed);
  e.qps_text = eval::qps_text(model.text, 32, 3, timed);
  return e;
}

}  // namespace motis::bench
