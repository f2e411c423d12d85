#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "motis/checkpoint.hpp"
#include "motis/data_synth.hpp"
#include "motis/image_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kBinary = MOTIS_CLI_PATH;

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "motis_test_cli" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

struct Outcome {
  int code = -1;
  std::string out;
  std::string err;
};

// Runs the CLI with stdout and stderr captured to files.
Outcome cli(const std::string& args, const fs::path& cwd = fs::temp_directory_path()) {
  static int counter = 0;
  const auto base = fs::temp_directory_path() / ("motis_cli_capture_" + std::to_string(::getpid()) + "_" +
                                                 std::to_string(counter++));
  const std::string cmd = "cd '" + cwd.string() + "' && '" + kBinary.string() + "' " + args + " >'" +
                          base.string() + ".out' 2>'" + base.string() + ".err'";
  const int status = std::system(cmd.c_str());
  Outcome o;
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  const auto slurp = [](const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  o.out = slurp(base.string() + ".out");
  o.err = slurp(base.string() + ".err");
  fs::remove(base.string() + ".out");
  fs::remove(base.string() + ".err");
  return o;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

bool same_tree(const fs::path& a, const fs::path& b) {
  std::size_t n = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), a);
    if (!fs::exists(b / rel) || read_file(e.path()) != read_file(b / rel)) return false;
    ++n;
  }
  return n > 0;
}

}  // namespace

TEST_CASE("synth is deterministic for a seed") {
  const auto dir = scratch("synth");
  REQUIRE(cli("synth --n 100 --seed 7 --out a", dir).code == 0);
  REQUIRE(cli("synth --n 100 --seed 7 --out b", dir).code == 0);
  REQUIRE(cli("synth --n 100 --seed 8 --out c", dir).code == 0);
  CHECK(same_tree(dir / "a", dir / "b"));
  CHECK_FALSE(same_tree(dir / "a", dir / "c"));
  const auto corpus = motis::data::read_corpus(dir / "a");
  CHECK(corpus.train.size() == 100);
  CHECK(corpus.manifest.corpus.seed == 7);
}

TEST_CASE("exit codes") {
  const auto dir = scratch("codes");
  auto missing = cli("eval --checkpoint missing.ckpt --data nowhere", dir);
  CHECK(missing.code == 1);
  CHECK(missing.err.find("missing.ckpt") != std::string::npos);

  auto unknown = cli("synth --out x --no-such-flag", dir);
  CHECK(unknown.code == 2);
  CHECK(unknown.err.find("Usage") != std::string::npos);
  CHECK(cli("", dir).code == 2);
  CHECK(cli("frobnicate", dir).code == 2);
  CHECK(cli("--help").code == 0);

  CHECK(cli("synth --out x --set train.no_such_key=1", dir).code == 2);
  CHECK(cli("synth --out x --set train.batch_size=0", dir).code == 2);
  CHECK(cli("synth --out x --set domain.sigma=-1", dir).code == 2);
  CHECK(cli("synth --out x --config absent.json", dir).code == 2);
  std::ofstream(dir / "bad.json") << "{\"train\": {\"learning_rate\": \"fast\"}}";
  CHECK(cli("synth --out x --config bad.json", dir).code == 2);
  std::ofstream(dir / "unknown.json") << "{\"colour\": 1}";
  CHECK(cli("synth --out x --config unknown.json", dir).code == 2);
  std::ofstream(dir / "good.json") << "{\"domain\": {\"n_val\": 20, \"n_test\": 30}}";
  CHECK(cli("synth --n 50 --out g --config good.json", dir).code == 0);
  CHECK(motis::data::read_corpus(dir / "g").test.size() == 30);
}

TEST_CASE("pipeline end to end at toy scale") {
  const auto dir = scratch("pipeline");
  const std::string quick =
      " --set train.batch_size=16 --set train.pretrain_epochs=1 --set train.teacher_epochs=1"
      " --set train.stage1_epochs=1 --set train.stage2_epochs=1 --set train.hn.k=2";
  REQUIRE(cli("synth --general --n 128 --n-val 32 --n-test 4 --out general", dir).code == 0);
  REQUIRE(cli("synth --n 128 --n-val 32 --n-test 32 --out domain", dir).code == 0);

  auto t = cli("train-teacher --general general --data domain --out models --report-dir rep_teacher" + quick, dir);
  REQUIRE_MESSAGE(t.code == 0, t.err);
  CHECK(motis::ckpt::inspect(dir / "models/teacher.ckpt").role == motis::enc::Role::kTeacher);
  CHECK(motis::ckpt::inspect(dir / "models/teacher_ft.ckpt").role == motis::enc::Role::kTeacherFinetuned);
  CHECK(fs::exists(dir / "rep_teacher/tables.md"));
  CHECK(fs::exists(dir / "rep_teacher/runs/teacher_finetune.json"));

  auto s1 = cli("stage1 --teacher models/teacher.ckpt --general general --out models/s1.ckpt --seed 3" + quick, dir);
  REQUIRE_MESSAGE(s1.code == 0, s1.err);
  auto s2 = cli("stage2 --teacher-ft models/teacher_ft.ckpt --data domain --student models/s1.ckpt"
                " --out models/student.ckpt --report-dir rep_s2 --seed 3" + quick, dir);
  REQUIRE_MESSAGE(s2.code == 0, s2.err);
  CHECK(json::parse(s2.out)["test"].contains("R@1"));
  CHECK(fs::exists(dir / "rep_s2/tables.csv"));

  auto base = cli("baseline --general general --data domain --out models/baseline.ckpt" + quick, dir);
  REQUIRE_MESSAGE(base.code == 0, base.err);

  auto ev = cli("eval --checkpoint models/student.ckpt --data domain --split val", dir);
  REQUIRE_MESSAGE(ev.code == 0, ev.err);
  auto r = json::parse(ev.out);
  CHECK(r["n"] == 32);
  CHECK(r["recall"]["R@1"].get<double>() <= r["recall"]["R@5"].get<double>());

  auto bench = cli("bench --checkpoint models/teacher_ft.ckpt --checkpoint models/student.ckpt --report-dir rep_bench",
                   dir);
  REQUIRE_MESSAGE(bench.code == 0, bench.err);
  auto eff = json::parse(bench.out);
  CHECK(eff["reference"] == "teacher_ft");
  CHECK(read_file(dir / "rep_bench/tables.md").find("student") != std::string::npos);
  CHECK(cli("bench --checkpoint models/student.ckpt --reference nobody", dir).code == 1);

  auto ab = cli("ablate --general general --data domain --teacher models/teacher.ckpt"
                " --teacher-ft models/teacher_ft.ckpt --seed 1 --report-dir rep_ablate" + quick, dir);
  REQUIRE_MESSAGE(ab.code == 0, ab.err);
  const auto rows = json::parse(ab.out);
  REQUIRE(rows.size() == 8);
  CHECK(rows[0]["name"] == "full");
  CHECK(rows[0]["delta_r1"] == 0.0);
  const auto csv = read_file(dir / "rep_ablate/tables.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') >= 9);

  SUBCASE("index and serve") {
    // The service reads <model>.ckpt: student.ckpt is already in models/.
    std::mt19937_64 rng(3);
    std::vector<std::string> files;
    for (int i = 0; i < 3; ++i) {
      motis::img::Image im{20, 20, std::vector<std::uint8_t>(20 * 20 * 3)};
      for (auto& b : im.rgb) b = static_cast<std::uint8_t>(rng());
      const auto name = "img" + std::to_string(i) + ".png";
      std::ofstream(dir / name, std::ios::binary) << motis::img::encode_png(im);
      files.push_back(name);
    }
    auto idx = cli("index --model-dir models --gallery-dir gallery " + files[0] + " " + files[1] + " " + files[2] +
                       " " + files[1],
                   dir);
    REQUIRE_MESSAGE(idx.code == 0, idx.err);
    CHECK(idx.out.find("duplicate") != std::string::npos);
    CHECK(cli("index --gallery-dir gallery " + files[0], dir).code != 0);

    const int port = 20000 + static_cast<int>(::getpid() % 20000);
    const pid_t child = ::fork();
    REQUIRE(child >= 0);
    if (child == 0) {
      ::setenv("MOTIS_PORT", std::to_string(port).c_str(), 1);
      ::setenv("MOTIS_MODEL_DIR", (dir / "models").c_str(), 1);
      ::setenv("MOTIS_GALLERY_DIR", (dir / "gallery").c_str(), 1);
      if (!std::freopen("/dev/null", "w", stderr)) std::_Exit(126);
      ::execl(kBinary.c_str(), "motis", "serve", static_cast<char*>(nullptr));
      std::_Exit(127);
    }
    httplib::Client c("127.0.0.1", port);
    httplib::Result st;
    for (int i = 0; i < 200 && !(st = c.Get("/stats")); ++i)
      std::this_thread::sleep_for(std::chrono::milliseconds(50));
    REQUIRE(st);
    auto s = json::parse(st->body);
    CHECK(s["image_count"] == 3);
    CHECK(s["model"] == "student");
    auto sr = c.Post("/search", R"({"text": "red", "k": 2})", "application/json");
    REQUIRE(sr);
    CHECK(json::parse(sr->body)["results"].size() == 2);
    ::kill(child, SIGTERM);
    int status = 0;
    ::waitpid(child, &status, 0);
  }
}
