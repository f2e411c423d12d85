#include <doctest.h>

#include <Eigen/Dense>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "motis/data_synth.hpp"

using namespace motis;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "motis_test_data" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

data::WorldParams tiny_world() {
  data::WorldParams w;
  w.latent_dim = 4;
  w.vocab_size = 40;
  w.num_patches = 2;
  w.patch_dim = 8;
  w.min_tokens = 2;
  w.max_tokens = 5;
  return w;
}

data::CorpusParams small_corpus(double sigma, std::uint64_t seed = 3) {
  data::CorpusParams c;
  c.n_train = 200;
  c.n_val = 20;
  c.n_test = 30;
  c.sigma = sigma;
  c.seed = seed;
  return c;
}

using Mat = Eigen::MatrixXd;

Mat patches_matrix(const data::Split& s) {
  const auto f = s.num_patches * s.patch_dim;
  Mat m(s.size(), f);
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < f; ++j) m(i, j) = s.samples[i].patches[j];
  return m;
}

Mat latent_matrix(const data::Split& s, std::size_t z) {
  Mat m(s.size(), z);
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < z; ++j) m(i, j) = s.latents[i * z + j];
  return m;
}

// Text i retrieves the image whose least-squares latent estimate has the
// largest inner product with text i's latent; returns R@1.
double latent_matcher_r1(const data::WorldParams& w, const data::Split& s) {
  data::World world(w);
  const auto proj = world.image_projection();
  const auto f = w.num_patches * w.patch_dim;
  Mat W(f, w.latent_dim);
  for (std::size_t i = 0; i < f; ++i)
    for (std::size_t j = 0; j < w.latent_dim; ++j) W(i, j) = proj[i * w.latent_dim + j];
  const Mat est = W.colPivHouseholderQr().solve(patches_matrix(s).transpose()).transpose();
  const Mat lat = latent_matrix(s, w.latent_dim);
  const Mat scores = lat * est.transpose();
  std::size_t hits = 0;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    Eigen::Index best;
    scores.row(i).maxCoeff(&best);
    hits += best == i;
  }
  return double(hits) / double(scores.rows());
}

}  // namespace

TEST_CASE("samples are well formed") {
  auto w = tiny_world();
  auto c = data::generate_corpus(w, small_corpus(0.2));
  CHECK(c.train.size() == 200);
  CHECK(c.val.size() == 20);
  CHECK(c.test.size() == 30);
  std::set<std::uint64_t> ids;
  for (const auto* s : {&c.train, &c.val, &c.test})
    for (const auto& smp : s->samples) {
      CHECK(ids.insert(smp.id).second);
      CHECK(smp.tokens.size() >= 2);
      CHECK(smp.tokens.size() <= 5);
      std::set<std::uint32_t> distinct(smp.tokens.begin(), smp.tokens.end());
      CHECK(distinct.size() == smp.tokens.size());
      for (auto t : smp.tokens) CHECK((t >= 1 && t < 40));
      CHECK(smp.patches.size() == 16);
    }
  CHECK(ids.size() == 250);
  for (std::size_t i = 1; i < c.train.size(); ++i) CHECK(c.train.samples[i].id > c.train.samples[i - 1].id);
  CHECK(c.val.samples.front().id > c.train.samples.back().id);
  CHECK(c.test.samples.front().id > c.val.samples.back().id);
}

TEST_CASE("noise-free views share the latent") {
  auto w = tiny_world();
  auto c = data::generate_corpus(w, small_corpus(0.0));
  data::World world(w);
  for (std::size_t i = 0; i < c.train.size(); ++i) {
    std::span<const float> lat(c.train.latents.data() + i * w.latent_dim, w.latent_dim);
    CHECK(world.patches_for(lat) == c.train.samples[i].patches);
    CHECK(world.tokens_for(lat, c.train.samples[i].tokens.size()) == c.train.samples[i].tokens);
  }

  // A least-squares probe fit on train recovers test latents from patches.
  const Mat X = patches_matrix(c.train), Z = latent_matrix(c.train, w.latent_dim);
  const Mat M = X.colPivHouseholderQr().solve(Z);
  const Mat pred = patches_matrix(c.test) * M;
  const double mse = (pred - latent_matrix(c.test, w.latent_dim)).squaredNorm() / double(pred.size());
  MESSAGE("linear probe MSE at sigma 0: " << mse);
  CHECK(mse < 1e-6);
}

TEST_CASE("mismatched pairs draw text from another latent") {
  auto w = tiny_world();
  auto p = small_corpus(0.0);
  p.mismatch_rate = 1.0;
  auto c = data::generate_corpus(w, p);
  data::World world(w);
  std::size_t differing = 0;
  for (std::size_t i = 0; i < c.train.size(); ++i) {
    std::span<const float> lat(c.train.latents.data() + i * w.latent_dim, w.latent_dim);
    differing += world.tokens_for(lat, c.train.samples[i].tokens.size()) != c.train.samples[i].tokens;
  }
  CHECK(differing > c.train.size() / 2);
}

TEST_CASE("generation is deterministic and files round trip") {
  auto w = tiny_world();
  auto a = data::generate_corpus(w, small_corpus(0.3, 11));
  auto b = data::generate_corpus(w, small_corpus(0.3, 11));
  const auto da = scratch("a"), db = scratch("b");
  data::write_corpus(da, a);
  data::write_corpus(db, b);
  for (const char* f : {"train.mtds", "val.mtds", "test.mtds", "manifest.json"}) CHECK(slurp(da / f) == slurp(db / f));

  auto other = data::generate_corpus(w, small_corpus(0.3, 12));
  CHECK(other.train.samples[0].patches != a.train.samples[0].patches);

  auto back = data::read_corpus(da);
  CHECK(back.manifest.to_json() == data::read_manifest(db).to_json());
  REQUIRE(back.train.size() == a.train.size());
  CHECK(back.train.num_patches == 2);
  CHECK(back.train.patch_dim == 8);
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    CHECK(back.train.samples[i].id == a.train.samples[i].id);
    CHECK(back.train.samples[i].tokens == a.train.samples[i].tokens);
    CHECK(back.train.samples[i].patches == a.train.samples[i].patches);
  }
  CHECK(back.train.latents.empty());

  data::SplitReader reader(da / "val.mtds");
  std::uint64_t prev = 0;
  std::size_t n = 0;
  while (auto s = reader.next()) {
    if (n) CHECK(s->id > prev);
    prev = s->id;
    ++n;
  }
  CHECK(n == 20);
}

TEST_CASE("corrupt files report an offset") {
  auto w = tiny_world();
  auto c = data::generate_corpus(w, small_corpus(0.3));
  const auto d = scratch("corrupt");
  data::save_split(d / "s.mtds", c.val);
  auto bytes = slurp(d / "s.mtds");

  auto bad = bytes;
  bad[1] = 'X';
  std::ofstream(d / "bad.mtds", std::ios::binary) << bad;
  try {
    data::load_split(d / "bad.mtds");
    FAIL("expected a format error");
  } catch (const data::FormatError& e) {
    CHECK(std::string(e.what()).find("offset 0") != std::string::npos);
  }

  std::ofstream(d / "short.mtds", std::ios::binary) << bytes.substr(0, bytes.size() - 7);
  CHECK_THROWS_AS(data::load_split(d / "short.mtds"), data::FormatError);
  std::ofstream(d / "hdr.mtds", std::ios::binary) << bytes.substr(0, 6);
  CHECK_THROWS_AS(data::load_split(d / "hdr.mtds"), data::FormatError);
}

TEST_CASE("seeded shuffle") {
  auto a = data::shuffled_order(100, 5), b = data::shuffled_order(100, 5), c = data::shuffled_order(100, 6);
  CHECK(a == b);
  CHECK(a != c);
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 100; ++i) CHECK(sorted[i] == i);
}

TEST_CASE("retrieval gets harder as noise grows") {
  data::WorldParams w;  // default 32-d latent, 16 patches of 48
  double prev = 1.1;
  for (double sigma : {0.0, 0.35, 1.0, 2.0, 4.0}) {
    data::CorpusParams p;
    p.n_train = 0;
    p.n_val = 0;
    p.n_test = 1000;
    p.sigma = sigma;
    auto c = data::generate_corpus(w, p);
    const double r1 = latent_matcher_r1(w, c.test);
    MESSAGE("latent matcher R@1 at sigma " << sigma << ": " << r1);
    CHECK(r1 <= prev);
    prev = r1;
  }
}

TEST_CASE("parameter validation") {
  auto p = small_corpus(-1.0);
  CHECK_THROWS_AS(data::generate_corpus(tiny_world(), p), data::ParamError);
  auto q = small_corpus(0.1);
  q.n_train = 3;
  q.n_val = 3;
  q.n_test = 3;
  CHECK_THROWS_AS(data::generate_corpus(tiny_world(), q), data::ParamError);
  auto w = tiny_world();
  w.max_tokens = 40;
  CHECK_THROWS_AS(data::World{w}, data::ParamError);
}
