#include "motis/data_synth.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <random>

namespace motis::data {

static_assert(std::endian::native == std::endian::little, "sample files assume a little-endian host");

namespace {

constexpr char kMagic[4] = {'M', 'T', 'D', 'S'};
constexpr std::uint32_t kVersion = 1;

// Stream offsets for independent draws off one corpus seed.
constexpr std::uint64_t kCenterStream = 0x9e3779b97f4a7c15ull;
constexpr std::uint64_t kSplitStream[3] = {0x1, 0x2, 0x3};

void normalize(std::vector<float>& v) {
  double s = 0;
  for (float x : v) s += double(x) * x;
  const double inv = 1.0 / std::sqrt(s);
  for (auto& x : v) x = static_cast<float>(x * inv);
}

std::vector<float> gaussian_unit(std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<float> v(d);
  for (auto& x : v) x = static_cast<float>(g(rng));
  normalize(v);
  return v;
}

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
bool get(std::istream& is, T& v) {
  return static_cast<bool>(is.read(reinterpret_cast<char*>(&v), sizeof v));
}

std::string at_offset(const std::filesystem::path& p, std::streamoff off) {
  return p.string() + " at offset " + std::to_string(off);
}

const char* prior_name(LatentPrior p) { return p == LatentPrior::kUniform ? "uniform" : "clustered"; }

}  // namespace

// ---------------------------------------------------------------------------
// parameters

void WorldParams::validate() const {
  if (latent_dim < 1) throw ParamError("latent_dim must be >= 1");
  if (vocab_size < 2) throw ParamError("vocab_size must be >= 2");
  if (num_patches < 1 || patch_dim < 1) throw ParamError("num_patches and patch_dim must be >= 1");
  if (num_patches > 65535 || patch_dim > 65535) throw ParamError("num_patches and patch_dim must fit in 16 bits");
  if (min_tokens < 1 || min_tokens > max_tokens) throw ParamError("need 1 <= min_tokens <= max_tokens");
  if (max_tokens >= vocab_size) throw ParamError("max_tokens must be below vocab_size");
}

nlohmann::json WorldParams::to_json() const {
  return {{"latent_dim", latent_dim}, {"vocab_size", vocab_size}, {"num_patches", num_patches},
          {"patch_dim", patch_dim},   {"min_tokens", min_tokens}, {"max_tokens", max_tokens},
          {"world_seed", world_seed}};
}

WorldParams WorldParams::from_json(const nlohmann::json& j) {
  WorldParams p;
  p.latent_dim = j.value("latent_dim", p.latent_dim);
  p.vocab_size = j.value("vocab_size", p.vocab_size);
  p.num_patches = j.value("num_patches", p.num_patches);
  p.patch_dim = j.value("patch_dim", p.patch_dim);
  p.min_tokens = j.value("min_tokens", p.min_tokens);
  p.max_tokens = j.value("max_tokens", p.max_tokens);
  p.world_seed = j.value("world_seed", p.world_seed);
  p.validate();
  return p;
}

void CorpusParams::validate() const {
  if (n_train + n_val + n_test < 10) throw ParamError("corpus needs at least 10 pairs");
  if (!(sigma >= 0)) throw ParamError("sigma must be >= 0");
  if (prior == LatentPrior::kClustered && clusters < 1) throw ParamError("clusters must be >= 1");
  if (!(mismatch_rate >= 0 && mismatch_rate <= 1)) throw ParamError("mismatch_rate must be in [0, 1]");
  if (!(cluster_spread >= 0)) throw ParamError("cluster_spread must be >= 0");
}

nlohmann::json CorpusParams::to_json() const {
  return {{"n_train", n_train},     {"n_val", n_val},
          {"n_test", n_test},       {"sigma", sigma},
          {"seed", seed},           {"prior", prior_name(prior)},
          {"clusters", clusters},   {"cluster_spread", cluster_spread},
          {"mismatch_rate", mismatch_rate}, {"first_id", first_id}};
}

CorpusParams CorpusParams::from_json(const nlohmann::json& j) {
  CorpusParams p;
  p.n_train = j.value("n_train", p.n_train);
  p.n_val = j.value("n_val", p.n_val);
  p.n_test = j.value("n_test", p.n_test);
  p.sigma = j.value("sigma", p.sigma);
  p.seed = j.value("seed", p.seed);
  const auto prior = j.value("prior", std::string(prior_name(p.prior)));
  if (prior == "uniform")
    p.prior = LatentPrior::kUniform;
  else if (prior == "clustered")
    p.prior = LatentPrior::kClustered;
  else
    throw ParamError("unknown latent prior '" + prior + "'");
  p.clusters = j.value("clusters", p.clusters);
  p.cluster_spread = j.value("cluster_spread", p.cluster_spread);
  p.mismatch_rate = j.value("mismatch_rate", p.mismatch_rate);
  p.first_id = j.value("first_id", p.first_id);
  p.validate();
  return p;
}

nlohmann::json CorpusManifest::to_json() const {
  return {{"world", world.to_json()},
          {"corpus", corpus.to_json()},
          {"counts", {{"train", n_train}, {"val", n_val}, {"test", n_test}}},
          {"files", {{"train", train_file}, {"val", val_file}, {"test", test_file}}}};
}

CorpusManifest CorpusManifest::from_json(const nlohmann::json& j) {
  CorpusManifest m;
  try {
    m.world = WorldParams::from_json(j.at("world"));
    m.corpus = CorpusParams::from_json(j.at("corpus"));
    m.n_train = j.at("counts").at("train");
    m.n_val = j.at("counts").at("val");
    m.n_test = j.at("counts").at("test");
    m.train_file = j.at("files").at("train");
    m.val_file = j.at("files").at("val");
    m.test_file = j.at("files").at("test");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed corpus manifest: ") + e.what());
  }
  return m;
}

// ---------------------------------------------------------------------------
// World

World::World(WorldParams p) : p_(p) {
  p_.validate();
  std::mt19937_64 rng(p_.world_seed);
  std::normal_distribution<double> g(0.0, 1.0);
  txt_.resize(p_.vocab_size * p_.latent_dim);
  for (auto& x : txt_) x = static_cast<float>(g(rng));
  // Every patch applies one shared patch_dim × latent_dim projection times a
  // fixed per-patch gain, so patches are translation-alike views of the same
  // concept. Entries have variance 1/latent_dim.
  const double s = 1.0 / std::sqrt(double(p_.latent_dim));
  std::vector<double> shared(p_.patch_dim * p_.latent_dim);
  for (auto& x : shared) x = g(rng) * s;
  std::uniform_real_distribution<double> gain(0.5, 1.5);
  img_.resize(p_.num_patches * p_.patch_dim * p_.latent_dim);
  for (std::size_t q = 0; q < p_.num_patches; ++q) {
    const double c = gain(rng);
    for (std::size_t i = 0; i < shared.size(); ++i)
      img_[q * shared.size() + i] = static_cast<float>(c * shared[i]);
  }
}

std::vector<std::uint32_t> World::tokens_for(std::span<const float> latent, std::size_t len) const {
  const std::size_t z = p_.latent_dim;
  std::vector<std::pair<double, std::uint32_t>> scores;
  scores.reserve(p_.vocab_size - 1);
  for (std::uint32_t t = 1; t < p_.vocab_size; ++t) {
    double s = 0;
    for (std::size_t j = 0; j < z; ++j) s += double(txt_[t * z + j]) * latent[j];
    scores.emplace_back(s, t);
  }
  len = std::min(len, scores.size());
  std::partial_sort(scores.begin(), scores.begin() + static_cast<std::ptrdiff_t>(len), scores.end(),
                    [](auto& a, auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
  std::vector<std::uint32_t> out(len);
  for (std::size_t i = 0; i < len; ++i) out[i] = scores[i].second;
  return out;
}

std::vector<float> World::patches_for(std::span<const float> latent) const {
  const std::size_t z = p_.latent_dim, f = p_.num_patches * p_.patch_dim;
  std::vector<float> out(f);
  for (std::size_t i = 0; i < f; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < z; ++j) s += double(img_[i * z + j]) * latent[j];
    out[i] = static_cast<float>(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// generation

Corpus generate_corpus(const WorldParams& wp, const CorpusParams& cp) {
  cp.validate();
  World world(wp);
  const std::size_t z = wp.latent_dim;

  std::vector<std::vector<float>> centers;
  if (cp.prior == LatentPrior::kClustered) {
    std::mt19937_64 crng(cp.seed ^ kCenterStream);
    for (std::size_t c = 0; c < cp.clusters; ++c) centers.push_back(gaussian_unit(z, crng));
  }

  Corpus corpus;
  corpus.manifest.world = wp;
  corpus.manifest.corpus = cp;
  corpus.manifest.n_train = cp.n_train;
  corpus.manifest.n_val = cp.n_val;
  corpus.manifest.n_test = cp.n_test;

  std::uint64_t next_id = cp.first_id;
  Split* splits[3] = {&corpus.train, &corpus.val, &corpus.test};
  const char* names[3] = {"train", "val", "test"};
  const std::size_t counts[3] = {cp.n_train, cp.n_val, cp.n_test};
  for (int s = 0; s < 3; ++s) {
    Split& split = *splits[s];
    split.name = names[s];
    split.num_patches = wp.num_patches;
    split.patch_dim = wp.patch_dim;
    split.samples.reserve(counts[s]);
    split.latents.reserve(counts[s] * z);
    std::mt19937_64 rng(cp.seed * 0x100000001b3ull + kSplitStream[s]);
    std::normal_distribution<double> g(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> len(wp.min_tokens, wp.max_tokens);
    std::uniform_int_distribution<std::size_t> pick(0, centers.empty() ? 0 : centers.size() - 1);
    std::uniform_real_distribution<double> u(0.0, 1.0);

    auto draw_latent = [&] {
      if (centers.empty()) return gaussian_unit(z, rng);
      const auto& c = centers[pick(rng)];
      std::vector<float> v(z);
      const double step = cp.cluster_spread / std::sqrt(double(z));
      for (std::size_t j = 0; j < z; ++j) v[j] = static_cast<float>(c[j] + step * g(rng));
      normalize(v);
      return v;
    };

    for (std::size_t i = 0; i < counts[s]; ++i) {
      Sample smp;
      smp.id = next_id++;
      const auto latent = draw_latent();
      const std::size_t L = len(rng);
      if (cp.mismatch_rate > 0 && u(rng) < cp.mismatch_rate)
        smp.tokens = world.tokens_for(draw_latent(), L);
      else
        smp.tokens = world.tokens_for(latent, L);
      smp.patches = world.patches_for(latent);
      if (cp.sigma > 0)
        for (auto& x : smp.patches) x = static_cast<float>(x + cp.sigma * g(rng));
      split.latents.insert(split.latents.end(), latent.begin(), latent.end());
      split.samples.push_back(std::move(smp));
    }
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// files

void save_split(const std::filesystem::path& path, const Split& split) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os.write(kMagic, 4);
    put<std::uint32_t>(os, kVersion);
    for (const auto& s : split.samples) {
      if (s.tokens.size() > 65535) throw ParamError("sample " + std::to_string(s.id) + " has too many tokens");
      if (s.patches.size() != split.num_patches * split.patch_dim)
        throw ParamError("sample " + std::to_string(s.id) + " has a malformed patch matrix");
      put<std::uint64_t>(os, s.id);
      put<std::uint16_t>(os, static_cast<std::uint16_t>(s.tokens.size()));
      os.write(reinterpret_cast<const char*>(s.tokens.data()), static_cast<std::streamsize>(s.tokens.size() * 4));
      put<std::uint16_t>(os, static_cast<std::uint16_t>(split.num_patches));
      put<std::uint16_t>(os, static_cast<std::uint16_t>(split.patch_dim));
      os.write(reinterpret_cast<const char*>(s.patches.data()), static_cast<std::streamsize>(s.patches.size() * 4));
    }
    if (!os) throw std::runtime_error("failed writing " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

SplitReader::SplitReader(const std::filesystem::path& path) : path_(path), is_(path, std::ios::binary) {
  if (!is_) throw std::runtime_error("cannot open " + path.string());
  char magic[4];
  if (!is_.read(magic, 4) || !std::equal(magic, magic + 4, kMagic))
    throw FormatError("bad magic in " + at_offset(path, 0));
  std::uint32_t version = 0;
  if (!get(is_, version)) throw FormatError("truncated header in " + at_offset(path, 4));
  if (version != kVersion)
    throw FormatError("unsupported version " + std::to_string(version) + " in " + at_offset(path, 4));
}

std::optional<Sample> SplitReader::next() {
  const std::streamoff start = is_.tellg();
  Sample s;
  if (!get(is_, s.id)) {
    if (is_.gcount() == 0 && is_.eof()) return std::nullopt;
    throw FormatError("truncated record id in " + at_offset(path_, start));
  }
  auto fail = [&](const char* what) -> FormatError {
    return FormatError(std::string("truncated ") + what + " of record " + std::to_string(s.id) + " in " +
                       at_offset(path_, start));
  };
  std::uint16_t len = 0, np = 0, pd = 0;
  if (!get(is_, len)) throw fail("token count");
  s.tokens.resize(len);
  if (!is_.read(reinterpret_cast<char*>(s.tokens.data()), static_cast<std::streamsize>(len) * 4)) throw fail("tokens");
  if (!get(is_, np) || !get(is_, pd)) throw fail("patch shape");
  if (num_patches_ == 0) {
    num_patches_ = np;
    patch_dim_ = pd;
  } else if (np != num_patches_ || pd != patch_dim_) {
    throw FormatError("inconsistent patch shape in " + at_offset(path_, start));
  }
  s.patches.resize(std::size_t(np) * pd);
  if (!is_.read(reinterpret_cast<char*>(s.patches.data()), static_cast<std::streamsize>(s.patches.size() * 4)))
    throw fail("patches");
  return s;
}

Split load_split(const std::filesystem::path& path, std::string name) {
  Split split;
  split.name = name.empty() ? path.stem().string() : std::move(name);
  SplitReader reader(path);
  while (auto s = reader.next()) split.samples.push_back(std::move(*s));
  split.num_patches = reader.num_patches();
  split.patch_dim = reader.patch_dim();
  return split;
}

CorpusManifest write_corpus(const std::filesystem::path& dir, const Corpus& corpus) {
  std::filesystem::create_directories(dir);
  CorpusManifest m = corpus.manifest;
  m.train_file = "train.mtds";
  m.val_file = "val.mtds";
  m.test_file = "test.mtds";
  save_split(dir / m.train_file, corpus.train);
  save_split(dir / m.val_file, corpus.val);
  save_split(dir / m.test_file, corpus.test);
  std::ofstream(dir / "manifest.json") << m.to_json().dump(2) << "\n";
  return m;
}

CorpusManifest read_manifest(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw std::runtime_error("cannot open " + (dir / "manifest.json").string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed corpus manifest: " + std::string(e.what()));
  }
  return CorpusManifest::from_json(j);
}

Corpus read_corpus(const std::filesystem::path& dir) {
  Corpus c;
  c.manifest = read_manifest(dir);
  auto load = [&](const std::string& file, const char* name, std::size_t expect) {
    auto s = load_split(dir / file, name);
    s.num_patches = c.manifest.world.num_patches;
    s.patch_dim = c.manifest.world.patch_dim;
    if (s.size() != expect)
      throw FormatError(file + ": manifest lists " + std::to_string(expect) + " records, file has " +
                        std::to_string(s.size()));
    return s;
  };
  c.train = load(c.manifest.train_file, "train", c.manifest.n_train);
  c.val = load(c.manifest.val_file, "val", c.manifest.n_val);
  c.test = load(c.manifest.test_file, "test", c.manifest.n_test);
  return c;
}

std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  // Fisher-Yates with an explicit draw so the permutation does not depend on
  // the standard library's shuffle implementation.
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

}  // namespace motis::data
