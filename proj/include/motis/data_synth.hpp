// Synthetic paired text/image corpora with a planted shared latent, and the
// MTDS sample file format.
//
// A World fixes two seeded projections: latent -> vocabulary scores (the text
// is the top-L tokens in score order) and latent -> patch features (one
// shared per-patch projection scaled by a fixed per-patch gain, plus
// isotropic Gaussian noise of std sigma). Corpora drawn from the same World
// share that mapping, so a general corpus and an in-domain corpus differ only
// in how their latents are distributed.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace motis::data {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParamError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Sample {
  std::uint64_t id = 0;
  std::vector<std::uint32_t> tokens;
  std::vector<float> patches;  // num_patches × patch_dim
};

struct Split {
  std::string name;
  std::size_t num_patches = 0;
  std::size_t patch_dim = 0;
  std::vector<Sample> samples;
  // In memory only, one row per sample (latent_dim wide); empty after load.
  std::vector<float> latents;

  std::size_t size() const { return samples.size(); }
};

struct WorldParams {
  std::size_t latent_dim = 32;
  std::size_t vocab_size = 512;
  std::size_t num_patches = 16;
  std::size_t patch_dim = 48;
  std::size_t min_tokens = 4;
  std::size_t max_tokens = 12;
  std::uint64_t world_seed = 1;

  void validate() const;
  nlohmann::json to_json() const;
  static WorldParams from_json(const nlohmann::json& j);
};

enum class LatentPrior { kUniform, kClustered };

struct CorpusParams {
  std::size_t n_train = 20000;
  std::size_t n_val = 1000;
  std::size_t n_test = 1000;
  double sigma = 0.35;
  std::uint64_t seed = 7;
  LatentPrior prior = LatentPrior::kClustered;
  std::size_t clusters = 64;
  double cluster_spread = 0.6;  // per-sample offset norm around a unit center
  double mismatch_rate = 0.0;   // fraction of pairs whose text comes from an unrelated latent
  std::uint64_t first_id = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static CorpusParams from_json(const nlohmann::json& j);
};

class World {
 public:
  explicit World(WorldParams p);
  const WorldParams& params() const { return p_; }

  // Top-len token ids (1..vocab-1, distinct) in descending score order.
  std::vector<std::uint32_t> tokens_for(std::span<const float> latent, std::size_t len) const;
  // Noise-free patch features.
  std::vector<float> patches_for(std::span<const float> latent) const;
  // Patch projection, (num_patches·patch_dim) × latent_dim row-major.
  std::span<const float> image_projection() const { return img_; }

 private:
  WorldParams p_;
  std::vector<float> txt_;  // vocab × latent
  std::vector<float> img_;  // (P·pd) × latent
};

struct CorpusManifest {
  WorldParams world;
  CorpusParams corpus;
  std::size_t n_train = 0, n_val = 0, n_test = 0;
  std::string train_file, val_file, test_file;  // relative to the manifest

  nlohmann::json to_json() const;
  static CorpusManifest from_json(const nlohmann::json& j);
};

struct Corpus {
  CorpusManifest manifest;
  Split train, val, test;
};

// Ids are consecutive from first_id across train, val, test in that order.
Corpus generate_corpus(const WorldParams& world, const CorpusParams& params);

// Writes manifest.json plus one .mtds file per split into dir.
CorpusManifest write_corpus(const std::filesystem::path& dir, const Corpus& corpus);
CorpusManifest read_manifest(const std::filesystem::path& dir);
Corpus read_corpus(const std::filesystem::path& dir);

void save_split(const std::filesystem::path& path, const Split& split);
Split load_split(const std::filesystem::path& path, std::string name = {});

// Streams records one at a time.
class SplitReader {
 public:
  explicit SplitReader(const std::filesystem::path& path);
  std::optional<Sample> next();
  // Shape of the records read so far; 0 before the first record.
  std::size_t num_patches() const { return num_patches_; }
  std::size_t patch_dim() const { return patch_dim_; }

 private:
  std::filesystem::path path_;
  std::ifstream is_;
  std::size_t num_patches_ = 0, patch_dim_ = 0;
};

// Seeded permutation of 0..n-1.
std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed);

}  // namespace motis::data
