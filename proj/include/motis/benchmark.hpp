// Experiment configuration shared by the CLI and the acceptance runner: the
// synthetic world, the general-domain and in-domain corpora, the training
// hyperparameters and the teacher preparation (pretraining on the general
// corpus, then sequential fine-tuning in-domain) with an on-disk cache.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "motis/data_synth.hpp"
#include "motis/encoders.hpp"
#include "motis/eval_bench.hpp"
#include "motis/train_pipeline.hpp"

namespace motis::bench {

struct ExperimentConfig {
  data::WorldParams world;     // 16 patches of 48 features
  data::CorpusParams general;  // broad, noisy pairs: uniform prior, 30% mismatched
  data::CorpusParams domain;   // the target benchmark: 20k / 1k / 1k, clustered, σ 0.35
  train::TrainConfig train;
  std::uint64_t teacher_seed = 1000;
  std::vector<std::uint64_t> seeds = {1, 2, 3};

  ExperimentConfig();
  void validate() const;
  nlohmann::json to_json() const;
  // Unknown keys are rejected; missing keys keep their defaults.
  static ExperimentConfig from_json(const nlohmann::json& j);
  // "train.learning_rate=1e-3", "domain.n_train=5000", "seeds=[4,5]".
  void apply_override(const std::string& assignment);
  // Digest of everything the teachers depend on.
  std::string teacher_key() const;
};

ExperimentConfig load_config(const std::filesystem::path& path);

enc::EncoderConfig teacher_text(const data::WorldParams& w);
enc::EncoderConfig teacher_image(const data::WorldParams& w);
enc::EncoderConfig student_text(const data::WorldParams& w);
enc::EncoderConfig student_image(const data::WorldParams& w);

struct Teachers {
  enc::DualEncoder teacher;     // pretrained on the general corpus
  enc::DualEncoder teacher_ft;  // fine-tuned in-domain
  train::StageReport pretrain;  // empty stage name when loaded from cache
  train::StageReport finetune;
  bool from_cache = false;
};

using Log = std::function<void(const std::string&)>;

// Joint pretraining from a seeded random init. The guard on joint updates is
// lifted for this call only.
train::StageReport pretrain_teacher(enc::DualEncoder& teacher, const data::Corpus& general,
                                    const ExperimentConfig& cfg);

// Loads <cache_dir>/<teacher_key>/{teacher,teacher_ft}.ckpt when present,
// else trains and stores them. An empty cache_dir disables caching.
Teachers prepare_teachers(const ExperimentConfig& cfg, const data::Corpus& general, const data::Corpus& domain,
                          const std::filesystem::path& cache_dir, const Log& log = {});

// Disk size of each tower's own checkpoint (written under scratch_dir) and
// single-thread encoding throughput at batch 32.
eval::EfficiencyEntry measure_efficiency(const std::string& name, const enc::DualEncoder& model,
                                         const std::filesystem::path& scratch_dir, std::size_t timed = 10);

}  // namespace motis::bench
