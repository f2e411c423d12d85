// Optimizer, schedule and the two-stage compression pipeline: teacher
// pretraining and sequential fine-tuning, stage-1 intra-modal distillation,
// stage-2 sequential student fine-tuning with distillation and mined hard
// negatives, the inter-modal baseline and the ablation variants.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "motis/data_synth.hpp"
#include "motis/encoders.hpp"
#include "motis/eval_bench.hpp"
#include "motis/vector_index.hpp"

namespace motis::train {

class TrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------------------
// configuration

struct AblationFlags {
  bool use_stage1 = true;
  bool use_kd = true;
  bool use_hn = true;
  bool use_sf = true;
  bool operator==(const AblationFlags&) const = default;
};

enum class Stage1Loss { kIntraInfoNCE, kMse, kInterInfoNCE };
std::string to_string(Stage1Loss l);
Stage1Loss stage1_loss_from_string(const std::string& s);

struct TrainConfig {
  double learning_rate = 3e-4;
  double weight_decay = 0.1;
  std::size_t batch_size = 32;
  std::size_t stage1_epochs = 1;
  std::size_t stage2_epochs = 5;      // per sequential phase
  std::size_t teacher_epochs = 2;     // per teacher fine-tuning phase
  std::size_t pretrain_epochs = 1;    // teacher pretraining on the general corpus
  std::size_t warmup_steps = 0;       // 0: warmup_fraction of a phase's steps
  double warmup_fraction = 0.05;
  std::uint64_t seed = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 1.0;             // global L2 norm; 0 disables
  AblationFlags flags;
  Stage1Loss stage1_loss = Stage1Loss::kIntraInfoNCE;
  std::size_t hn_k = 8;
  std::uint64_t hn_refresh_every = 0;  // self-indexed (joint) mining only; 0: once per epoch
  index::Mode mining_index = index::Mode::kExact;
  bool allow_joint_unfreeze = false;
  std::size_t eval_batch = 256;

  void validate() const;
  nlohmann::json to_json() const;
  // Unknown keys are rejected.
  static TrainConfig from_json(const nlohmann::json& j);
  // "a.b=value" on the canonical JSON; value parses as JSON, else string.
  void apply_override(const std::string& assignment);
};

// ---------------------------------------------------------------------------
// optimizer and schedule

struct ParamRef {
  std::string name;
  ad::Tensor tensor;
  bool decay = true;  // weight decay applies to matrices only
};

// Trainable parameters of an encoder, names prefixed.
std::vector<ParamRef> param_refs(enc::Encoder& e, const std::string& prefix);
std::vector<ParamRef> head_refs(enc::DualEncoder& m);

struct AdamWParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

class AdamW {
 public:
  AdamW(std::vector<ParamRef> params, AdamWParams hp);
  // Decoupled decay (p -= lr·wd·p) then the bias-corrected Adam update.
  // A non-finite gradient aborts before any parameter changes. Missing
  // gradients count as zero.
  void step(double lr);
  void zero_grad();
  std::uint64_t steps() const { return t_; }
  const std::vector<ParamRef>& params() const { return params_; }

 private:
  std::vector<ParamRef> params_;
  AdamWParams hp_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t t_ = 0;
};

// Scales all gradients so their global L2 norm is at most max_norm; returns
// the norm before clipping.
double clip_grad_norm(std::span<const ParamRef> params, double max_norm);

// Linear warmup to peak, then half-cosine to 0 at total.
double cosine_warmup_lr(std::uint64_t step, double peak, std::uint64_t warmup, std::uint64_t total);

// ---------------------------------------------------------------------------
// reports

struct StepLog {
  std::string phase;
  std::uint64_t step = 0;
  double lr = 0;
  // Summed left to right into total.
  std::vector<std::pair<std::string, double>> components;
  // Sub-terms reported for inspection only (e.g. the two distillation parts).
  std::vector<std::pair<std::string, double>> detail;
  double total = 0;
};

struct EpochLog {
  std::string phase;
  std::size_t epoch = 0;
  std::map<std::string, double> mean_components;
  double mean_total = 0;
  std::optional<eval::Recall> val;
};

struct StageReport {
  std::string stage;
  AblationFlags flags;
  std::vector<std::string> phases;  // in execution order
  std::vector<EpochLog> epochs;
  std::vector<StepLog> steps;
  std::optional<eval::Recall> best_val;
  double wall_seconds = 0;
  std::string checkpoint;

  nlohmann::json to_json(bool with_steps = false) const;
};

// Every training phase reports its start (finished = false) and its end,
// after best-checkpoint restore, with the parameters it updates and the
// encoders it must leave unchanged. For monitoring and external checks.
struct PhaseEvent {
  std::string phase;
  bool finished = false;
  std::span<const ParamRef> trained;
  std::span<const enc::Encoder* const> frozen;
};
using PhaseObserver = std::function<void(const PhaseEvent&)>;
// Process-wide; an empty function removes the observer.
void set_phase_observer(PhaseObserver observer);

// ---------------------------------------------------------------------------
// pipeline

// Frozen-teacher embeddings of a split, row-aligned with its samples.
struct EmbeddingTable {
  std::size_t dim = 0;
  std::vector<float> text;
  std::vector<float> image;
  double logit_scale = 1.0;
};
EmbeddingTable embed_dual(const enc::DualEncoder& model, const data::Split& split, std::size_t batch = 256);

// Joint symmetric InfoNCE from the current weights (both towers trainable;
// requires cfg.allow_joint_unfreeze). Used to pretrain the teacher on the
// general corpus.
StageReport pretrain_dual(enc::DualEncoder& model, const data::Split& train, const data::Split* val,
                          const TrainConfig& cfg, const std::string& stage = "pretrain");

// Phase A trains the image tower against the frozen text tower, phase B the
// text tower against the phase-A image tower. Returns a TEACHER_FT copy; the
// input is not modified.
enc::DualEncoder finetune_teacher_sequential(const enc::DualEncoder& teacher, const data::Split& train,
                                             const data::Split& val, const TrainConfig& cfg,
                                             StageReport* report = nullptr);

// Decoupled per-modality distillation from the frozen pretrained teacher over
// independently shuffled text and image streams. The kInterInfoNCE variant
// instead trains both student towers jointly on the pairs, teacher unused.
// teacher_cache, when given, must be embed_dual(teacher, general).
StageReport run_stage1(enc::DualEncoder& student, const enc::DualEncoder& teacher, const data::Split& general,
                       const TrainConfig& cfg, const EmbeddingTable* teacher_cache = nullptr);

// Which towers stage 2 trains.
enum class Stage2Scope {
  kDual,       // both student towers (image phase, then text phase)
  kImageOnly,  // student image tower; the text side stays the fine-tuned teacher's
};

struct Stage2Result {
  StageReport report;
  // Encoders to evaluate: the trained student image tower and, for kDual,
  // the student text tower; for kImageOnly without SF, the jointly trained
  // copy of the teacher text tower.
  enc::DualEncoder model;
};

// Sequential fine-tuning with InfoNCE + KD + HN (flags select terms). With
// use_sf = false the two towers train jointly, which needs
// cfg.allow_joint_unfreeze. teacher_cache, when given, must be
// embed_dual(teacher_ft, train).
Stage2Result run_stage2_student(const enc::DualEncoder& student, const enc::DualEncoder& teacher_ft,
                                const data::Split& train, const data::Split& val, const TrainConfig& cfg,
                                Stage2Scope scope = Stage2Scope::kDual,
                                const EmbeddingTable* teacher_cache = nullptr);

// Inter-modal InfoNCE only, both towers jointly, on the general pairs and
// then the in-domain pairs. Marks every ablation flag false.
Stage2Result train_baseline_intermodal(const enc::EncoderConfig& text_cfg, const enc::EncoderConfig& image_cfg,
                                       const data::Split& general, const data::Split& train,
                                       const data::Split& val, const TrainConfig& cfg);

// Pretrained and fine-tuned teacher plus the data every student run shares.
struct Workbench {
  const data::Split* general = nullptr;
  const data::Split* train = nullptr;
  const data::Split* val = nullptr;
  const data::Split* test = nullptr;
  const enc::DualEncoder* teacher = nullptr;     // pretrained, stage-1 target
  const enc::DualEncoder* teacher_ft = nullptr;  // stage-2 target
  enc::EncoderConfig student_text;
  enc::EncoderConfig student_image;
  // Optional caches of embed_dual(teacher, general) / (teacher_ft, train).
  const EmbeddingTable* general_cache = nullptr;
  const EmbeddingTable* train_cache = nullptr;
};

enum class Variant {
  kFull,
  kNoStage1,
  kStage1Mse,
  kStage1InfoNCE,
  kNoSF,
  kNoKD,
  kNoHN,
  kNoKDHN,
};
inline constexpr Variant kAllVariants[] = {Variant::kFull,  Variant::kNoStage1, Variant::kStage1Mse,
                                           Variant::kStage1InfoNCE, Variant::kNoSF, Variant::kNoKD,
                                           Variant::kNoHN, Variant::kNoKDHN};
std::string to_string(Variant v);
// Flags and stage-1 loss of a variant on top of base.
TrainConfig variant_config(const TrainConfig& base, Variant v);

struct VariantRun {
  Variant variant = Variant::kFull;
  std::uint64_t seed = 0;
  StageReport stage1;
  StageReport stage2;
  eval::RetrievalRun test;
  enc::DualEncoder model;
};

// Student from the seeded random init through stage 1 (unless ablated) and
// stage 2, evaluated on the test split.
VariantRun run_variant(const Workbench& wb, const TrainConfig& base, Variant v, std::uint64_t seed,
                       Stage2Scope scope = Stage2Scope::kDual);

struct AblationResult {
  std::vector<VariantRun> runs;
  std::vector<eval::ResultRow> rows;  // one per variant, kAllVariants order
};

// Every variant for every seed on the image tower (text fixed to the
// fine-tuned teacher's). Rows are flagged when a directional expectation
// (w/o KD, w/o HN at most full) does not hold.
AblationResult run_ablation_suite(const Workbench& wb, const TrainConfig& base, std::span<const std::uint64_t> seeds,
                                  const std::function<void(const VariantRun&)>& on_run = {});

}  // namespace motis::train
