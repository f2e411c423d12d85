// Tiny pre-LN transformer encoders for text (token ids) and images (patch
// feature matrices), and the dual encoder that pairs them with a learnable
// temperature. Teacher and student differ only in EncoderConfig.
#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "motis/autodiff.hpp"

namespace motis::enc {

using ad::Tensor;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class InputKind { kText, kImage };

struct EncoderConfig {
  InputKind kind = InputKind::kText;
  std::size_t num_layers = 2;
  std::size_t hidden_dim = 64;
  std::size_t num_heads = 2;
  std::size_t ffn_dim = 128;
  std::size_t max_positions = 32;
  std::size_t output_dim = 64;
  // text
  std::size_t vocab_size = 0;
  // image
  std::size_t num_patches = 0;
  std::size_t patch_dim = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static EncoderConfig from_json(const nlohmann::json& j);
  bool operator==(const EncoderConfig&) const = default;
};

// Desk-scale defaults. Teacher: 4 layers, hidden 128, 4 heads. Student: 2
// layers, hidden 64, 2 heads. Both project to a shared 64-d space.
inline constexpr std::size_t kDefaultVocab = 512;
inline constexpr std::size_t kDefaultMaxTokens = 16;
inline constexpr std::size_t kDefaultPatches = 64;   // 32×32 RGB in 4×4 patches
inline constexpr std::size_t kDefaultPatchDim = 48;  // 4·4·3
EncoderConfig teacher_text_config(std::size_t vocab = kDefaultVocab, std::size_t max_tokens = kDefaultMaxTokens);
EncoderConfig teacher_image_config(std::size_t patches = kDefaultPatches, std::size_t patch_dim = kDefaultPatchDim);
EncoderConfig student_text_config(std::size_t vocab = kDefaultVocab, std::size_t max_tokens = kDefaultMaxTokens);
EncoderConfig student_image_config(std::size_t patches = kDefaultPatches, std::size_t patch_dim = kDefaultPatchDim);

struct Parameter {
  std::string name;
  Tensor tensor;
};

// Ordered parameter list. Copies are deep: a copied set never aliases the
// original's storage.
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet& other);
  ParameterSet& operator=(const ParameterSet& other);
  ParameterSet(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(ParameterSet&&) noexcept = default;

  std::size_t add(std::string name, Tensor t);
  const Tensor& operator[](std::size_t i) const { return params_[i].tensor; }
  std::vector<Parameter>& items() { return params_; }
  const std::vector<Parameter>& items() const { return params_; }
  std::size_t size() const { return params_.size(); }
  std::size_t count() const;
  const Parameter* find(std::string_view name) const;

 private:
  std::vector<Parameter> params_;
};

struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::uint32_t> ids;  // batch × seq, padded with 0
  std::vector<std::uint8_t> mask;  // 1 = real token
  bool truncated = false;

  // Pads to the longest sequence; sequences longer than max_len are cut and
  // flagged.
  static TokenBatch from_sequences(const std::vector<std::vector<std::uint32_t>>& seqs, std::size_t max_len);
};

struct PatchBatch {
  std::size_t batch = 0;
  std::size_t num_patches = 0;
  std::size_t patch_dim = 0;
  std::vector<float> values;  // batch × num_patches × patch_dim
};

struct EncodeInfo {
  bool truncated = false;
};

class TransformerStack {
 public:
  TransformerStack() = default;
  TransformerStack(const EncoderConfig& cfg, ParameterSet& params, std::mt19937_64& rng);

  // x: [(batch·seq) × hidden] -> same shape, after the final layer norm.
  Tensor forward(const ParameterSet& params, const Tensor& x, std::size_t batch, std::size_t seq,
                 std::span<const std::uint8_t> key_mask) const;

 private:
  struct Block {
    std::size_t ln1_g, ln1_b, qkv_w, qkv_b, out_w, out_b, ln2_g, ln2_b, ff1_w, ff1_b, ff2_w, ff2_b;
  };
  std::vector<Block> blocks_;
  std::size_t lnf_g_ = 0, lnf_b_ = 0;
  std::size_t heads_ = 1;
};

class Encoder {
 public:
  const EncoderConfig& config() const { return cfg_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }
  std::size_t count_params() const { return params_.count(); }
  void set_trainable(bool on);
  bool trainable() const { return trainable_; }

 protected:
  EncoderConfig cfg_;
  ParameterSet params_;
  TransformerStack stack_;
  std::size_t proj_ = 0;
  bool trainable_ = true;
};

class TextEncoder : public Encoder {
 public:
  TextEncoder() = default;
  TextEncoder(const EncoderConfig& cfg, std::uint64_t seed);

  // [batch × output_dim], unit-norm rows. Mean-pools non-padding positions.
  Tensor encode(const TokenBatch& batch, EncodeInfo* info = nullptr) const;

 private:
  std::size_t tok_ = 0, pos_ = 0;
};

class ImageEncoder : public Encoder {
 public:
  ImageEncoder() = default;
  ImageEncoder(const EncoderConfig& cfg, std::uint64_t seed);

  // [batch × output_dim], unit-norm rows. Pools the classification token.
  Tensor encode(const PatchBatch& batch) const;

 private:
  std::size_t patch_w_ = 0, patch_b_ = 0, cls_ = 0, pos_ = 0;
};

enum class Role { kTeacher, kTeacherFinetuned, kStudent };
std::string to_string(Role r);
Role role_from_string(std::string_view s);

inline constexpr double kInitialTemperature = 0.07;
inline constexpr double kMinTemperature = 0.01;
inline constexpr double kMaxTemperature = 1.0;

struct DualEncoder {
  TextEncoder text;
  ImageEncoder image;
  // Holds the single learnable log_temperature: τ = exp(−log_temperature),
  // so the logit scale 1/τ is exp(log_temperature).
  ParameterSet head;
  Role role = Role::kStudent;
  std::uint64_t step = 0;

  DualEncoder() = default;
  DualEncoder(const EncoderConfig& text_cfg, const EncoderConfig& image_cfg, Role role, std::uint64_t seed);

  const Tensor& log_temperature() const { return head[0]; }
  double tau() const;
  Tensor logit_scale() const;  // differentiable exp(log_temperature)
  // Projects log_temperature back into [ln(1/τmax), ln(1/τmin)].
  void clamp_temperature();
};

enum class LayerMap { kFirstK, kRandom };

struct InitReport {
  std::vector<std::string> copied;
  std::vector<std::string> random;
};

// FIRST_K copies every student parameter whose name and shape match the
// teacher's (embeddings, layers 1..k, final norm, projection, temperature);
// the rest stays at its seeded random init and is listed in the report.
DualEncoder init_student_from_teacher(const EncoderConfig& text_cfg, const EncoderConfig& image_cfg,
                                      const DualEncoder& teacher, LayerMap map, std::uint64_t seed,
                                      InitReport* report = nullptr);

// Lowercase, whitespace split, FNV-1a hashed into ids 1..vocab-1 (0 is
// padding). At most max_len tokens.
std::vector<std::uint32_t> tokenize(std::string_view text, std::size_t vocab_size, std::size_t max_len);

// Splits an interleaved RGB image (side×side×3, values in [0,1]) into
// (side/patch)² patches of patch·patch·3 features, row-major patch order.
std::vector<float> patches_from_rgb(std::span<const float> rgb, std::size_t side, std::size_t patch);

}  // namespace motis::enc
