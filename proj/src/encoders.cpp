#include "motis/encoders.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>

namespace motis::enc {

namespace {

Tensor normal_param(ad::Shape shape, double stddev, std::mt19937_64& rng) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(dist(rng));
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor const_param(ad::Shape shape, float value) { return Tensor::filled(std::move(shape), value, true); }

Tensor linear(const ParameterSet& p, const Tensor& x, std::size_t w, std::size_t b) {
  return ad::add_row_vector(ad::matmul(x, p[w]), p[b]);
}

const char* kind_name(InputKind k) { return k == InputKind::kText ? "text" : "image"; }

}  // namespace

// ---------------------------------------------------------------------------
// EncoderConfig

void EncoderConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("encoder config: " + m); };
  if (num_layers < 1) fail("num_layers must be >= 1");
  if (num_heads < 1) fail("num_heads must be >= 1");
  if (hidden_dim == 0 || hidden_dim % num_heads != 0) fail("hidden_dim must be a positive multiple of num_heads");
  if (ffn_dim == 0 || output_dim == 0) fail("ffn_dim and output_dim must be positive");
  if (kind == InputKind::kText) {
    if (vocab_size < 2) fail("vocab_size must be >= 2");
    if (max_positions < 1) fail("max_positions must be >= 1");
  } else {
    if (num_patches < 1 || patch_dim < 1) fail("num_patches and patch_dim must be positive");
    if (max_positions != num_patches + 1) fail("image max_positions must equal num_patches + 1");
  }
}

nlohmann::json EncoderConfig::to_json() const {
  nlohmann::json j{{"kind", kind_name(kind)},     {"num_layers", num_layers}, {"hidden_dim", hidden_dim},
                   {"num_heads", num_heads},      {"ffn_dim", ffn_dim},       {"max_positions", max_positions},
                   {"output_dim", output_dim}};
  if (kind == InputKind::kText) {
    j["vocab_size"] = vocab_size;
  } else {
    j["num_patches"] = num_patches;
    j["patch_dim"] = patch_dim;
  }
  return j;
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json& j) {
  EncoderConfig c;
  try {
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "text") {
      c.kind = InputKind::kText;
      c.vocab_size = j.at("vocab_size").get<std::size_t>();
    } else if (kind == "image") {
      c.kind = InputKind::kImage;
      c.num_patches = j.at("num_patches").get<std::size_t>();
      c.patch_dim = j.at("patch_dim").get<std::size_t>();
    } else {
      throw ConfigError("encoder config: unknown kind '" + kind + "'");
    }
    c.num_layers = j.at("num_layers").get<std::size_t>();
    c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
    c.num_heads = j.at("num_heads").get<std::size_t>();
    c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
    c.max_positions = j.at("max_positions").get<std::size_t>();
    c.output_dim = j.at("output_dim").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("encoder config: ") + e.what());
  }
  c.validate();
  return c;
}

EncoderConfig teacher_text_config(std::size_t vocab, std::size_t max_tokens) {
  EncoderConfig c;
  c.kind = InputKind::kText;
  c.num_layers = 4;
  c.hidden_dim = 128;
  c.num_heads = 4;
  c.ffn_dim = 256;
  c.max_positions = max_tokens;
  c.output_dim = 64;
  c.vocab_size = vocab;
  return c;
}

EncoderConfig teacher_image_config(std::size_t patches, std::size_t patch_dim) {
  EncoderConfig c;
  c.kind = InputKind::kImage;
  c.num_layers = 4;
  c.hidden_dim = 128;
  c.num_heads = 4;
  c.ffn_dim = 256;
  c.max_positions = patches + 1;
  c.output_dim = 64;
  c.num_patches = patches;
  c.patch_dim = patch_dim;
  return c;
}

EncoderConfig student_text_config(std::size_t vocab, std::size_t max_tokens) {
  auto c = teacher_text_config(vocab, max_tokens);
  c.num_layers = 2;
  c.hidden_dim = 64;
  c.num_heads = 2;
  c.ffn_dim = 128;
  return c;
}

EncoderConfig student_image_config(std::size_t patches, std::size_t patch_dim) {
  auto c = teacher_image_config(patches, patch_dim);
  c.num_layers = 2;
  c.hidden_dim = 64;
  c.num_heads = 2;
  c.ffn_dim = 128;
  return c;
}

// ---------------------------------------------------------------------------
// ParameterSet

ParameterSet::ParameterSet(const ParameterSet& other) {
  params_.reserve(other.params_.size());
  for (const auto& p : other.params_) {
    auto t = Tensor::from(p.tensor.shape(), std::vector<float>(p.tensor.data().begin(), p.tensor.data().end()),
                          p.tensor.requires_grad());
    params_.push_back({p.name, std::move(t)});
  }
}

ParameterSet& ParameterSet::operator=(const ParameterSet& other) {
  if (this != &other) {
    ParameterSet tmp(other);
    params_ = std::move(tmp.params_);
  }
  return *this;
}

std::size_t ParameterSet::add(std::string name, Tensor t) {
  params_.push_back({std::move(name), std::move(t)});
  return params_.size() - 1;
}

std::size_t ParameterSet::count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

const Parameter* ParameterSet::find(std::string_view name) const {
  for (const auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

// ---------------------------------------------------------------------------
// batches

TokenBatch TokenBatch::from_sequences(const std::vector<std::vector<std::uint32_t>>& seqs, std::size_t max_len) {
  if (seqs.empty()) throw InputError("token batch: no sequences");
  TokenBatch b;
  b.batch = seqs.size();
  std::size_t longest = 0;
  for (const auto& s : seqs) {
    if (s.empty()) throw InputError("token batch: empty sequence");
    longest = std::max(longest, s.size());
  }
  if (longest > max_len) b.truncated = true;
  b.seq = std::min(longest, max_len);
  b.ids.assign(b.batch * b.seq, 0);
  b.mask.assign(b.batch * b.seq, 0);
  for (std::size_t i = 0; i < b.batch; ++i)
    for (std::size_t t = 0; t < std::min(seqs[i].size(), b.seq); ++t) {
      b.ids[i * b.seq + t] = seqs[i][t];
      b.mask[i * b.seq + t] = 1;
    }
  return b;
}

// ---------------------------------------------------------------------------
// TransformerStack

TransformerStack::TransformerStack(const EncoderConfig& cfg, ParameterSet& params, std::mt19937_64& rng)
    : heads_(cfg.num_heads) {
  const std::size_t h = cfg.hidden_dim, f = cfg.ffn_dim;
  const double in_std = 1.0 / std::sqrt(static_cast<double>(h));
  const double resid_std = in_std / std::sqrt(2.0 * static_cast<double>(cfg.num_layers));
  const double ff2_std = 1.0 / std::sqrt(static_cast<double>(f)) / std::sqrt(2.0 * static_cast<double>(cfg.num_layers));
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const std::string p = "block" + std::to_string(l) + ".";
    Block b{};
    b.ln1_g = params.add(p + "ln1.gain", const_param({h}, 1.0f));
    b.ln1_b = params.add(p + "ln1.bias", const_param({h}, 0.0f));
    b.qkv_w = params.add(p + "attn.qkv.weight", normal_param({h, 3 * h}, in_std, rng));
    b.qkv_b = params.add(p + "attn.qkv.bias", const_param({3 * h}, 0.0f));
    b.out_w = params.add(p + "attn.out.weight", normal_param({h, h}, resid_std, rng));
    b.out_b = params.add(p + "attn.out.bias", const_param({h}, 0.0f));
    b.ln2_g = params.add(p + "ln2.gain", const_param({h}, 1.0f));
    b.ln2_b = params.add(p + "ln2.bias", const_param({h}, 0.0f));
    b.ff1_w = params.add(p + "mlp.fc1.weight", normal_param({h, f}, in_std, rng));
    b.ff1_b = params.add(p + "mlp.fc1.bias", const_param({f}, 0.0f));
    b.ff2_w = params.add(p + "mlp.fc2.weight", normal_param({f, h}, ff2_std, rng));
    b.ff2_b = params.add(p + "mlp.fc2.bias", const_param({h}, 0.0f));
    blocks_.push_back(b);
  }
  lnf_g_ = params.add("ln_final.gain", const_param({h}, 1.0f));
  lnf_b_ = params.add("ln_final.bias", const_param({h}, 0.0f));
}

Tensor TransformerStack::forward(const ParameterSet& p, const Tensor& input, std::size_t batch, std::size_t seq,
                                 std::span<const std::uint8_t> key_mask) const {
  Tensor x = input;
  for (const auto& b : blocks_) {
    auto a = ad::layer_norm(x, p[b.ln1_g], p[b.ln1_b]);
    auto qkv = linear(p, a, b.qkv_w, b.qkv_b);
    auto att = ad::self_attention<float>(qkv, batch, seq, heads_, key_mask);
    x = ad::add(x, linear(p, att, b.out_w, b.out_b));
    auto m = ad::layer_norm(x, p[b.ln2_g], p[b.ln2_b]);
    auto ff = ad::gelu(linear(p, m, b.ff1_w, b.ff1_b));
    x = ad::add(x, linear(p, ff, b.ff2_w, b.ff2_b));
  }
  return ad::layer_norm(x, p[lnf_g_], p[lnf_b_]);
}

// ---------------------------------------------------------------------------
// encoders

void Encoder::set_trainable(bool on) {
  trainable_ = on;
  for (auto& p : params_.items()) p.tensor.set_requires_grad(on);
}

TextEncoder::TextEncoder(const EncoderConfig& cfg, std::uint64_t seed) {
  if (cfg.kind != InputKind::kText) throw ConfigError("TextEncoder needs a text config");
  cfg.validate();
  cfg_ = cfg;
  std::mt19937_64 rng(seed);
  tok_ = params_.add("token_embedding", normal_param({cfg.vocab_size, cfg.hidden_dim}, 0.02, rng));
  pos_ = params_.add("position_embedding", normal_param({cfg.max_positions, cfg.hidden_dim}, 0.02, rng));
  stack_ = TransformerStack(cfg, params_, rng);
  proj_ = params_.add("projection",
                      normal_param({cfg.hidden_dim, cfg.output_dim}, 1.0 / std::sqrt(double(cfg.hidden_dim)), rng));
}

Tensor TextEncoder::encode(const TokenBatch& in, EncodeInfo* info) const {
  if (in.batch == 0 || in.seq == 0) throw InputError("encode_text: empty batch");
  if (in.ids.size() != in.batch * in.seq || in.mask.size() != in.ids.size())
    throw InputError("encode_text: malformed token batch");
  for (auto id : in.ids)
    if (id >= cfg_.vocab_size)
      throw InputError("encode_text: token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(cfg_.vocab_size));

  const TokenBatch* batch = &in;
  TokenBatch cut;
  bool truncated = in.truncated;
  if (in.seq > cfg_.max_positions) {
    cut.batch = in.batch;
    cut.seq = cfg_.max_positions;
    for (std::size_t i = 0; i < in.batch; ++i) {
      cut.ids.insert(cut.ids.end(), in.ids.begin() + i * in.seq, in.ids.begin() + i * in.seq + cut.seq);
      cut.mask.insert(cut.mask.end(), in.mask.begin() + i * in.seq, in.mask.begin() + i * in.seq + cut.seq);
    }
    batch = &cut;
    truncated = true;
  }
  if (info) info->truncated = truncated;

  auto x = ad::embedding_lookup<float>(params_[tok_], batch->ids);
  x = ad::add_positional(x, params_[pos_], batch->seq);
  auto hdn = stack_.forward(params_, x, batch->batch, batch->seq, batch->mask);
  auto pooled = ad::masked_mean_pool<float>(hdn, batch->batch, batch->seq, batch->mask);
  return ad::l2_normalize_rows(ad::matmul(pooled, params_[proj_]));
}

ImageEncoder::ImageEncoder(const EncoderConfig& cfg, std::uint64_t seed) {
  if (cfg.kind != InputKind::kImage) throw ConfigError("ImageEncoder needs an image config");
  cfg.validate();
  cfg_ = cfg;
  std::mt19937_64 rng(seed);
  patch_w_ = params_.add("patch_embedding.weight",
                         normal_param({cfg.patch_dim, cfg.hidden_dim}, 1.0 / std::sqrt(double(cfg.patch_dim)), rng));
  patch_b_ = params_.add("patch_embedding.bias", const_param({cfg.hidden_dim}, 0.0f));
  cls_ = params_.add("class_token", normal_param({1, cfg.hidden_dim}, 0.02, rng));
  pos_ = params_.add("position_embedding", normal_param({cfg.max_positions, cfg.hidden_dim}, 0.02, rng));
  stack_ = TransformerStack(cfg, params_, rng);
  proj_ = params_.add("projection",
                      normal_param({cfg.hidden_dim, cfg.output_dim}, 1.0 / std::sqrt(double(cfg.hidden_dim)), rng));
}

Tensor ImageEncoder::encode(const PatchBatch& in) const {
  if (in.batch == 0) throw InputError("encode_image: empty batch");
  if (in.num_patches != cfg_.num_patches || in.patch_dim != cfg_.patch_dim)
    throw InputError("encode_image: expected " + std::to_string(cfg_.num_patches) + " patches of " +
                     std::to_string(cfg_.patch_dim) + " features, got " + std::to_string(in.num_patches) + " of " +
                     std::to_string(in.patch_dim));
  if (in.values.size() != in.batch * in.num_patches * in.patch_dim)
    throw InputError("encode_image: malformed patch batch");

  const std::size_t seq = cfg_.num_patches + 1;
  auto patches = Tensor::from({in.batch * in.num_patches, in.patch_dim}, in.values);
  auto x = linear(params_, patches, patch_w_, patch_b_);
  x = ad::prepend_token(x, params_[cls_], in.batch, in.num_patches);
  x = ad::add_positional(x, params_[pos_], seq);
  auto hdn = stack_.forward(params_, x, in.batch, seq, {});
  std::vector<std::size_t> cls_rows(in.batch);
  for (std::size_t b = 0; b < in.batch; ++b) cls_rows[b] = b * seq;
  auto pooled = ad::gather_rows<float>(hdn, cls_rows);
  return ad::l2_normalize_rows(ad::matmul(pooled, params_[proj_]));
}

// ---------------------------------------------------------------------------
// DualEncoder

std::string to_string(Role r) {
  switch (r) {
    case Role::kTeacher: return "TEACHER";
    case Role::kTeacherFinetuned: return "TEACHER_FT";
    case Role::kStudent: return "STUDENT";
  }
  return "STUDENT";
}

Role role_from_string(std::string_view s) {
  if (s == "TEACHER") return Role::kTeacher;
  if (s == "TEACHER_FT") return Role::kTeacherFinetuned;
  if (s == "STUDENT") return Role::kStudent;
  throw ConfigError("unknown role '" + std::string(s) + "'");
}

DualEncoder::DualEncoder(const EncoderConfig& text_cfg, const EncoderConfig& image_cfg, Role r, std::uint64_t seed)
    : text(text_cfg, seed * 2 + 1), image(image_cfg, seed * 2 + 2), role(r) {
  if (text_cfg.output_dim != image_cfg.output_dim)
    throw ConfigError("dual encoder: text and image output_dim differ");
  head.add("log_temperature", Tensor::scalar(static_cast<float>(std::log(1.0 / kInitialTemperature)), true));
}

double DualEncoder::tau() const { return std::exp(-static_cast<double>(log_temperature().item())); }

Tensor DualEncoder::logit_scale() const { return ad::exp(log_temperature()); }

void DualEncoder::clamp_temperature() {
  auto v = head.items()[0].tensor.mutable_data();
  const float lo = static_cast<float>(std::log(1.0 / kMaxTemperature));
  const float hi = static_cast<float>(std::log(1.0 / kMinTemperature));
  v[0] = std::clamp(v[0], lo, hi);
}

DualEncoder init_student_from_teacher(const EncoderConfig& text_cfg, const EncoderConfig& image_cfg,
                                      const DualEncoder& teacher, LayerMap map, std::uint64_t seed,
                                      InitReport* report) {
  DualEncoder student(text_cfg, image_cfg, Role::kStudent, seed);
  InitReport rep;
  auto transfer = [&](ParameterSet& dst, const ParameterSet& src, const std::string& prefix) {
    for (auto& p : dst.items()) {
      const Parameter* t = map == LayerMap::kFirstK ? src.find(p.name) : nullptr;
      if (t && t->tensor.shape() == p.tensor.shape()) {
        std::copy(t->tensor.data().begin(), t->tensor.data().end(), p.tensor.mutable_data().begin());
        rep.copied.push_back(prefix + p.name);
      } else {
        rep.random.push_back(prefix + p.name);
      }
    }
  };
  transfer(student.text.parameters(), teacher.text.parameters(), "text.");
  transfer(student.image.parameters(), teacher.image.parameters(), "image.");
  transfer(student.head, teacher.head, "");
  if (report) *report = std::move(rep);
  return student;
}

// ---------------------------------------------------------------------------
// featurization helpers

std::vector<std::uint32_t> tokenize(std::string_view text, std::size_t vocab_size, std::size_t max_len) {
  if (vocab_size < 2) throw ConfigError("tokenize: vocab_size must be >= 2");
  std::vector<std::uint32_t> ids;
  std::size_t i = 0;
  while (i < text.size() && ids.size() < max_len) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i >= text.size()) break;
    std::uint64_t h = 1469598103934665603ull;
    while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) {
      h ^= static_cast<std::uint64_t>(std::tolower(static_cast<unsigned char>(text[i])));
      h *= 1099511628211ull;
      ++i;
    }
    ids.push_back(static_cast<std::uint32_t>(1 + h % (vocab_size - 1)));
  }
  return ids;
}

std::vector<float> patches_from_rgb(std::span<const float> rgb, std::size_t side, std::size_t patch) {
  if (patch == 0 || side % patch != 0 || rgb.size() != side * side * 3)
    throw InputError("patches_from_rgb: image " + std::to_string(side) + "x" + std::to_string(side) +
                     " cannot be cut into " + std::to_string(patch) + "-pixel patches");
  const std::size_t grid = side / patch;
  const std::size_t pd = patch * patch * 3;
  std::vector<float> out(grid * grid * pd);
  for (std::size_t gy = 0; gy < grid; ++gy)
    for (std::size_t gx = 0; gx < grid; ++gx) {
      float* dst = out.data() + (gy * grid + gx) * pd;
      for (std::size_t y = 0; y < patch; ++y)
        for (std::size_t x = 0; x < patch; ++x)
          for (std::size_t c = 0; c < 3; ++c)
            *dst++ = rgb[((gy * patch + y) * side + gx * patch + x) * 3 + c];
    }
  return out;
}

}  // namespace motis::enc
