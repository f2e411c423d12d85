#include "motis/train_pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <mutex>
#include <numbers>
#include <numeric>

#include "motis/embed.hpp"
#include "motis/hn_miner.hpp"
#include "motis/losses.hpp"

namespace motis::train {

using ad::Tensor;

// ---------------------------------------------------------------------------
// configuration

std::string to_string(Stage1Loss l) {
  switch (l) {
    case Stage1Loss::kIntraInfoNCE: return "intra_infonce";
    case Stage1Loss::kMse: return "mse";
    case Stage1Loss::kInterInfoNCE: return "inter_infonce";
  }
  return "?";
}

Stage1Loss stage1_loss_from_string(const std::string& s) {
  if (s == "intra_infonce") return Stage1Loss::kIntraInfoNCE;
  if (s == "mse") return Stage1Loss::kMse;
  if (s == "inter_infonce") return Stage1Loss::kInterInfoNCE;
  throw ConfigError("unknown stage1_loss '" + s + "'");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
  if (!(learning_rate > 0) || !std::isfinite(learning_rate)) fail("learning_rate must be positive");
  if (weight_decay < 0) fail("weight_decay must be >= 0");
  if (batch_size < 2) fail("batch_size must be >= 2 for contrastive losses");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) fail("adam betas must lie in [0, 1)");
  if (!(eps > 0)) fail("eps must be positive");
  if (!(warmup_fraction >= 0 && warmup_fraction < 1)) fail("warmup_fraction must lie in [0, 1)");
  if (grad_clip < 0) fail("grad_clip must be >= 0");
  if (hn_k == 0) fail("hn_k must be >= 1");
  if (eval_batch == 0) fail("eval_batch must be >= 1");
  if (stage2_epochs == 0 || teacher_epochs == 0 || pretrain_epochs == 0) fail("epoch counts must be >= 1");
}

nlohmann::json TrainConfig::to_json() const {
  return {
      {"learning_rate", learning_rate},
      {"weight_decay", weight_decay},
      {"batch_size", batch_size},
      {"stage1_epochs", stage1_epochs},
      {"stage2_epochs", stage2_epochs},
      {"teacher_epochs", teacher_epochs},
      {"pretrain_epochs", pretrain_epochs},
      {"warmup_steps", warmup_steps},
      {"warmup_fraction", warmup_fraction},
      {"seed", seed},
      {"adam", {{"beta1", beta1}, {"beta2", beta2}, {"eps", eps}}},
      {"grad_clip", grad_clip},
      {"flags",
       {{"use_stage1", flags.use_stage1}, {"use_kd", flags.use_kd}, {"use_hn", flags.use_hn}, {"use_sf", flags.use_sf}}},
      {"stage1_loss", to_string(stage1_loss)},
      {"hn", {{"k", hn_k}, {"refresh_every", hn_refresh_every}, {"index", index::to_string(mining_index)}}},
      {"allow_joint_unfreeze", allow_joint_unfreeze},
      {"eval_batch", eval_batch},
  };
}

namespace {

void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, v] : j.items())
    if (std::find_if(keys.begin(), keys.end(), [&](const char* x) { return k == x; }) == keys.end())
      throw ConfigError(where + ": unknown key '" + k + "'");
}

template <class T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: bad value for '") + key + "': " + e.what());
  }
}

}  // namespace

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  reject_unknown(j,
                 {"learning_rate", "weight_decay", "batch_size", "stage1_epochs", "stage2_epochs", "teacher_epochs",
                  "pretrain_epochs", "warmup_steps", "warmup_fraction", "seed", "adam", "grad_clip", "flags",
                  "stage1_loss", "hn", "allow_joint_unfreeze", "eval_batch"},
                 "train config");
  TrainConfig c;
  read(j, "learning_rate", c.learning_rate);
  read(j, "weight_decay", c.weight_decay);
  read(j, "batch_size", c.batch_size);
  read(j, "stage1_epochs", c.stage1_epochs);
  read(j, "stage2_epochs", c.stage2_epochs);
  read(j, "teacher_epochs", c.teacher_epochs);
  read(j, "pretrain_epochs", c.pretrain_epochs);
  read(j, "warmup_steps", c.warmup_steps);
  read(j, "warmup_fraction", c.warmup_fraction);
  read(j, "seed", c.seed);
  read(j, "grad_clip", c.grad_clip);
  read(j, "allow_joint_unfreeze", c.allow_joint_unfreeze);
  read(j, "eval_batch", c.eval_batch);
  if (j.contains("adam")) {
    const auto& a = j.at("adam");
    reject_unknown(a, {"beta1", "beta2", "eps"}, "train config adam");
    read(a, "beta1", c.beta1);
    read(a, "beta2", c.beta2);
    read(a, "eps", c.eps);
  }
  if (j.contains("flags")) {
    const auto& f = j.at("flags");
    reject_unknown(f, {"use_stage1", "use_kd", "use_hn", "use_sf"}, "train config flags");
    read(f, "use_stage1", c.flags.use_stage1);
    read(f, "use_kd", c.flags.use_kd);
    read(f, "use_hn", c.flags.use_hn);
    read(f, "use_sf", c.flags.use_sf);
  }
  if (j.contains("stage1_loss")) {
    std::string s;
    read(j, "stage1_loss", s);
    c.stage1_loss = stage1_loss_from_string(s);
  }
  if (j.contains("hn")) {
    const auto& h = j.at("hn");
    reject_unknown(h, {"k", "refresh_every", "index"}, "train config hn");
    read(h, "k", c.hn_k);
    read(h, "refresh_every", c.hn_refresh_every);
    if (h.contains("index")) {
      std::string s;
      read(h, "index", s);
      try {
        c.mining_index = index::mode_from_string(s);
      } catch (const index::IndexError& e) {
        throw ConfigError(std::string("train config: ") + e.what());
      }
    }
  }
  c.validate();
  return c;
}

void TrainConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::parse_error&) {
    value = raw;
  }
  std::string pointer;
  for (std::size_t start = 0; start <= key.size();) {
    const auto dot = std::min(key.find('.', start), key.size());
    if (dot == start) throw ConfigError("override '" + assignment + "' has an empty path segment");
    pointer += "/" + key.substr(start, dot - start);
    start = dot + 1;
  }
  auto j = to_json();
  const nlohmann::json::json_pointer ptr(pointer);
  if (!j.contains(ptr)) throw ConfigError("override: unknown key '" + key + "'");
  j[ptr] = value;
  *this = from_json(j);
}

// ---------------------------------------------------------------------------
// optimizer and schedule

std::vector<ParamRef> param_refs(enc::Encoder& e, const std::string& prefix) {
  std::vector<ParamRef> out;
  for (auto& p : e.parameters().items()) out.push_back({prefix + p.name, p.tensor, p.tensor.dim() == 2});
  return out;
}

std::vector<ParamRef> head_refs(enc::DualEncoder& m) {
  std::vector<ParamRef> out;
  for (auto& p : m.head.items()) out.push_back({"head." + p.name, p.tensor, false});
  return out;
}

AdamW::AdamW(std::vector<ParamRef> params, AdamWParams hp) : params_(std::move(params)), hp_(hp) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void AdamW::step(double lr) {
  for (const auto& p : params_) {
    if (!p.tensor.has_grad()) continue;
    const auto g = p.tensor.grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!std::isfinite(g[i]))
        throw TrainError("non-finite gradient in " + p.name + " at element " + std::to_string(i) + " (optimizer step " +
                         std::to_string(t_ + 1) + ")");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(hp_.beta1, double(t_));
  const double c2 = 1.0 - std::pow(hp_.beta2, double(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    auto value = p.tensor.mutable_data();
    const auto g = p.tensor.has_grad() ? p.tensor.grad() : std::span<const float>{};
    const double decay = p.decay ? lr * hp_.weight_decay : 0.0;
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double gi = g.empty() ? 0.0 : double(g[i]);
      m[i] = hp_.beta1 * m[i] + (1 - hp_.beta1) * gi;
      v[i] = hp_.beta2 * v[i] + (1 - hp_.beta2) * gi * gi;
      double x = double(value[i]);
      x -= decay * x;
      x -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + hp_.eps);
      value[i] = static_cast<float>(x);
    }
  }
}

double clip_grad_norm(std::span<const ParamRef> params, double max_norm) {
  double ss = 0;
  for (const auto& p : params)
    if (p.tensor.has_grad())
      for (float g : p.tensor.grad()) ss += double(g) * g;
  const double norm = std::sqrt(ss);
  if (max_norm > 0 && norm > max_norm) {
    const float f = static_cast<float>(max_norm / norm);
    for (const auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      auto t = p.tensor;
      for (auto& g : t.mutable_grad()) g *= f;
    }
  }
  return norm;
}

double cosine_warmup_lr(std::uint64_t step, double peak, std::uint64_t warmup, std::uint64_t total) {
  if (step < warmup) return peak * double(step) / double(warmup);
  if (total <= warmup) return peak;
  const double progress = double(std::min(step, total) - warmup) / double(total - warmup);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------------------
// reports

nlohmann::json StageReport::to_json(bool with_steps) const {
  using eval::recall_json;
  nlohmann::json ep = nlohmann::json::array();
  for (const auto& e : epochs) {
    nlohmann::json x{{"phase", e.phase}, {"epoch", e.epoch}, {"mean_components", e.mean_components},
                     {"mean_total", e.mean_total}};
    if (e.val) x["val"] = recall_json(*e.val);
    ep.push_back(std::move(x));
  }
  nlohmann::json j{{"stage", stage},
                   {"flags",
                    {{"use_stage1", flags.use_stage1}, {"use_kd", flags.use_kd}, {"use_hn", flags.use_hn},
                     {"use_sf", flags.use_sf}}},
                   {"phases", phases},
                   {"epochs", ep},
                   {"wall_seconds", wall_seconds},
                   {"checkpoint", checkpoint}};
  if (best_val) j["best_val"] = recall_json(*best_val);
  if (with_steps) {
    nlohmann::json st = nlohmann::json::array();
    for (const auto& s : steps) {
      nlohmann::json c = nlohmann::json::object(), d = nlohmann::json::object();
      for (const auto& [k, v] : s.components) c[k] = v;
      for (const auto& [k, v] : s.detail) d[k] = v;
      st.push_back({{"phase", s.phase}, {"step", s.step}, {"lr", s.lr}, {"components", c}, {"detail", d},
                    {"total", s.total}});
    }
    j["steps"] = st;
  }
  return j;
}

// ---------------------------------------------------------------------------
// phase runner

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (tag + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

std::uint64_t tag_of(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ull;
  return h;
}

struct LossOut {
  Tensor total;
  std::vector<std::pair<std::string, double>> components;
  std::vector<std::pair<std::string, double>> detail;
};

using Rows = std::vector<std::span<const std::size_t>>;

std::mutex observer_mutex;
PhaseObserver observer_slot;

PhaseObserver phase_observer() {
  std::lock_guard lock(observer_mutex);
  return observer_slot;
}

struct PhasePlan {
  std::string name;
  std::vector<ParamRef> params;
  std::size_t epochs = 1;
  std::vector<std::size_t> stream_sizes;  // one shuffled stream per entry
  std::function<LossOut(const Rows&, std::uint64_t step)> loss;
  std::function<void(std::uint64_t step)> before_step;
  std::function<std::optional<eval::Recall>()> validate;
  std::function<void()> after_update;
  std::vector<const enc::Encoder*> frozen;
  bool select_best = false;
};

std::vector<float> encoder_bytes(const enc::Encoder& e) {
  std::vector<float> out;
  for (const auto& p : e.parameters().items()) out.insert(out.end(), p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

std::vector<std::vector<float>> snapshot(const std::vector<ParamRef>& params) {
  std::vector<std::vector<float>> out;
  for (const auto& p : params) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

void restore(const std::vector<ParamRef>& params, const std::vector<std::vector<float>>& snap) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto t = params[i].tensor;
    std::copy(snap[i].begin(), snap[i].end(), t.mutable_data().begin());
  }
}

std::uint64_t warmup_for(const TrainConfig& cfg, std::uint64_t total) {
  if (cfg.warmup_steps) {
    if (cfg.warmup_steps >= total)
      throw ConfigError("warmup_steps " + std::to_string(cfg.warmup_steps) + " must be below the phase's " +
                        std::to_string(total) + " steps");
    return cfg.warmup_steps;
  }
  if (total <= 1) return 0;
  const auto w = static_cast<std::uint64_t>(std::llround(cfg.warmup_fraction * double(total)));
  return std::clamp<std::uint64_t>(w, cfg.warmup_fraction > 0 ? 1 : 0, total - 1);
}

void run_phase(const PhasePlan& plan, const TrainConfig& cfg, StageReport& report) {
  const std::size_t B = cfg.batch_size;
  std::size_t steps_per_epoch = std::numeric_limits<std::size_t>::max();
  for (auto n : plan.stream_sizes) steps_per_epoch = std::min(steps_per_epoch, n / B);
  if (plan.stream_sizes.empty() || steps_per_epoch == 0)
    throw TrainError(plan.name + ": a stream holds fewer samples than one batch of " + std::to_string(B));
  const std::uint64_t total = std::uint64_t(steps_per_epoch) * plan.epochs;
  const std::uint64_t warmup = warmup_for(cfg, total);

  const auto observer = phase_observer();
  if (observer) observer({plan.name, false, plan.params, plan.frozen});
  std::vector<std::vector<float>> frozen_before;
  for (const auto* e : plan.frozen) frozen_before.push_back(encoder_bytes(*e));

  for (auto p : plan.params) p.tensor.set_requires_grad(true);
  AdamW opt(plan.params, {cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay});
  report.phases.push_back(plan.name);

  std::optional<std::vector<std::vector<float>>> best;
  double best_r1 = -1;
  std::uint64_t step = 0;
  const auto phase_tag = tag_of(plan.name);
  for (std::size_t epoch = 0; epoch < plan.epochs; ++epoch) {
    std::vector<std::vector<std::size_t>> orders;
    for (std::size_t s = 0; s < plan.stream_sizes.size(); ++s)
      orders.push_back(data::shuffled_order(plan.stream_sizes[s], mix_seed(cfg.seed, phase_tag + 977 * epoch + s)));
    EpochLog elog;
    elog.phase = plan.name;
    elog.epoch = epoch;
    for (std::size_t b = 0; b < steps_per_epoch; ++b, ++step) {
      if (plan.before_step) plan.before_step(step);
      Rows rows;
      for (const auto& o : orders) rows.emplace_back(o.data() + b * B, B);
      opt.zero_grad();
      auto out = plan.loss(rows, step);
      StepLog log;
      log.phase = plan.name;
      log.step = step;
      log.lr = cosine_warmup_lr(step, cfg.learning_rate, warmup, total);
      log.components = std::move(out.components);
      log.detail = std::move(out.detail);
      for (const auto& [k, v] : log.components) log.total += v;
      if (!std::isfinite(log.total))
        throw TrainError(plan.name + ": non-finite loss at step " + std::to_string(step));
      ad::backward(out.total);
      clip_grad_norm(plan.params, cfg.grad_clip);
      opt.step(log.lr);
      if (plan.after_update) plan.after_update();
      for (const auto& [k, v] : log.components) elog.mean_components[k] += v / double(steps_per_epoch);
      elog.mean_total += log.total / double(steps_per_epoch);
      report.steps.push_back(std::move(log));
    }
    opt.zero_grad();
    if (plan.validate) {
      elog.val = plan.validate();
      if (elog.val && plan.select_best && elog.val->at(1) > best_r1) {
        best_r1 = elog.val->at(1);
        best = snapshot(plan.params);
        report.best_val = elog.val;
      }
    }
    report.epochs.push_back(std::move(elog));
  }
  if (best) restore(plan.params, *best);
  if (plan.after_update) plan.after_update();
  if (observer) observer({plan.name, true, plan.params, plan.frozen});

  for (std::size_t i = 0; i < plan.frozen.size(); ++i)
    if (encoder_bytes(*plan.frozen[i]) != frozen_before[i])
      throw TrainError(plan.name + ": a frozen tower changed during the phase");
}

void require_joint_allowed(const TrainConfig& cfg, const std::string& what) {
  if (!cfg.allow_joint_unfreeze)
    throw TrainError(what + " trains both towers at once; set allow_joint_unfreeze to override");
}

Tensor gather(const std::vector<float>& table, std::size_t dim, std::span<const std::size_t> rows) {
  std::vector<float> v;
  v.reserve(rows.size() * dim);
  for (auto r : rows) v.insert(v.end(), table.begin() + r * dim, table.begin() + (r + 1) * dim);
  return Tensor::from({rows.size(), dim}, std::move(v));
}

// Constant matching logits scale · a·bᵀ.
Tensor const_logits(const Tensor& a, const Tensor& b, double scale) {
  ad::NoGradGuard no_grad;
  auto l = ad::scale(ad::matmul_nt(a, b), static_cast<float>(scale));
  return Tensor::from(l.shape(), {l.data().begin(), l.data().end()});
}

Tensor student_logits(const Tensor& text, const Tensor& image, const Tensor& scale) {
  return ad::scale_by(ad::matmul_nt(text, image), scale);
}

std::vector<std::uint64_t> ids_of(const data::Split& s, std::span<const std::size_t> rows) {
  std::vector<std::uint64_t> ids;
  ids.reserve(rows.size());
  for (auto r : rows) ids.push_back(s.samples[r].id);
  return ids;
}

// Hard-negative InfoNCE term for one batch; undefined when nothing was mined.
Tensor hard_negative_term(const hn::MiningPlan& plan, const Tensor& query, const Tensor& positive,
                          const std::vector<std::uint64_t>& ids, const index::VectorIndex& ix, const Tensor& scale) {
  const auto set = hn::mine(plan, query.data(), ids, ix);
  const std::size_t k = set.min_count();
  if (k == 0) return {};
  auto negs = hn::negative_embeddings(set, ix, k);
  auto negatives = Tensor::from({ids.size() * k, ix.dim()}, std::move(negs));
  return loss::hn_infonce(query, positive, negatives, k, scale).value;
}

index::VectorIndex index_of(const std::vector<float>& table, std::size_t dim, const data::Split& split,
                            const TrainConfig& cfg) {
  const auto ids = split_ids(split);
  return index::VectorIndex::build(dim, ids, table, cfg.mining_index);
}

std::function<std::optional<eval::Recall>()> validator(const enc::ImageEncoder& image, const enc::TextEncoder& text,
                                                       const data::Split* val, const TrainConfig& cfg) {
  if (!val || val->size() == 0) return {};
  return [&image, &text, val, &cfg]() -> std::optional<eval::Recall> {
    return eval::evaluate_retrieval(image, text, *val, eval::kDefaultKs, cfg.eval_batch).recall;
  };
}

}  // namespace

void set_phase_observer(PhaseObserver observer) {
  std::lock_guard lock(observer_mutex);
  observer_slot = std::move(observer);
}

EmbeddingTable embed_dual(const enc::DualEncoder& model, const data::Split& split, std::size_t batch) {
  EmbeddingTable t;
  t.dim = model.text.config().output_dim;
  t.text = embed_split(model.text, split, batch);
  t.image = embed_split(model.image, split, batch);
  t.logit_scale = 1.0 / model.tau();
  return t;
}

// ---------------------------------------------------------------------------
// teacher

StageReport pretrain_dual(enc::DualEncoder& model, const data::Split& train, const data::Split* val,
                          const TrainConfig& cfg, const std::string& stage) {
  cfg.validate();
  require_joint_allowed(cfg, stage);
  const auto t0 = std::chrono::steady_clock::now();
  StageReport report;
  report.stage = stage;
  report.flags = {false, false, false, false};
  const std::size_t tmax = model.text.config().max_positions;

  PhasePlan p;
  p.name = stage + ".joint";
  p.params = param_refs(model.text, "text.");
  for (auto& r : param_refs(model.image, "image.")) p.params.push_back(r);
  for (auto& r : head_refs(model)) p.params.push_back(r);
  p.epochs = cfg.pretrain_epochs;
  p.stream_sizes = {train.size()};
  p.loss = [&](const Rows& rows, std::uint64_t) {
    auto t = model.text.encode(token_batch(train, rows[0], tmax));
    auto v = model.image.encode(patch_batch(train, rows[0]));
    auto l = loss::infonce(t, v, model.logit_scale());
    LossOut out;
    out.total = ad::add(l.t2v, l.v2t);
    out.components = {{"t2v", l.t2v.item()}, {"v2t", l.v2t.item()}};
    return out;
  };
  p.validate = validator(model.image, model.text, val, cfg);
  p.after_update = [&] { model.clamp_temperature(); };
  run_phase(p, cfg, report);
  model.text.set_trainable(false);
  model.image.set_trainable(false);
  model.step += report.steps.size();
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

enc::DualEncoder finetune_teacher_sequential(const enc::DualEncoder& teacher, const data::Split& train,
                                             const data::Split& val, const TrainConfig& cfg, StageReport* report_out) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  StageReport report;
  report.stage = "teacher_ft";
  report.flags = {false, false, false, true};
  enc::DualEncoder ft = teacher;
  ft.role = enc::Role::kTeacherFinetuned;
  ft.text.set_trainable(false);
  ft.image.set_trainable(false);
  const std::size_t dim = ft.text.config().output_dim, tmax = ft.text.config().max_positions;

  // Phase A: image tower against the frozen text tower.
  const auto text_table = embed_split(ft.text, train, cfg.eval_batch);
  PhasePlan a;
  a.name = "teacher.image";
  a.params = param_refs(ft.image, "image.");
  for (auto& r : head_refs(ft)) a.params.push_back(r);
  a.epochs = cfg.teacher_epochs;
  a.stream_sizes = {train.size()};
  a.loss = [&](const Rows& rows, std::uint64_t) {
    auto v = ft.image.encode(patch_batch(train, rows[0]));
    auto l = loss::infonce(gather(text_table, dim, rows[0]), v, ft.logit_scale());
    LossOut out;
    out.total = ad::add(l.t2v, l.v2t);
    out.components = {{"t2v", l.t2v.item()}, {"v2t", l.v2t.item()}};
    return out;
  };
  a.validate = validator(ft.image, ft.text, &val, cfg);
  a.select_best = true;
  a.after_update = [&] { ft.clamp_temperature(); };
  a.frozen = {&ft.text, &teacher.text, &teacher.image};
  run_phase(a, cfg, report);
  ft.image.set_trainable(false);

  // Phase B: text tower against the phase-A image tower.
  const auto image_table = embed_split(ft.image, train, cfg.eval_batch);
  PhasePlan b;
  b.name = "teacher.text";
  b.params = param_refs(ft.text, "text.");
  for (auto& r : head_refs(ft)) b.params.push_back(r);
  b.epochs = cfg.teacher_epochs;
  b.stream_sizes = {train.size()};
  b.loss = [&](const Rows& rows, std::uint64_t) {
    auto t = ft.text.encode(token_batch(train, rows[0], tmax));
    auto l = loss::infonce(t, gather(image_table, dim, rows[0]), ft.logit_scale());
    LossOut out;
    out.total = ad::add(l.t2v, l.v2t);
    out.components = {{"t2v", l.t2v.item()}, {"v2t", l.v2t.item()}};
    return out;
  };
  b.validate = validator(ft.image, ft.text, &val, cfg);
  b.select_best = true;
  b.after_update = [&] { ft.clamp_temperature(); };
  b.frozen = {&ft.image, &teacher.text, &teacher.image};
  report.best_val.reset();
  run_phase(b, cfg, report);
  ft.text.set_trainable(false);
  for (auto& p : ft.head.items()) p.tensor.set_requires_grad(false);

  ft.step = teacher.step + report.steps.size();
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (report_out) *report_out = std::move(report);
  return ft;
}

// ---------------------------------------------------------------------------
// stage 1

StageReport run_stage1(enc::DualEncoder& student, const enc::DualEncoder& teacher, const data::Split& general,
                       const TrainConfig& cfg, const EmbeddingTable* teacher_cache) {
  cfg.validate();
  if (general.size() == 0) throw TrainError("stage 1: empty general corpus");
  if (cfg.stage1_epochs == 0) throw ConfigError("stage 1: stage1_epochs must be >= 1");
  const auto t0 = std::chrono::steady_clock::now();
  StageReport report;
  report.stage = "stage1_" + to_string(cfg.stage1_loss);
  report.flags = cfg.flags;
  const std::size_t dim = student.text.config().output_dim, tmax = student.text.config().max_positions;

  PhasePlan p;
  p.name = "stage1." + to_string(cfg.stage1_loss);
  p.params = param_refs(student.text, "text.");
  for (auto& r : param_refs(student.image, "image.")) p.params.push_back(r);
  for (auto& r : head_refs(student)) p.params.push_back(r);
  p.epochs = cfg.stage1_epochs;
  p.after_update = [&] { student.clamp_temperature(); };
  p.frozen = {&teacher.text, &teacher.image};

  EmbeddingTable local;
  if (cfg.stage1_loss == Stage1Loss::kInterInfoNCE) {
    require_joint_allowed(cfg, "inter-modal stage 1");
    p.stream_sizes = {general.size()};
    p.loss = [&](const Rows& rows, std::uint64_t) {
      auto t = student.text.encode(token_batch(general, rows[0], tmax));
      auto v = student.image.encode(patch_batch(general, rows[0]));
      auto l = loss::infonce(t, v, student.logit_scale());
      LossOut out;
      out.total = ad::add(l.t2v, l.v2t);
      out.components = {{"t2v", l.t2v.item()}, {"v2t", l.v2t.item()}};
      return out;
    };
  } else {
    if (teacher.text.config().output_dim != dim) throw ConfigError("stage 1: teacher and student dims differ");
    if (!teacher_cache) {
      local = embed_dual(teacher, general, cfg.eval_batch);
      teacher_cache = &local;
    }
    if (teacher_cache->text.size() != general.size() * dim || teacher_cache->image.size() != general.size() * dim)
      throw TrainError("stage 1: teacher cache does not match the corpus");
    const bool mse = cfg.stage1_loss == Stage1Loss::kMse;
    // Independent text and image streams: pairing is never used.
    p.stream_sizes = {general.size(), general.size()};
    p.loss = [&, mse](const Rows& rows, std::uint64_t) {
      auto t = student.text.encode(token_batch(general, rows[0], tmax));
      auto v = student.image.encode(patch_batch(general, rows[1]));
      auto tt = gather(teacher_cache->text, dim, rows[0]);
      auto tv = gather(teacher_cache->image, dim, rows[1]);
      Tensor lt, lv;
      if (mse) {
        lt = loss::mse_distill(t, tt);
        lv = loss::mse_distill(v, tv);
      } else {
        lt = loss::intra_modal_distill(t, tt, student.logit_scale());
        lv = loss::intra_modal_distill(v, tv, student.logit_scale());
      }
      LossOut out;
      out.total = ad::add(lt, lv);
      out.components = {{"t2t", lt.item()}, {"v2v", lv.item()}};
      return out;
    };
  }
  run_phase(p, cfg, report);
  student.step += report.steps.size();
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

// ---------------------------------------------------------------------------
// stage 2

Stage2Result run_stage2_student(const enc::DualEncoder& student, const enc::DualEncoder& teacher_ft,
                                const data::Split& train, const data::Split& val, const TrainConfig& cfg,
                                Stage2Scope scope, const EmbeddingTable* teacher_cache) {
  cfg.validate();
  if (teacher_ft.role != enc::Role::kTeacherFinetuned)
    throw TrainError("stage 2 needs a fine-tuned teacher (role TEACHER_FT)");
  if (train.size() == 0) throw TrainError("stage 2: empty training split");
  const auto t0 = std::chrono::steady_clock::now();
  const auto& flags = cfg.flags;
  Stage2Result res;
  auto& report = res.report;
  report.stage = scope == Stage2Scope::kDual ? "stage2" : "stage2_image";
  report.flags = flags;
  auto& m = res.model;
  m = student;
  m.role = enc::Role::kStudent;
  if (scope == Stage2Scope::kImageOnly) m.text = teacher_ft.text;
  m.text.set_trainable(false);
  m.image.set_trainable(false);

  const std::size_t dim = m.image.config().output_dim;
  if (teacher_ft.text.config().output_dim != dim || m.text.config().output_dim != dim)
    throw ConfigError("stage 2: towers embed into different dimensions");
  EmbeddingTable local;
  if (!teacher_cache) {
    local = embed_dual(teacher_ft, train, cfg.eval_batch);
    teacher_cache = &local;
  }
  const auto& T = *teacher_cache;
  if (T.text.size() != train.size() * dim) throw TrainError("stage 2: teacher cache does not match the split");
  const double t_scale = T.logit_scale;
  const std::size_t tmax = m.text.config().max_positions;
  const std::vector<const enc::Encoder*> teacher_towers = {&teacher_ft.text, &teacher_ft.image};

  // Adds KD and HN terms and returns the step's loss record.
  auto finish = [&](loss::Stage2Terms<float>& terms) {
    auto obj = loss::stage2_total(terms);
    LossOut out;
    out.total = obj.total;
    out.components = {{"t2v", obj.bundle.l_t2v}, {"v2t", obj.bundle.l_v2t}};
    if (flags.use_kd) {
      out.components.emplace_back("kd", obj.bundle.l_kd);
      out.detail = {{"kd_kl", obj.bundle.l_kd_kl}, {"kd_align", obj.bundle.l_kd_align}};
    }
    if (flags.use_hn) out.components.emplace_back("hn", obj.bundle.l_hn);
    return out;
  };

  if (flags.use_sf) {
    // Phase A: image tower against the fine-tuned teacher's text tower.
    std::optional<index::VectorIndex> text_index;
    if (flags.use_hn) text_index = index_of(T.text, dim, train, cfg);
    const hn::MiningPlan plan_a{hn::Direction::kImageQueriesText, cfg.hn_k, 0, false};
    PhasePlan a;
    a.name = "stage2.image";
    a.params = param_refs(m.image, "image.");
    for (auto& r : head_refs(m)) a.params.push_back(r);
    a.epochs = cfg.stage2_epochs;
    a.stream_sizes = {train.size()};
    a.loss = [&](const Rows& rows, std::uint64_t) {
      const auto& r = rows[0];
      auto v = m.image.encode(patch_batch(train, r));
      auto tt = gather(T.text, dim, r);
      auto scale = m.logit_scale();
      auto l = loss::infonce(tt, v, scale);
      loss::Stage2Terms<float> terms{l.t2v, l.v2t, {}, {}, {}};
      if (flags.use_kd) {
        auto tv = gather(T.image, dim, r);
        terms.kd_kl = loss::kd_kl(student_logits(tt, v, scale), const_logits(tt, tv, t_scale));
        terms.kd_align = loss::intra_modal_distill(v, tv, scale);
      }
      if (flags.use_hn) terms.hn = hard_negative_term(plan_a, v, tt, ids_of(train, r), *text_index, scale);
      return finish(terms);
    };
    a.validate = validator(m.image, m.text, &val, cfg);
    a.select_best = true;
    a.after_update = [&] { m.clamp_temperature(); };
    a.frozen = teacher_towers;
    a.frozen.push_back(&m.text);
    run_phase(a, cfg, report);
    m.image.set_trainable(false);

    if (scope == Stage2Scope::kDual) {
      // Phase B: text tower against the trained, now frozen, image tower.
      const auto image_table = embed_split(m.image, train, cfg.eval_batch);
      std::optional<index::VectorIndex> image_index;
      if (flags.use_hn) image_index = index_of(image_table, dim, train, cfg);
      const hn::MiningPlan plan_b{hn::Direction::kTextQueriesImage, cfg.hn_k, 0, false};
      PhasePlan b;
      b.name = "stage2.text";
      b.params = param_refs(m.text, "text.");
      for (auto& r : head_refs(m)) b.params.push_back(r);
      b.epochs = cfg.stage2_epochs;
      b.stream_sizes = {train.size()};
      b.loss = [&](const Rows& rows, std::uint64_t) {
        const auto& r = rows[0];
        auto t = m.text.encode(token_batch(train, r, tmax));
        auto vb = gather(image_table, dim, r);
        auto scale = m.logit_scale();
        auto l = loss::infonce(t, vb, scale);
        loss::Stage2Terms<float> terms{l.t2v, l.v2t, {}, {}, {}};
        if (flags.use_kd) {
          auto tt = gather(T.text, dim, r);
          terms.kd_kl = loss::kd_kl(student_logits(t, vb, scale), const_logits(tt, gather(T.image, dim, r), t_scale));
          terms.kd_align = loss::intra_modal_distill(t, tt, scale);
        }
        if (flags.use_hn) terms.hn = hard_negative_term(plan_b, t, vb, ids_of(train, r), *image_index, scale);
        return finish(terms);
      };
      b.validate = validator(m.image, m.text, &val, cfg);
      b.select_best = true;
      b.after_update = [&] { m.clamp_temperature(); };
      b.frozen = teacher_towers;
      b.frozen.push_back(&m.image);
      run_phase(b, cfg, report);
      m.text.set_trainable(false);
    }
  } else {
    // Both towers at once; mining indices track the towers being trained.
    require_joint_allowed(cfg, "stage 2 without sequential fine-tuning");
    const std::size_t steps_per_epoch = train.size() / cfg.batch_size;
    const std::uint64_t refresh = cfg.hn_refresh_every ? cfg.hn_refresh_every : std::max<std::size_t>(1, steps_per_epoch);
    const hn::MiningPlan plan_it{hn::Direction::kImageQueriesText, cfg.hn_k, refresh, true};
    const hn::MiningPlan plan_ti{hn::Direction::kTextQueriesImage, cfg.hn_k, refresh, true};
    std::optional<index::VectorIndex> text_index, image_index;
    if (flags.use_hn) {
      text_index = index_of(embed_split(m.text, train, cfg.eval_batch), dim, train, cfg);
      image_index = index_of(embed_split(m.image, train, cfg.eval_batch), dim, train, cfg);
    }
    PhasePlan j;
    j.name = "stage2.joint";
    j.params = param_refs(m.text, "text.");
    for (auto& r : param_refs(m.image, "image.")) j.params.push_back(r);
    for (auto& r : head_refs(m)) j.params.push_back(r);
    j.epochs = cfg.stage2_epochs;
    j.stream_sizes = {train.size()};
    if (flags.use_hn)
      j.before_step = [&](std::uint64_t step) {
        hn::maybe_refresh(plan_it, step, m.text, train, *text_index);
        hn::maybe_refresh(plan_ti, step, m.image, train, *image_index);
      };
    j.loss = [&](const Rows& rows, std::uint64_t) {
      const auto& r = rows[0];
      auto t = m.text.encode(token_batch(train, r, tmax));
      auto v = m.image.encode(patch_batch(train, r));
      auto scale = m.logit_scale();
      auto l = loss::infonce(t, v, scale);
      loss::Stage2Terms<float> terms{l.t2v, l.v2t, {}, {}, {}};
      if (flags.use_kd) {
        auto tt = gather(T.text, dim, r), tv = gather(T.image, dim, r);
        terms.kd_kl = loss::kd_kl(student_logits(t, v, scale), const_logits(tt, tv, t_scale));
        terms.kd_align =
            ad::add(loss::intra_modal_distill(v, tv, scale), loss::intra_modal_distill(t, tt, scale));
      }
      if (flags.use_hn) {
        const auto ids = ids_of(train, r);
        auto hi = hard_negative_term(plan_it, v, t, ids, *text_index, scale);
        auto ht = hard_negative_term(plan_ti, t, v, ids, *image_index, scale);
        if (hi.defined() && ht.defined()) terms.hn = ad::add(hi, ht);
        else terms.hn = hi.defined() ? hi : ht;
      }
      return finish(terms);
    };
    j.validate = validator(m.image, m.text, &val, cfg);
    j.select_best = true;
    j.after_update = [&] { m.clamp_temperature(); };
    j.frozen = teacher_towers;
    run_phase(j, cfg, report);
    m.text.set_trainable(false);
    m.image.set_trainable(false);
  }
  for (auto& p : m.head.items()) p.tensor.set_requires_grad(false);
  m.step += report.steps.size();
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

Stage2Result train_baseline_intermodal(const enc::EncoderConfig& text_cfg, const enc::EncoderConfig& image_cfg,
                                       const data::Split& general, const data::Split& train, const data::Split& val,
                                       const TrainConfig& cfg_in) {
  TrainConfig cfg = cfg_in;
  cfg.flags = {false, false, false, false};
  cfg.allow_joint_unfreeze = true;
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  Stage2Result res;
  res.model = enc::DualEncoder(text_cfg, image_cfg, enc::Role::kStudent, cfg.seed);
  auto& m = res.model;
  auto& report = res.report;
  report.stage = "baseline";
  report.flags = cfg.flags;
  const std::size_t tmax = m.text.config().max_positions;

  auto joint_phase = [&](const std::string& name, const data::Split& split, std::size_t epochs, bool select) {
    PhasePlan p;
    p.name = name;
    p.params = param_refs(m.text, "text.");
    for (auto& r : param_refs(m.image, "image.")) p.params.push_back(r);
    for (auto& r : head_refs(m)) p.params.push_back(r);
    p.epochs = epochs;
    p.stream_sizes = {split.size()};
    p.loss = [&](const Rows& rows, std::uint64_t) {
      auto t = m.text.encode(token_batch(split, rows[0], tmax));
      auto v = m.image.encode(patch_batch(split, rows[0]));
      auto l = loss::infonce(t, v, m.logit_scale());
      LossOut out;
      out.total = ad::add(l.t2v, l.v2t);
      out.components = {{"t2v", l.t2v.item()}, {"v2t", l.v2t.item()}};
      return out;
    };
    if (select) {
      p.validate = validator(m.image, m.text, &val, cfg);
      p.select_best = true;
    }
    p.after_update = [&] { m.clamp_temperature(); };
    run_phase(p, cfg, report);
  };
  if (cfg.stage1_epochs > 0) joint_phase("baseline.general", general, cfg.stage1_epochs, false);
  joint_phase("baseline.indomain", train, cfg.stage2_epochs, true);
  m.text.set_trainable(false);
  m.image.set_trainable(false);
  for (auto& p : m.head.items()) p.tensor.set_requires_grad(false);
  m.step = report.steps.size();
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

// ---------------------------------------------------------------------------
// variants

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kFull: return "full";
    case Variant::kNoStage1: return "w/o stage-1";
    case Variant::kStage1Mse: return "stage-1_MSE";
    case Variant::kStage1InfoNCE: return "stage-1_InfoNCE";
    case Variant::kNoSF: return "w/o SF";
    case Variant::kNoKD: return "w/o KD";
    case Variant::kNoHN: return "w/o HN";
    case Variant::kNoKDHN: return "w/o KD+HN";
  }
  return "?";
}

TrainConfig variant_config(const TrainConfig& base, Variant v) {
  TrainConfig c = base;
  c.flags = {};
  c.stage1_loss = Stage1Loss::kIntraInfoNCE;
  switch (v) {
    case Variant::kFull: break;
    case Variant::kNoStage1: c.flags.use_stage1 = false; break;
    case Variant::kStage1Mse: c.stage1_loss = Stage1Loss::kMse; break;
    case Variant::kStage1InfoNCE:
      c.stage1_loss = Stage1Loss::kInterInfoNCE;
      c.allow_joint_unfreeze = true;
      break;
    case Variant::kNoSF:
      c.flags.use_sf = false;
      c.allow_joint_unfreeze = true;
      break;
    case Variant::kNoKD: c.flags.use_kd = false; break;
    case Variant::kNoHN: c.flags.use_hn = false; break;
    case Variant::kNoKDHN:
      c.flags.use_kd = false;
      c.flags.use_hn = false;
      break;
  }
  return c;
}

VariantRun run_variant(const Workbench& wb, const TrainConfig& base, Variant v, std::uint64_t seed, Stage2Scope scope) {
  if (!wb.general || !wb.train || !wb.val || !wb.test || !wb.teacher || !wb.teacher_ft)
    throw TrainError("workbench is incomplete");
  VariantRun run;
  run.variant = v;
  run.seed = seed;
  TrainConfig cfg = variant_config(base, v);
  cfg.seed = seed;
  enc::DualEncoder student(wb.student_text, wb.student_image, enc::Role::kStudent, seed);
  if (cfg.flags.use_stage1) run.stage1 = run_stage1(student, *wb.teacher, *wb.general, cfg, wb.general_cache);
  auto s2 = run_stage2_student(student, *wb.teacher_ft, *wb.train, *wb.val, cfg, scope, wb.train_cache);
  run.stage2 = std::move(s2.report);
  run.model = std::move(s2.model);
  run.test = eval::evaluate_retrieval(run.model.image, run.model.text, *wb.test, eval::kDefaultKs, cfg.eval_batch);
  run.test.image_model = to_string(v) + "/image";
  run.test.text_model = to_string(v) + "/text";
  return run;
}

AblationResult run_ablation_suite(const Workbench& wb, const TrainConfig& base, std::span<const std::uint64_t> seeds,
                                  const std::function<void(const VariantRun&)>& on_run) {
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  AblationResult res;
  for (auto v : kAllVariants) {
    eval::ResultRow row;
    row.name = to_string(v);
    for (auto seed : seeds) {
      auto run = run_variant(wb, base, v, seed, Stage2Scope::kImageOnly);
      row.per_seed.push_back(run.test.recall);
      if (on_run) on_run(run);
      run.model = {};
      res.runs.push_back(std::move(run));
    }
    res.rows.push_back(std::move(row));
  }
  const double full = res.rows.front().mean(1);
  for (auto& row : res.rows)
    if ((row.name == to_string(Variant::kNoKD) || row.name == to_string(Variant::kNoHN)) && row.mean(1) > full)
      row.note = "expected <= full; observed above";
  return res;
}

}  // namespace motis::train
