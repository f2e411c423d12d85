#include "motis/losses.hpp"

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

namespace motis::loss {

namespace {

template <class T>
void check_unit_rows(const ad::BasicTensor<T>& x, const char* what) {
  if (x.dim() != 2) throw ad::DimensionError(std::string(what) + ": expected [N×d], got " + ad::shape_str(x.shape()));
  if (x.rows() == 0) throw EmptyBatchError(std::string(what) + ": empty batch");
  const std::size_t d = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double ss = 0;
    for (std::size_t c = 0; c < d; ++c) ss += double(x.data()[r * d + c]) * x.data()[r * d + c];
    if (std::abs(std::sqrt(ss) - 1.0) > kUnitNormTolerance)
      throw ContractError(std::string(what) + ": row " + std::to_string(r) + " has norm " + std::to_string(std::sqrt(ss)) +
                          ", expected unit norm");
  }
}

template <class T>
void check_pair(const ad::BasicTensor<T>& a, const ad::BasicTensor<T>& b, const char* what) {
  check_unit_rows(a, what);
  check_unit_rows(b, what);
  if (a.shape() != b.shape())
    throw ad::DimensionError(std::string(what) + ": shape mismatch " + ad::shape_str(a.shape()) + " vs " +
                             ad::shape_str(b.shape()));
}

template <class T>
ad::BasicTensor<T> constant_scale(double tau) {
  return ad::BasicTensor<T>::scalar(static_cast<T>(1.0 / tau));
}

// −mean_i log_softmax(logits)[i, target_i]
template <class T>
ad::BasicTensor<T> nll_of(const ad::BasicTensor<T>& logits, const std::vector<std::size_t>& target) {
  auto picked = ad::pick_per_row<T>(ad::log_softmax_rows(logits), target);
  return ad::scale(ad::mean(picked), T(-1));
}

std::vector<std::size_t> diagonal(std::size_t n) {
  std::vector<std::size_t> d(n);
  std::iota(d.begin(), d.end(), std::size_t{0});
  return d;
}

// Row-wise KL(p_teacher ‖ p_student) averaged over rows.
template <class T>
ad::BasicTensor<T> kl_rows(const ad::BasicTensor<T>& student_logits, const ad::BasicTensor<T>& teacher_logits) {
  const auto log_t = ad::log_softmax_rows(teacher_logits.detach());
  std::vector<T> p(log_t.numel());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::exp(log_t.data()[i]);
  auto p_t = ad::BasicTensor<T>::from(log_t.shape(), std::move(p));
  auto log_s = ad::log_softmax_rows(student_logits);
  auto per_elem = ad::mul(p_t, ad::sub(log_t, log_s));
  return ad::scale(ad::sum(per_elem), T(1) / static_cast<T>(student_logits.rows()));
}

}  // namespace

template <class T>
SymmetricLoss<T> infonce(const ad::BasicTensor<T>& text, const ad::BasicTensor<T>& image,
                         const ad::BasicTensor<T>& logit_scale) {
  check_pair(text, image, "infonce");
  const auto target = diagonal(text.rows());
  auto logits = ad::scale_by(ad::matmul_nt(text, image), logit_scale);
  return {nll_of(logits, target), nll_of(ad::transpose(logits), target)};
}

template <class T>
SymmetricLoss<T> infonce(const ad::BasicTensor<T>& text, const ad::BasicTensor<T>& image, double tau) {
  return infonce(text, image, constant_scale<T>(tau));
}

template <class T>
ad::BasicTensor<T> intra_modal_distill(const ad::BasicTensor<T>& student, const ad::BasicTensor<T>& teacher,
                                       const ad::BasicTensor<T>& logit_scale) {
  check_pair(student, teacher, "intra_modal_distill");
  auto logits = ad::scale_by(ad::matmul_nt(student, teacher.detach()), logit_scale);
  return nll_of(logits, diagonal(student.rows()));
}

template <class T>
ad::BasicTensor<T> intra_modal_distill(const ad::BasicTensor<T>& student, const ad::BasicTensor<T>& teacher,
                                       double tau) {
  return intra_modal_distill(student, teacher, constant_scale<T>(tau));
}

template <class T>
ad::BasicTensor<T> mse_distill(const ad::BasicTensor<T>& student, const ad::BasicTensor<T>& teacher) {
  if (student.shape() != teacher.shape())
    throw ad::DimensionError("mse_distill: shape mismatch " + ad::shape_str(student.shape()) + " vs " +
                             ad::shape_str(teacher.shape()));
  if (student.rows() == 0) throw EmptyBatchError("mse_distill: empty batch");
  return ad::mean(ad::square(ad::sub(student, teacher.detach())));
}

template <class T>
ad::BasicTensor<T> kd_kl(const ad::BasicTensor<T>& student_logits, const ad::BasicTensor<T>& teacher_logits) {
  if (student_logits.dim() != 2 || student_logits.shape() != teacher_logits.shape() ||
      student_logits.rows() != student_logits.cols())
    throw ad::DimensionError("kd_kl: expected two equal square logit matrices, got " +
                             ad::shape_str(student_logits.shape()) + " and " + ad::shape_str(teacher_logits.shape()));
  auto t2v = kl_rows(student_logits, teacher_logits);
  auto v2t = kl_rows(ad::transpose(student_logits), ad::transpose(teacher_logits.detach()));
  return ad::scale(ad::add(t2v, v2t), T(0.5));
}

template <class T>
HardNegativeLoss<T> hn_infonce(const ad::BasicTensor<T>& query, const ad::BasicTensor<T>& positive,
                               const ad::BasicTensor<T>& negatives, std::size_t k,
                               const ad::BasicTensor<T>& logit_scale) {
  check_pair(query, positive, "hn_infonce");
  if (k == 0) return {ad::BasicTensor<T>::scalar(T(0)), true};
  const std::size_t n = query.rows();
  check_unit_rows(negatives, "hn_infonce negatives");
  if (negatives.rows() != n * k || negatives.cols() != query.cols())
    throw ad::DimensionError("hn_infonce: negatives " + ad::shape_str(negatives.shape()) + " do not hold " +
                             std::to_string(k) + " rows per query of " + ad::shape_str(query.shape()));

  // Column layout of `all`: [positives (n) | negatives (n·k)].
  auto candidates = ad::concat_rows<T>({positive, negatives.detach()});
  auto sims = ad::matmul_nt(query, candidates);
  std::vector<std::size_t> idx;
  idx.reserve(n * (k + 1));
  for (std::size_t i = 0; i < n; ++i) {
    idx.push_back(i);
    for (std::size_t j = 0; j < k; ++j) idx.push_back(n + i * k + j);
  }
  auto logits = ad::scale_by(ad::gather_per_row<T>(sims, idx, k + 1), logit_scale);
  return {nll_of(logits, std::vector<std::size_t>(n, 0)), false};
}

template <class T>
HardNegativeLoss<T> hn_infonce(const ad::BasicTensor<T>& query, const ad::BasicTensor<T>& positive,
                               const ad::BasicTensor<T>& negatives, std::size_t k, double tau) {
  return hn_infonce(query, positive, negatives, k, constant_scale<T>(tau));
}

template <class T>
Stage2Objective<T> stage2_total(const Stage2Terms<T>& terms, const LossWeights& w) {
  Stage2Objective<T> out;
  auto value = [](const ad::BasicTensor<T>& t) { return t.defined() ? static_cast<double>(t.item()) : 0.0; };
  auto& b = out.bundle;
  b.l_t2v = value(terms.t2v);
  b.l_v2t = value(terms.v2t);
  b.l_kd_kl = value(terms.kd_kl);
  b.l_kd_align = value(terms.kd_align);
  b.l_kd = b.l_kd_kl + b.l_kd_align;
  b.l_hn = value(terms.hn);
  b.total = w.t2v * b.l_t2v + w.v2t * b.l_v2t + w.kd * b.l_kd + w.hn * b.l_hn;

  ad::BasicTensor<T> acc;
  auto accumulate = [&](const ad::BasicTensor<T>& t, double weight) {
    if (!t.defined()) return;
    auto term = weight == 1.0 ? t : ad::scale(t, static_cast<T>(weight));
    acc = acc.defined() ? ad::add(acc, term) : term;
  };
  accumulate(terms.t2v, w.t2v);
  accumulate(terms.v2t, w.v2t);
  accumulate(terms.kd_kl, w.kd);
  accumulate(terms.kd_align, w.kd);
  accumulate(terms.hn, w.hn);
  out.total = acc.defined() ? acc : ad::BasicTensor<T>::scalar(T(0));
  return out;
}

#define MOTIS_LOSS_INSTANTIATE(T)                                                                                  \
  template SymmetricLoss<T> infonce<T>(const ad::BasicTensor<T>&, const ad::BasicTensor<T>&,                       \
                                       const ad::BasicTensor<T>&);                                                 \
  template SymmetricLoss<T> infonce<T>(const ad::BasicTensor<T>&, const ad::BasicTensor<T>&, double);              \
  template ad::BasicTensor<T> intra_modal_distill<T>(const ad::BasicTensor<T>&, const ad::BasicTensor<T>&,         \
                                                     const ad::BasicTensor<T>&);                                   \
  template ad::BasicTensor<T> intra_modal_distill<T>(const ad::BasicTensor<T>&, const ad::BasicTensor<T>&, double); \
  template ad::BasicTensor<T> mse_distill<T>(const ad::BasicTensor<T>&, const ad::BasicTensor<T>&);                \
  template ad::BasicTensor<T> kd_kl<T>(const ad::BasicTensor<T>&, const ad::BasicTensor<T>&);                      \
  template HardNegativeLoss<T> hn_infonce<T>(const ad::BasicTensor<T>&, const ad::BasicTensor<T>&,                 \
                                             const ad::BasicTensor<T>&, std::size_t, const ad::BasicTensor<T>&);   \
  template HardNegativeLoss<T> hn_infonce<T>(const ad::BasicTensor<T>&, const ad::BasicTensor<T>&,                 \
                                             const ad::BasicTensor<T>&, std::size_t, double);                      \
  template Stage2Objective<T> stage2_total<T>(const Stage2Terms<T>&, const LossWeights&);

MOTIS_LOSS_INSTANTIATE(float)
MOTIS_LOSS_INSTANTIATE(double)

#undef MOTIS_LOSS_INSTANTIATE

}  // namespace motis::loss
