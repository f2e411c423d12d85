// Training objectives for dual-encoder compression.
//
// All contrastive terms take a scalar `logit_scale` tensor equal to 1/τ, so
// the temperature can be learned; the double overloads wrap a constant.
#pragma once

#include <cstddef>
#include <stdexcept>

#include "motis/autodiff.hpp"

namespace motis::loss {

class EmptyBatchError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Inputs violated the unit-norm contract (row norm off by more than 1e-3).
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr double kUnitNormTolerance = 1e-3;

template <class T>
struct SymmetricLoss {
  ad::BasicTensor<T> t2v;
  ad::BasicTensor<T> v2t;
};

// Symmetric InfoNCE over a batch of matched (text_i, image_i) pairs.
template <class T>
SymmetricLoss<T> infonce(const ad::BasicTensor<T>& text, const ad::BasicTensor<T>& image,
                         const ad::BasicTensor<T>& logit_scale);
template <class T>
SymmetricLoss<T> infonce(const ad::BasicTensor<T>& text, const ad::BasicTensor<T>& image, double tau);

// Contrastive distillation inside one modality: student row i must pick the
// teacher row of the same sample among all teacher rows of the batch. The
// teacher side is detached.
template <class T>
ad::BasicTensor<T> intra_modal_distill(const ad::BasicTensor<T>& student, const ad::BasicTensor<T>& teacher,
                                       const ad::BasicTensor<T>& logit_scale);
template <class T>
ad::BasicTensor<T> intra_modal_distill(const ad::BasicTensor<T>& student, const ad::BasicTensor<T>& teacher,
                                       double tau);

// Mean squared error between student and (detached) teacher embeddings.
template <class T>
ad::BasicTensor<T> mse_distill(const ad::BasicTensor<T>& student, const ad::BasicTensor<T>& teacher);

// KL(teacher ‖ student) of the row-wise matching distributions, averaged
// over rows, computed for the text→image matrix and its transpose and then
// averaged over the two directions. Teacher logits are detached.
template <class T>
ad::BasicTensor<T> kd_kl(const ad::BasicTensor<T>& student_logits, const ad::BasicTensor<T>& teacher_logits);

template <class T>
struct HardNegativeLoss {
  ad::BasicTensor<T> value;
  bool degenerate = false;  // k == 0: nothing to contrast against
};

// InfoNCE over {positive} ∪ {k mined negatives} per query, no in-batch terms.
// negatives: [N·k × d], rows i·k .. i·k+k-1 belong to query i. Negatives are
// treated as constants.
template <class T>
HardNegativeLoss<T> hn_infonce(const ad::BasicTensor<T>& query, const ad::BasicTensor<T>& positive,
                               const ad::BasicTensor<T>& negatives, std::size_t k,
                               const ad::BasicTensor<T>& logit_scale);
template <class T>
HardNegativeLoss<T> hn_infonce(const ad::BasicTensor<T>& query, const ad::BasicTensor<T>& positive,
                               const ad::BasicTensor<T>& negatives, std::size_t k, double tau);

struct LossWeights {
  double t2v = 1.0;
  double v2t = 1.0;
  double kd = 1.0;
  double hn = 1.0;
};

// Per-component values of one step of the stage-2 objective.
struct LossBundle {
  double l_t2v = 0;
  double l_v2t = 0;
  double l_kd = 0;  // l_kd_kl + l_kd_align
  double l_kd_kl = 0;
  double l_kd_align = 0;
  double l_hn = 0;
  double total = 0;
};

// Undefined tensors mean "term disabled".
template <class T>
struct Stage2Terms {
  ad::BasicTensor<T> t2v;
  ad::BasicTensor<T> v2t;
  ad::BasicTensor<T> kd_kl;
  ad::BasicTensor<T> kd_align;
  ad::BasicTensor<T> hn;
};

template <class T>
struct Stage2Objective {
  ad::BasicTensor<T> total;  // differentiable sum
  LossBundle bundle;
};

// L = L_t2v + L_v2t + L_KD + L_HN. With default weights bundle.total is the
// exact double sum of the reported components.
template <class T>
Stage2Objective<T> stage2_total(const Stage2Terms<T>& terms, const LossWeights& w = {});

}  // namespace motis::loss
