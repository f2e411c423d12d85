// Minimal define-by-run reverse-mode automatic differentiation over dense
// row-major tensors. Only the operations needed by the encoders and the
// training objectives are provided.
//
// Every op records a node that remembers its inputs and a closure that
// propagates the output gradient back into them. Nodes carry a global
// sequence number, so backward() can replay them in exact reverse order of
// recording. Graphs are single use: a second backward() over the same
// nodes throws.
//
// Two precisions are instantiated: float (training and serving) and double
// (finite-difference gradient checks).
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace motis::ad {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DegenerateInputError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;
  std::uint64_t seq = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::size_t numel() const { return value.size(); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

// Handle to a graph node. Copies share the node.
template <class T>
class BasicTensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<Node<T>>;

  BasicTensor() = default;
  explicit BasicTensor(NodePtr node) : node_(std::move(node)) {}

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor filled(Shape shape, T v, bool requires_grad = false);
  static BasicTensor from(Shape shape, std::vector<T> data, bool requires_grad = false);
  static BasicTensor scalar(T v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t rows() const;
  std::size_t cols() const;
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  // Leaves only. Used by initializers and optimizers between graphs.
  std::span<T> mutable_data();

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on);
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad();
  void zero_grad() { node_->grad.clear(); }

  T item() const;
  T at(std::size_t i) const { return node_->value.at(i); }
  T at(std::size_t r, std::size_t c) const { return node_->value.at(r * cols() + c); }

  // Fresh leaf holding a copy of the values, cut from any graph.
  BasicTensor detach() const;
  bool is_leaf() const { return node_->leaf; }
  const char* op_name() const { return node_->op; }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

// While alive on a thread, ops on that thread record no graph (inference).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Reverse pass from a scalar root. Populates grad on every reachable node
// that requires grad and releases the recorded closures.
template <class T>
void backward(const BasicTensor<T>& root);

// Order in which backward() would visit the graph below root. Exposed for
// tests of the replay order.
template <class T>
std::vector<const Node<T>*> topological_replay_order(const BasicTensor<T>& root);

// ---- matrix ops (2-D, row-major) ----

template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
// a · bᵀ
template <class T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T>
BasicTensor<T> transpose(const BasicTensor<T>& a);

// ---- elementwise ----

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
// x[n×d] + b[d]
template <class T>
BasicTensor<T> add_row_vector(const BasicTensor<T>& x, const BasicTensor<T>& b);
template <class T>
BasicTensor<T> scale(const BasicTensor<T>& x, T c);
// x · s for a scalar tensor s (gradient flows into both)
template <class T>
BasicTensor<T> scale_by(const BasicTensor<T>& x, const BasicTensor<T>& s);
template <class T>
BasicTensor<T> exp(const BasicTensor<T>& x);
template <class T>
BasicTensor<T> square(const BasicTensor<T>& x);
// GELU, tanh approximation:
//   0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))
template <class T>
BasicTensor<T> gelu(const BasicTensor<T>& x);

// ---- reductions / reshaping ----

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x);
template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x);
// [n×d] -> [1×d]
template <class T>
BasicTensor<T> mean_rows(const BasicTensor<T>& x);
// x is [(batch·seq)×d]; mask is batch×seq with 1 for real positions.
// Returns [batch×d], each row the mean over that sample's unmasked rows.
template <class T>
BasicTensor<T> masked_mean_pool(const BasicTensor<T>& x, std::size_t batch, std::size_t seq,
                                std::span<const std::uint8_t> mask);
template <class T>
BasicTensor<T> concat_rows(const std::vector<BasicTensor<T>>& parts);
template <class T>
BasicTensor<T> gather_rows(const BasicTensor<T>& x, std::span<const std::size_t> rows);
template <class T>
BasicTensor<T> embedding_lookup(const BasicTensor<T>& table, std::span<const std::uint32_t> ids);
// Picks x[i, cols[i]] for every row -> [n]
template <class T>
BasicTensor<T> pick_per_row(const BasicTensor<T>& x, std::span<const std::size_t> cols);
// out[r, j] = x[r, idx[r·per_row + j]] -> [n×per_row]
template <class T>
BasicTensor<T> gather_per_row(const BasicTensor<T>& x, std::span<const std::size_t> idx, std::size_t per_row);
// Adds row r of a [seq×d] table to each of the batch·seq rows of x
// (row i receives table row i mod seq).
template <class T>
BasicTensor<T> add_positional(const BasicTensor<T>& x, const BasicTensor<T>& table, std::size_t seq);
// Inserts one learned row (cls [1×d]) before every group of `seq` rows.
template <class T>
BasicTensor<T> prepend_token(const BasicTensor<T>& x, const BasicTensor<T>& cls, std::size_t batch,
                             std::size_t seq);

// ---- normalization / softmax ----

inline constexpr double kNormEpsilon = 1e-12;
inline constexpr double kLayerNormEpsilon = 1e-5;

template <class T>
BasicTensor<T> l2_normalize_rows(const BasicTensor<T>& x);
template <class T>
BasicTensor<T> log_softmax_rows(const BasicTensor<T>& logits);
template <class T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain,
                          const BasicTensor<T>& bias);

// Multi-head scaled dot-product self-attention.
// qkv: [(batch·seq) × 3h] laid out as [Q | K | V]; heads split h evenly.
// key_mask: batch×seq (1 = attend), may be empty for no masking.
// Returns [(batch·seq) × h].
template <class T>
BasicTensor<T> self_attention(const BasicTensor<T>& qkv, std::size_t batch, std::size_t seq,
                              std::size_t heads, std::span<const std::uint8_t> key_mask);

}  // namespace motis::ad
