#include "motis/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace motis::ad {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

namespace {

std::atomic<std::uint64_t> g_next_seq{1};
thread_local bool t_grad_enabled = true;

template <class T>
using NodePtr = std::shared_ptr<Node<T>>;

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using CMap = Eigen::Map<const RowMat<T>>;
template <class T>
using MMap = Eigen::Map<RowMat<T>>;
template <class T>
using CStrided = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using MStrided = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;

std::size_t product(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

template <class T>
BasicTensor<T> make_op(Shape shape, std::vector<T> value, const char* op,
                       std::vector<NodePtr<T>> inputs, std::function<void(Node<T>&)> bw) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  n->leaf = false;
  n->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
  const bool rg = t_grad_enabled && std::any_of(inputs.begin(), inputs.end(),
                              [](const NodePtr<T>& p) { return p->requires_grad; });
  if (rg) {
    n->requires_grad = true;
    n->inputs = std::move(inputs);
    n->backward = std::move(bw);
  }
  return BasicTensor<T>(std::move(n));
}

// out[m×n] = a[m×k] · rhs. The GEMM kernel treats a trailing partial block of
// rows differently, so a row's result would depend on its position in the
// batch. Padding m to a whole block keeps every row bit-identical to what it
// would be on its own.
constexpr std::size_t kRowBlock = 8;

template <class T, class Rhs>
void row_stable_product(const T* a, std::size_t m, std::size_t k, const Rhs& rhs, T* out) {
  const std::size_t n = static_cast<std::size_t>(rhs.cols());
  if (m % kRowBlock == 0) {
    MMap<T>(out, m, n).noalias() = CMap<T>(a, m, k) * rhs;
    return;
  }
  const std::size_t mp = (m / kRowBlock + 1) * kRowBlock;
  RowMat<T> ap = RowMat<T>::Zero(mp, k);
  ap.topRows(m) = CMap<T>(a, m, k);
  RowMat<T> cp(mp, n);
  cp.noalias() = ap * rhs;
  MMap<T>(out, m, n) = cp.topRows(m);
}

// Gradient buffer of an input, or nullptr when it does not need one.
template <class T>
T* grad_of(const NodePtr<T>& n) {
  if (!n->requires_grad) return nullptr;
  n->ensure_grad();
  return n->grad.data();
}

template <class T>
void require_2d(const BasicTensor<T>& t, const char* op) {
  if (t.dim() != 2)
    throw DimensionError(std::string(op) + ": expected a 2-D tensor, got " + shape_str(t.shape()));
}

template <class T>
void require_same(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

// ---------------------------------------------------------------------------
// BasicTensor

template <class T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  return filled(std::move(shape), T(0), requires_grad);
}

template <class T>
BasicTensor<T> BasicTensor<T>::filled(Shape shape, T v, bool requires_grad) {
  const std::size_t n = product(shape);
  return from(std::move(shape), std::vector<T>(n, v), requires_grad);
}

template <class T>
BasicTensor<T> BasicTensor<T>::from(Shape shape, std::vector<T> data, bool requires_grad) {
  for (auto d : shape)
    if (d == 0) throw DimensionError("tensor shape must be positive, got " + shape_str(shape));
  if (product(shape) != data.size())
    throw DimensionError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  n->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
  return BasicTensor(std::move(n));
}

template <class T>
BasicTensor<T> BasicTensor<T>::scalar(T v, bool requires_grad) {
  return from({1}, {v}, requires_grad);
}

template <class T>
std::size_t BasicTensor<T>::rows() const {
  return node_->shape.empty() ? 1 : node_->shape[0];
}

template <class T>
std::size_t BasicTensor<T>::cols() const {
  if (node_->shape.size() < 2) return node_->shape.empty() ? 1 : node_->shape[0];
  return node_->value.size() / node_->shape[0];
}

template <class T>
std::span<T> BasicTensor<T>::mutable_data() {
  if (!node_->leaf) throw UsageError("mutable_data() is only available on leaf tensors");
  return node_->value;
}

template <class T>
void BasicTensor<T>::set_requires_grad(bool on) {
  if (!node_->leaf) throw UsageError("requires_grad can only be changed on leaf tensors");
  node_->requires_grad = on;
  if (!on) node_->grad.clear();
}

template <class T>
std::span<T> BasicTensor<T>::mutable_grad() {
  node_->ensure_grad();
  return node_->grad;
}

template <class T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

template <class T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return from(node_->shape, node_->value, false);
}

// ---------------------------------------------------------------------------
// backward

template <class T>
static std::vector<NodePtr<T>> collect(const NodePtr<T>& root) {
  std::vector<NodePtr<T>> out;
  std::unordered_set<const Node<T>*> seen;
  std::vector<NodePtr<T>> stack{root};
  while (!stack.empty()) {
    auto n = std::move(stack.back());
    stack.pop_back();
    if (!n->requires_grad || !seen.insert(n.get()).second) continue;
    for (const auto& in : n->inputs) stack.push_back(in);
    out.push_back(std::move(n));
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a->seq > b->seq; });
  return out;
}

template <class T>
std::vector<const Node<T>*> topological_replay_order(const BasicTensor<T>& root) {
  std::vector<const Node<T>*> out;
  for (const auto& n : collect(root.node())) out.push_back(n.get());
  return out;
}

template <class T>
void backward(const BasicTensor<T>& root) {
  if (!root.defined()) throw UsageError("backward: undefined root");
  if (root.numel() != 1)
    throw UsageError("backward: root must be a scalar, got shape " + shape_str(root.shape()));
  if (!root.requires_grad()) throw UsageError("backward: root does not require grad");
  const auto& rnode = root.node();
  if (!rnode->leaf && rnode->consumed)
    throw UsageError("backward: graph already consumed; run a new forward pass first");

  auto order = collect(rnode);
  rnode->ensure_grad();
  rnode->grad[0] = T(1);
  for (auto& n : order) {
    n->ensure_grad();
    if (n->leaf) continue;
    if (n->backward) n->backward(*n);
    n->consumed = true;
    n->backward = nullptr;
    n->inputs.clear();
  }
}

// ---------------------------------------------------------------------------
// matrix ops

template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k)
    throw DimensionError("matmul: inner dimensions differ: " + shape_str(a.shape()) + " · " +
                         shape_str(b.shape()));
  std::vector<T> out(m * n);
  row_stable_product(a.data().data(), m, k, CMap<T>(b.data().data(), k, n), out.data());
  return make_op<T>({m, n}, std::move(out), "matmul", {a.node(), b.node()}, [m, k, n](Node<T>& o) {
    const auto& A = o.inputs[0];
    const auto& B = o.inputs[1];
    CMap<T> dc(o.grad.data(), m, n);
    if (T* ga = grad_of(A))
      MMap<T>(ga, m, k).noalias() += dc * CMap<T>(B->value.data(), k, n).transpose();
    if (T* gb = grad_of(B))
      MMap<T>(gb, k, n).noalias() += CMap<T>(A->value.data(), m, k).transpose() * dc;
  });
}

template <class T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_2d(a, "matmul_nt");
  require_2d(b, "matmul_nt");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  if (b.shape()[1] != k)
    throw DimensionError("matmul_nt: inner dimensions differ: " + shape_str(a.shape()) + " · " +
                         shape_str(b.shape()) + "ᵀ");
  std::vector<T> out(m * n);
  row_stable_product(a.data().data(), m, k, CMap<T>(b.data().data(), n, k).transpose(), out.data());
  return make_op<T>({m, n}, std::move(out), "matmul_nt", {a.node(), b.node()}, [m, k, n](Node<T>& o) {
    const auto& A = o.inputs[0];
    const auto& B = o.inputs[1];
    CMap<T> dc(o.grad.data(), m, n);
    if (T* ga = grad_of(A)) MMap<T>(ga, m, k).noalias() += dc * CMap<T>(B->value.data(), n, k);
    if (T* gb = grad_of(B))
      MMap<T>(gb, n, k).noalias() += dc.transpose() * CMap<T>(A->value.data(), m, k);
  });
}

template <class T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  require_2d(a, "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<T> out(m * n);
  MMap<T>(out.data(), n, m) = CMap<T>(a.data().data(), m, n).transpose();
  return make_op<T>({n, m}, std::move(out), "transpose", {a.node()}, [m, n](Node<T>& o) {
    if (T* g = grad_of(o.inputs[0]))
      MMap<T>(g, m, n) += CMap<T>(o.grad.data(), n, m).transpose();
  });
}

// ---------------------------------------------------------------------------
// elementwise

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_op<T>(a.shape(), std::move(out), "add", {a.node(), b.node()}, [](Node<T>& o) {
    for (const auto& in : o.inputs)
      if (T* g = grad_of(in))
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
  });
}

template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_op<T>(a.shape(), std::move(out), "sub", {a.node(), b.node()}, [](Node<T>& o) {
    if (T* g = grad_of(o.inputs[0]))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    if (T* g = grad_of(o.inputs[1]))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] -= o.grad[i];
  });
}

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_op<T>(a.shape(), std::move(out), "mul", {a.node(), b.node()}, [](Node<T>& o) {
    const auto& A = o.inputs[0];
    const auto& B = o.inputs[1];
    if (T* g = grad_of(A))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * B->value[i];
    if (T* g = grad_of(B))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * A->value[i];
  });
}

template <class T>
BasicTensor<T> add_row_vector(const BasicTensor<T>& x, const BasicTensor<T>& b) {
  require_2d(x, "add_row_vector");
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  if (b.numel() != d)
    throw DimensionError("add_row_vector: bias " + shape_str(b.shape()) + " does not fit rows of " +
                         shape_str(x.shape()));
  std::vector<T> out(x.data().begin(), x.data().end());
  const auto bv = b.data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] += bv[c];
  return make_op<T>(x.shape(), std::move(out), "add_row_vector", {x.node(), b.node()},
                    [n, d](Node<T>& o) {
                      if (T* g = grad_of(o.inputs[0]))
                        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
                      if (T* g = grad_of(o.inputs[1]))
                        for (std::size_t r = 0; r < n; ++r)
                          for (std::size_t c = 0; c < d; ++c) g[c] += o.grad[r * d + c];
                    });
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& x, T c) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * c;
  return make_op<T>(x.shape(), std::move(out), "scale", {x.node()}, [c](Node<T>& o) {
    if (T* g = grad_of(o.inputs[0]))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * c;
  });
}

template <class T>
BasicTensor<T> scale_by(const BasicTensor<T>& x, const BasicTensor<T>& s) {
  if (s.numel() != 1) throw DimensionError("scale_by: factor must be scalar, got " + shape_str(s.shape()));
  const T c = s.data()[0];
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * c;
  return make_op<T>(x.shape(), std::move(out), "scale_by", {x.node(), s.node()}, [](Node<T>& o) {
    const auto& X = o.inputs[0];
    const auto& S = o.inputs[1];
    if (T* g = grad_of(X))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * S->value[0];
    if (T* g = grad_of(S)) {
      T acc = 0;
      for (std::size_t i = 0; i < o.grad.size(); ++i) acc += o.grad[i] * X->value[i];
      g[0] += acc;
    }
  });
}

template <class T>
BasicTensor<T> exp(const BasicTensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x.data()[i]);
  auto y = out;
  return make_op<T>(x.shape(), std::move(out), "exp", {x.node()}, [y = std::move(y)](Node<T>& o) {
    if (T* g = grad_of(o.inputs[0]))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * y[i];
  });
}

template <class T>
BasicTensor<T> square(const BasicTensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * x.data()[i];
  return make_op<T>(x.shape(), std::move(out), "square", {x.node()}, [](Node<T>& o) {
    const auto& X = o.inputs[0];
    if (T* g = grad_of(X))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += T(2) * X->value[i] * o.grad[i];
  });
}

template <class T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  constexpr T k = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T a = T(0.044715);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x.data()[i];
    out[i] = T(0.5) * v * (T(1) + std::tanh(k * (v + a * v * v * v)));
  }
  return make_op<T>(x.shape(), std::move(out), "gelu", {x.node()}, [](Node<T>& o) {
    const auto& X = o.inputs[0];
    if (T* g = grad_of(X))
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        const T v = X->value[i];
        const T t = std::tanh(k * (v + a * v * v * v));
        const T dydv = T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * k * (T(1) + T(3) * a * v * v);
        g[i] += o.grad[i] * dydv;
      }
  });
}

// ---------------------------------------------------------------------------
// reductions / reshaping

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  return make_op<T>({1}, {acc}, "sum", {x.node()}, [](Node<T>& o) {
    if (T* g = grad_of(o.inputs[0]))
      for (std::size_t i = 0; i < o.inputs[0]->numel(); ++i) g[i] += o.grad[0];
  });
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  const T n = static_cast<T>(x.numel());
  T acc = 0;
  for (T v : x.data()) acc += v;
  return make_op<T>({1}, {acc / n}, "mean", {x.node()}, [n](Node<T>& o) {
    if (T* g = grad_of(o.inputs[0]))
      for (std::size_t i = 0; i < o.inputs[0]->numel(); ++i) g[i] += o.grad[0] / n;
  });
}

template <class T>
BasicTensor<T> mean_rows(const BasicTensor<T>& x) {
  require_2d(x, "mean_rows");
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  std::vector<T> out(d, T(0));
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[c] += x.data()[r * d + c];
  for (auto& v : out) v /= static_cast<T>(n);
  return make_op<T>({1, d}, std::move(out), "mean_rows", {x.node()}, [n, d](Node<T>& o) {
    if (T* g = grad_of(o.inputs[0]))
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) g[r * d + c] += o.grad[c] / static_cast<T>(n);
  });
}

template <class T>
BasicTensor<T> masked_mean_pool(const BasicTensor<T>& x, std::size_t batch, std::size_t seq,
                                std::span<const std::uint8_t> mask) {
  require_2d(x, "masked_mean_pool");
  if (x.shape()[0] != batch * seq || mask.size() != batch * seq)
    throw DimensionError("masked_mean_pool: " + shape_str(x.shape()) + " does not match batch " +
                         std::to_string(batch) + " x seq " + std::to_string(seq));
  const std::size_t d = x.shape()[1];
  std::vector<T> inv_count(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t cnt = 0;
    for (std::size_t s = 0; s < seq; ++s) cnt += mask[b * seq + s] ? 1 : 0;
    if (cnt == 0) throw DegenerateInputError("masked_mean_pool: sample " + std::to_string(b) + " is all padding");
    inv_count[b] = T(1) / static_cast<T>(cnt);
  }
  std::vector<T> out(batch * d, T(0));
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t s = 0; s < seq; ++s) {
      if (!mask[b * seq + s]) continue;
      const T* row = x.data().data() + (b * seq + s) * d;
      for (std::size_t c = 0; c < d; ++c) out[b * d + c] += row[c];
    }
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < d; ++c) out[b * d + c] *= inv_count[b];
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  return make_op<T>({batch, d}, std::move(out), "masked_mean_pool", {x.node()},
                    [batch, seq, d, m = std::move(m), inv_count = std::move(inv_count)](Node<T>& o) {
                      T* g = grad_of(o.inputs[0]);
                      if (!g) return;
                      for (std::size_t b = 0; b < batch; ++b)
                        for (std::size_t s = 0; s < seq; ++s) {
                          if (!m[b * seq + s]) continue;
                          T* gr = g + (b * seq + s) * d;
                          for (std::size_t c = 0; c < d; ++c) gr[c] += o.grad[b * d + c] * inv_count[b];
                        }
                    });
}

template <class T>
BasicTensor<T> concat_rows(const std::vector<BasicTensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t d = parts[0].cols();
  std::size_t n = 0;
  std::vector<NodePtr<T>> inputs;
  for (const auto& p : parts) {
    require_2d(p, "concat_rows");
    if (p.cols() != d)
      throw DimensionError("concat_rows: column mismatch " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    n += p.rows();
    inputs.push_back(p.node());
  }
  std::vector<T> out;
  out.reserve(n * d);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return make_op<T>({n, d}, std::move(out), "concat_rows", std::move(inputs), [](Node<T>& o) {
    std::size_t off = 0;
    for (const auto& in : o.inputs) {
      if (T* g = grad_of(in))
        for (std::size_t i = 0; i < in->numel(); ++i) g[i] += o.grad[off + i];
      off += in->numel();
    }
  });
}

template <class T>
BasicTensor<T> gather_rows(const BasicTensor<T>& x, std::span<const std::size_t> rows) {
  require_2d(x, "gather_rows");
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  std::vector<T> out(rows.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) throw DimensionError("gather_rows: row " + std::to_string(rows[i]) + " out of " + shape_str(x.shape()));
    std::copy_n(x.data().data() + rows[i] * d, d, out.data() + i * d);
  }
  std::vector<std::size_t> r(rows.begin(), rows.end());
  return make_op<T>({rows.size(), d}, std::move(out), "gather_rows", {x.node()},
                    [d, r = std::move(r)](Node<T>& o) {
                      if (T* g = grad_of(o.inputs[0]))
                        for (std::size_t i = 0; i < r.size(); ++i)
                          for (std::size_t c = 0; c < d; ++c) g[r[i] * d + c] += o.grad[i * d + c];
                    });
}

template <class T>
BasicTensor<T> embedding_lookup(const BasicTensor<T>& table, std::span<const std::uint32_t> ids) {
  require_2d(table, "embedding_lookup");
  const std::size_t v = table.shape()[0], d = table.shape()[1];
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= v)
      throw std::out_of_range("embedding_lookup: id " + std::to_string(ids[i]) + " >= vocabulary " +
                              std::to_string(v));
    std::copy_n(table.data().data() + ids[i] * d, d, out.data() + i * d);
  }
  std::vector<std::uint32_t> idv(ids.begin(), ids.end());
  return make_op<T>({ids.size(), d}, std::move(out), "embedding_lookup", {table.node()},
                    [d, idv = std::move(idv)](Node<T>& o) {
                      if (T* g = grad_of(o.inputs[0]))
                        for (std::size_t i = 0; i < idv.size(); ++i)
                          for (std::size_t c = 0; c < d; ++c) g[idv[i] * d + c] += o.grad[i * d + c];
                    });
}

template <class T>
BasicTensor<T> pick_per_row(const BasicTensor<T>& x, std::span<const std::size_t> cols) {
  require_2d(x, "pick_per_row");
  const std::size_t n = x.shape()[0], m = x.shape()[1];
  if (cols.size() != n) throw DimensionError("pick_per_row: need one column per row of " + shape_str(x.shape()));
  std::vector<T> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    if (cols[r] >= m) throw DimensionError("pick_per_row: column out of range");
    out[r] = x.data()[r * m + cols[r]];
  }
  std::vector<std::size_t> c(cols.begin(), cols.end());
  return make_op<T>({n}, std::move(out), "pick_per_row", {x.node()}, [m, c = std::move(c)](Node<T>& o) {
    if (T* g = grad_of(o.inputs[0]))
      for (std::size_t r = 0; r < c.size(); ++r) g[r * m + c[r]] += o.grad[r];
  });
}

template <class T>
BasicTensor<T> gather_per_row(const BasicTensor<T>& x, std::span<const std::size_t> idx, std::size_t per_row) {
  require_2d(x, "gather_per_row");
  const std::size_t n = x.shape()[0], m = x.shape()[1];
  if (per_row == 0 || idx.size() != n * per_row)
    throw DimensionError("gather_per_row: need " + std::to_string(per_row) + " indices per row of " + shape_str(x.shape()));
  std::vector<T> out(n * per_row);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < per_row; ++j) {
      const std::size_t c = idx[r * per_row + j];
      if (c >= m) throw DimensionError("gather_per_row: column out of range");
      out[r * per_row + j] = x.data()[r * m + c];
    }
  std::vector<std::size_t> iv(idx.begin(), idx.end());
  return make_op<T>({n, per_row}, std::move(out), "gather_per_row", {x.node()},
                    [n, m, per_row, iv = std::move(iv)](Node<T>& o) {
                      if (T* g = grad_of(o.inputs[0]))
                        for (std::size_t r = 0; r < n; ++r)
                          for (std::size_t j = 0; j < per_row; ++j) g[r * m + iv[r * per_row + j]] += o.grad[r * per_row + j];
                    });
}

template <class T>
BasicTensor<T> add_positional(const BasicTensor<T>& x, const BasicTensor<T>& table, std::size_t seq) {
  require_2d(x, "add_positional");
  require_2d(table, "add_positional");
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  if (seq == 0 || n % seq != 0 || table.shape()[0] < seq || table.shape()[1] != d)
    throw DimensionError("add_positional: table " + shape_str(table.shape()) + " cannot serve " +
                         shape_str(x.shape()) + " with seq " + std::to_string(seq));
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] += table.data()[(r % seq) * d + c];
  return make_op<T>(x.shape(), std::move(out), "add_positional", {x.node(), table.node()},
                    [n, d, seq](Node<T>& o) {
                      if (T* g = grad_of(o.inputs[0]))
                        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
                      if (T* g = grad_of(o.inputs[1]))
                        for (std::size_t r = 0; r < n; ++r)
                          for (std::size_t c = 0; c < d; ++c) g[(r % seq) * d + c] += o.grad[r * d + c];
                    });
}

template <class T>
BasicTensor<T> prepend_token(const BasicTensor<T>& x, const BasicTensor<T>& cls, std::size_t batch,
                             std::size_t seq) {
  require_2d(x, "prepend_token");
  const std::size_t d = x.shape()[1];
  if (x.shape()[0] != batch * seq || cls.numel() != d)
    throw DimensionError("prepend_token: " + shape_str(x.shape()) + " with token " + shape_str(cls.shape()));
  const std::size_t s1 = seq + 1;
  std::vector<T> out(batch * s1 * d);
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy_n(cls.data().data(), d, out.data() + b * s1 * d);
    std::copy_n(x.data().data() + b * seq * d, seq * d, out.data() + (b * s1 + 1) * d);
  }
  return make_op<T>({batch * s1, d}, std::move(out), "prepend_token", {x.node(), cls.node()},
                    [batch, seq, s1, d](Node<T>& o) {
                      if (T* g = grad_of(o.inputs[0]))
                        for (std::size_t b = 0; b < batch; ++b)
                          for (std::size_t i = 0; i < seq * d; ++i)
                            g[b * seq * d + i] += o.grad[(b * s1 + 1) * d + i];
                      if (T* g = grad_of(o.inputs[1]))
                        for (std::size_t b = 0; b < batch; ++b)
                          for (std::size_t c = 0; c < d; ++c) g[c] += o.grad[b * s1 * d + c];
                    });
}

// ---------------------------------------------------------------------------
// normalization / softmax

template <class T>
BasicTensor<T> l2_normalize_rows(const BasicTensor<T>& x) {
  require_2d(x, "l2_normalize_rows");
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  std::vector<T> out(n * d);
  std::vector<T> norms(n);
  for (std::size_t r = 0; r < n; ++r) {
    const T* row = x.data().data() + r * d;
    T ss = 0;
    for (std::size_t c = 0; c < d; ++c) ss += row[c] * row[c];
    const T nrm = std::sqrt(ss);
    if (!(nrm >= static_cast<T>(kNormEpsilon)))
      throw DegenerateInputError("l2_normalize_rows: row " + std::to_string(r) + " has zero norm");
    norms[r] = nrm;
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = row[c] / nrm;
  }
  auto y = out;
  return make_op<T>(x.shape(), std::move(out), "l2_normalize_rows", {x.node()},
                    [n, d, y = std::move(y), norms = std::move(norms)](Node<T>& o) {
                      T* g = grad_of(o.inputs[0]);
                      if (!g) return;
                      for (std::size_t r = 0; r < n; ++r) {
                        const T* yr = y.data() + r * d;
                        const T* dy = o.grad.data() + r * d;
                        T dot = 0;
                        for (std::size_t c = 0; c < d; ++c) dot += yr[c] * dy[c];
                        for (std::size_t c = 0; c < d; ++c) g[r * d + c] += (dy[c] - yr[c] * dot) / norms[r];
                      }
                    });
}

template <class T>
BasicTensor<T> log_softmax_rows(const BasicTensor<T>& logits) {
  require_2d(logits, "log_softmax_rows");
  const std::size_t n = logits.shape()[0], m = logits.shape()[1];
  std::vector<T> out(n * m);
  for (std::size_t r = 0; r < n; ++r) {
    const T* row = logits.data().data() + r * m;
    T mx = row[0];
    for (std::size_t c = 0; c < m; ++c) {
      if (!std::isfinite(row[c]))
        throw NumericError("log_softmax_rows: non-finite logit at (" + std::to_string(r) + "," +
                           std::to_string(c) + ")");
      mx = std::max(mx, row[c]);
    }
    T se = 0;
    for (std::size_t c = 0; c < m; ++c) se += std::exp(row[c] - mx);
    const T lse = mx + std::log(se);
    for (std::size_t c = 0; c < m; ++c) out[r * m + c] = row[c] - lse;
  }
  auto y = out;
  return make_op<T>(logits.shape(), std::move(out), "log_softmax_rows", {logits.node()},
                    [n, m, y = std::move(y)](Node<T>& o) {
                      T* g = grad_of(o.inputs[0]);
                      if (!g) return;
                      for (std::size_t r = 0; r < n; ++r) {
                        const T* dy = o.grad.data() + r * m;
                        T s = 0;
                        for (std::size_t c = 0; c < m; ++c) s += dy[c];
                        for (std::size_t c = 0; c < m; ++c) g[r * m + c] += dy[c] - std::exp(y[r * m + c]) * s;
                      }
                    });
}

template <class T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain, const BasicTensor<T>& bias) {
  require_2d(x, "layer_norm");
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  if (d < 2) throw DimensionError("layer_norm: need at least 2 features, got " + shape_str(x.shape()));
  if (gain.numel() != d || bias.numel() != d)
    throw DimensionError("layer_norm: affine params " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                         " do not match " + shape_str(x.shape()));
  std::vector<T> xhat(n * d), inv(n), out(n * d);
  const auto gv = gain.data();
  const auto bv = bias.data();
  for (std::size_t r = 0; r < n; ++r) {
    const T* row = x.data().data() + r * d;
    T mu = 0;
    for (std::size_t c = 0; c < d; ++c) mu += row[c];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<T>(d);
    inv[r] = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEpsilon));
    for (std::size_t c = 0; c < d; ++c) {
      xhat[r * d + c] = (row[c] - mu) * inv[r];
      out[r * d + c] = xhat[r * d + c] * gv[c] + bv[c];
    }
  }
  return make_op<T>(x.shape(), std::move(out), "layer_norm", {x.node(), gain.node(), bias.node()},
                    [n, d, xhat = std::move(xhat), inv = std::move(inv)](Node<T>& o) {
                      const auto& G = o.inputs[1];
                      T* gx = grad_of(o.inputs[0]);
                      T* gg = grad_of(G);
                      T* gb = grad_of(o.inputs[2]);
                      std::vector<T> dxh(d);
                      for (std::size_t r = 0; r < n; ++r) {
                        const T* dy = o.grad.data() + r * d;
                        const T* xh = xhat.data() + r * d;
                        if (gg)
                          for (std::size_t c = 0; c < d; ++c) gg[c] += dy[c] * xh[c];
                        if (gb)
                          for (std::size_t c = 0; c < d; ++c) gb[c] += dy[c];
                        if (!gx) continue;
                        T m1 = 0, m2 = 0;
                        for (std::size_t c = 0; c < d; ++c) {
                          dxh[c] = dy[c] * G->value[c];
                          m1 += dxh[c];
                          m2 += dxh[c] * xh[c];
                        }
                        m1 /= static_cast<T>(d);
                        m2 /= static_cast<T>(d);
                        for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += inv[r] * (dxh[c] - m1 - xh[c] * m2);
                      }
                    });
}

template <class T>
BasicTensor<T> self_attention(const BasicTensor<T>& qkv, std::size_t batch, std::size_t seq, std::size_t heads,
                              std::span<const std::uint8_t> key_mask) {
  require_2d(qkv, "self_attention");
  const std::size_t w = qkv.shape()[1];
  if (qkv.shape()[0] != batch * seq || w % 3 != 0 || heads == 0 || (w / 3) % heads != 0)
    throw DimensionError("self_attention: " + shape_str(qkv.shape()) + " incompatible with batch " +
                         std::to_string(batch) + ", seq " + std::to_string(seq) + ", heads " + std::to_string(heads));
  if (!key_mask.empty() && key_mask.size() != batch * seq)
    throw DimensionError("self_attention: key mask size mismatch");
  const std::size_t h = w / 3, dh = h / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  const T* base = qkv.data().data();

  // Scores and outputs are accumulated key by key over visible keys only, so
  // a sample's result does not depend on how far its batch was padded.
  using Vec = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>;
  using OutVec = Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>;
  const auto n = static_cast<Eigen::Index>(dh);
  std::vector<T> probs(batch * heads * seq * seq, T(0));
  std::vector<T> out(batch * seq * h, T(0));
  std::vector<T> scores(seq);
  for (std::size_t b = 0; b < batch; ++b) {
    auto visible = [&](std::size_t j) { return key_mask.empty() || key_mask[b * seq + j] != 0; };
    bool any = false;
    for (std::size_t s = 0; s < seq; ++s) any |= visible(s);
    if (!any) throw DegenerateInputError("self_attention: sample " + std::to_string(b) + " has no visible keys");
    const T* row0 = base + b * seq * w;
    for (std::size_t hd = 0; hd < heads; ++hd) {
      T* p = probs.data() + (b * heads + hd) * seq * seq;
      for (std::size_t i = 0; i < seq; ++i) {
        Vec q(row0 + i * w + hd * dh, n);
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < seq; ++j) {
          if (!visible(j)) continue;
          scores[j] = q.dot(Vec(row0 + j * w + h + hd * dh, n)) * inv_sqrt;
          mx = std::max(mx, scores[j]);
        }
        T se = 0;
        for (std::size_t j = 0; j < seq; ++j)
          if (visible(j)) {
            p[i * seq + j] = std::exp(scores[j] - mx);
            se += p[i * seq + j];
          }
        OutVec o(out.data() + (b * seq + i) * h + hd * dh, n);
        for (std::size_t j = 0; j < seq; ++j)
          if (visible(j)) {
            p[i * seq + j] /= se;
            o += p[i * seq + j] * Vec(row0 + j * w + 2 * h + hd * dh, n);
          }
      }
    }
  }
  return make_op<T>({batch * seq, h}, std::move(out), "self_attention", {qkv.node()},
                    [batch, seq, heads, h, dh, w, inv_sqrt, probs = std::move(probs)](Node<T>& o) {
                      T* g = grad_of(o.inputs[0]);
                      if (!g) return;
                      const T* base = o.inputs[0]->value.data();
                      RowMat<T> dp(seq, seq), ds(seq, seq);
                      for (std::size_t b = 0; b < batch; ++b)
                        for (std::size_t hd = 0; hd < heads; ++hd) {
                          const T* row0 = base + b * seq * w;
                          CStrided<T> q(row0 + hd * dh, seq, dh, Eigen::OuterStride<>(w));
                          CStrided<T> k(row0 + h + hd * dh, seq, dh, Eigen::OuterStride<>(w));
                          CStrided<T> v(row0 + 2 * h + hd * dh, seq, dh, Eigen::OuterStride<>(w));
                          CStrided<T> dout(o.grad.data() + b * seq * h + hd * dh, seq, dh, Eigen::OuterStride<>(h));
                          CMap<T> p(probs.data() + (b * heads + hd) * seq * seq, seq, seq);
                          T* grow = g + b * seq * w;
                          MStrided<T> dq(grow + hd * dh, seq, dh, Eigen::OuterStride<>(w));
                          MStrided<T> dk(grow + h + hd * dh, seq, dh, Eigen::OuterStride<>(w));
                          MStrided<T> dv(grow + 2 * h + hd * dh, seq, dh, Eigen::OuterStride<>(w));
                          dv.noalias() += p.transpose() * dout;
                          dp.noalias() = dout * v.transpose();
                          for (std::size_t i = 0; i < seq; ++i) {
                            T dot = 0;
                            for (std::size_t j = 0; j < seq; ++j) dot += p(i, j) * dp(i, j);
                            for (std::size_t j = 0; j < seq; ++j) ds(i, j) = p(i, j) * (dp(i, j) - dot) * inv_sqrt;
                          }
                          dq.noalias() += ds * k;
                          dk.noalias() += ds.transpose() * q;
                        }
                    });
}

// ---------------------------------------------------------------------------
// explicit instantiations

#define MOTIS_AD_INSTANTIATE(T)                                                                          \
  template class BasicTensor<T>;                                                                         \
  template void backward<T>(const BasicTensor<T>&);                                                      \
  template std::vector<const Node<T>*> topological_replay_order<T>(const BasicTensor<T>&);               \
  template BasicTensor<T> matmul<T>(const BasicTensor<T>&, const BasicTensor<T>&);                       \
  template BasicTensor<T> matmul_nt<T>(const BasicTensor<T>&, const BasicTensor<T>&);                    \
  template BasicTensor<T> transpose<T>(const BasicTensor<T>&);                                           \
  template BasicTensor<T> add<T>(const BasicTensor<T>&, const BasicTensor<T>&);                          \
  template BasicTensor<T> sub<T>(const BasicTensor<T>&, const BasicTensor<T>&);                          \
  template BasicTensor<T> mul<T>(const BasicTensor<T>&, const BasicTensor<T>&);                          \
  template BasicTensor<T> add_row_vector<T>(const BasicTensor<T>&, const BasicTensor<T>&);               \
  template BasicTensor<T> scale<T>(const BasicTensor<T>&, T);                                            \
  template BasicTensor<T> scale_by<T>(const BasicTensor<T>&, const BasicTensor<T>&);                     \
  template BasicTensor<T> exp<T>(const BasicTensor<T>&);                                                 \
  template BasicTensor<T> square<T>(const BasicTensor<T>&);                                              \
  template BasicTensor<T> gelu<T>(const BasicTensor<T>&);                                                \
  template BasicTensor<T> sum<T>(const BasicTensor<T>&);                                                 \
  template BasicTensor<T> mean<T>(const BasicTensor<T>&);                                                \
  template BasicTensor<T> mean_rows<T>(const BasicTensor<T>&);                                           \
  template BasicTensor<T> masked_mean_pool<T>(const BasicTensor<T>&, std::size_t, std::size_t,           \
                                              std::span<const std::uint8_t>);                            \
  template BasicTensor<T> concat_rows<T>(const std::vector<BasicTensor<T>>&);                            \
  template BasicTensor<T> gather_rows<T>(const BasicTensor<T>&, std::span<const std::size_t>);           \
  template BasicTensor<T> embedding_lookup<T>(const BasicTensor<T>&, std::span<const std::uint32_t>);    \
  template BasicTensor<T> pick_per_row<T>(const BasicTensor<T>&, std::span<const std::size_t>);          \
  template BasicTensor<T> gather_per_row<T>(const BasicTensor<T>&, std::span<const std::size_t>, std::size_t); \
  template BasicTensor<T> add_positional<T>(const BasicTensor<T>&, const BasicTensor<T>&, std::size_t);  \
  template BasicTensor<T> prepend_token<T>(const BasicTensor<T>&, const BasicTensor<T>&, std::size_t,    \
                                           std::size_t);                                                 \
  template BasicTensor<T> l2_normalize_rows<T>(const BasicTensor<T>&);                                   \
  template BasicTensor<T> log_softmax_rows<T>(const BasicTensor<T>&);                                    \
  template BasicTensor<T> layer_norm<T>(const BasicTensor<T>&, const BasicTensor<T>&,                    \
                                        const BasicTensor<T>&);                                          \
  template BasicTensor<T> self_attention<T>(const BasicTensor<T>&, std::size_t, std::size_t, std::size_t, \
                                            std::span<const std::uint8_t>);

MOTIS_AD_INSTANTIATE(float)
MOTIS_AD_INSTANTIATE(double)

#undef MOTIS_AD_INSTANTIATE

}  // namespace motis::ad
