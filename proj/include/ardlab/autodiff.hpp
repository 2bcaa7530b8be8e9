#pragma once

// Tape-based reverse-mode differentiation over Tensor values.
//
// A Graph owns every node it records. Nodes are appended in evaluation
// order, so the node list is already topologically sorted and backward
// simply walks it in reverse. Only nodes that (transitively) depend on a
// requires_grad leaf carry gradient buffers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "ardlab/errors.hpp"
#include "ardlab/tensor.hpp"

namespace ardlab {

class Graph;

/// Handle to a node of a Graph.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

enum class OpKind {
  leaf,
  matmul,
  add_bias,
  add,
  sub,
  mul,
  scale,
  relu,
  softmax,
  log,
  square,
  sum,
  mean,
  row_sum,
  l2_norm_sq,
  cross_entropy,
  kl_rows,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::add_bias: return "add_bias";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::relu: return "relu";
    case OpKind::softmax: return "softmax";
    case OpKind::log: return "log";
    case OpKind::square: return "square";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::row_sum: return "row_sum";
    case OpKind::l2_norm_sq: return "l2_norm_sq";
    case OpKind::cross_entropy: return "cross_entropy";
    case OpKind::kl_rows: return "kl_rows";
  }
  return "?";
}

/// Which distribution acts as the reference in a KL term.
enum class KlDirection {
  teacher_reference,  // sum p_T (log p_T - log p_S)
  student_reference,  // sum p_S (log p_S - log p_T)
};

inline constexpr double kProbFloor = 1e-12;

class Graph {
 public:
  Graph() { nodes_.reserve(64); }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var leaf(Tensor value, bool requires_grad = false) {
    if (!value.all_finite()) throw NumericError("leaf: non-finite value");
    Node n;
    n.kind = OpKind::leaf;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    return push(std::move(n));
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  const Tensor& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  /// Gradient buffer of a requires_grad node after backward().
  const Tensor& grad(Var v) const {
    const Node& n = node(v);
    if (!n.requires_grad) throw ContractError("grad: node does not require grad");
    if (n.grad.size() != n.value.size()) throw ContractError("grad: backward has not run");
    return n.grad;
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  OpKind kind(Var v) const { return node(v).kind; }

  void zero_grad() {
    for (Node& n : nodes_) n.grad = Tensor();
  }

  /// Populates gradients of `loss` with respect to every requires_grad node.
  void backward(Var loss) {
    const Node& root = node(loss);
    if (root.value.size() != 1)
      throw ContractError("backward: loss must be a scalar, got shape " + shape_str(root.value.shape()));
    for (Node& n : nodes_)
      if (n.requires_grad) n.grad = Tensor(n.value.shape(), 0.0);
    if (!root.requires_grad) return;
    nodes_[loss.id].grad[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      if (nodes_[i].requires_grad && nodes_[i].kind != OpKind::leaf) propagate(i);
    }
  }

 private:
  friend Var record(Graph&, OpKind, Tensor, std::size_t, std::size_t);
  friend Var matmul(Var, Var);
  friend Var add_bias(Var, Var);
  friend Var add(Var, Var);
  friend Var sub(Var, Var);
  friend Var mul(Var, Var);
  friend Var scale(Var, double);
  friend Var relu(Var);
  friend Var softmax(Var);
  friend Var log(Var, double);
  friend Var square(Var);
  friend Var sum(Var);
  friend Var mean(Var);
  friend Var row_sum(Var);
  friend Var l2_norm_sq(Var);
  friend Var cross_entropy(Var, const std::vector<int>&);
  friend Var kl_rows(Var, const Tensor&, double, KlDirection);

  static constexpr std::size_t kNone = static_cast<std::size_t>(-1);

  struct Node {
    OpKind kind = OpKind::leaf;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::size_t a = kNone;
    std::size_t b = kNone;
    double scalar = 0.0;
    std::vector<int> labels;
    Tensor aux;  // cached softmax / teacher distribution
    KlDirection direction = KlDirection::teacher_reference;
  };

  const Node& node(Var v) const {
    if (v.graph != this || v.id >= nodes_.size()) throw ContractError("variable belongs to another graph");
    return nodes_[v.id];
  }

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  Var emit(OpKind kind, Tensor value, std::size_t a, std::size_t b = kNone, double scalar = 0.0) {
    if (!value.all_finite())
      throw NumericError(std::string(op_name(kind)) + ": produced a non-finite value");
    Node n;
    n.kind = kind;
    n.value = std::move(value);
    n.a = a;
    n.b = b;
    n.scalar = scalar;
    n.requires_grad = nodes_[a].requires_grad || (b != kNone && nodes_[b].requires_grad);
    return push(std::move(n));
  }

  Tensor* grad_of(std::size_t i) { return nodes_[i].requires_grad ? &nodes_[i].grad : nullptr; }

  void propagate(std::size_t i);

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph->value(*this); }

namespace detail {
inline void require_same_graph(Var a, Var b, const char* op) {
  if (a.graph == nullptr || a.graph != b.graph) throw ContractError(std::string(op) + ": operands from different graphs");
}
inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ContractError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}
}  // namespace detail

/// [n,k] x [k,m] -> [n,m]
inline Var matmul(Var a, Var b) {
  detail::require_same_graph(a, b, "matmul");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0))
    throw ContractError("matmul: incompatible shapes " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
  const std::size_t n = A.dim(0), k = A.dim(1), m = B.dim(1);
  Tensor out({n, m});
  kernels::matmul(A.data(), B.data(), out.data(), n, k, m);
  return a.graph->emit(OpKind::matmul, std::move(out), a.id, b.id);
}

/// [n,m] + bias[m], the only broadcast supported.
inline Var add_bias(Var a, Var bias) {
  detail::require_same_graph(a, bias, "add_bias");
  const Tensor& A = a.value();
  const Tensor& B = bias.value();
  if (A.rank() != 2 || B.rank() != 1 || A.dim(1) != B.dim(0))
    throw ContractError("add_bias: incompatible shapes " + shape_str(A.shape()) + " + " + shape_str(B.shape()));
  Tensor out = A;
  const std::size_t m = B.dim(0);
  for (std::size_t r = 0; r < A.dim(0); ++r)
    for (std::size_t j = 0; j < m; ++j) out[r * m + j] += B[j];
  return a.graph->emit(OpKind::add_bias, std::move(out), a.id, bias.id);
}

inline Var add(Var a, Var b) {
  detail::require_same_graph(a, b, "add");
  detail::require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  const Tensor& B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
  return a.graph->emit(OpKind::add, std::move(out), a.id, b.id);
}

inline Var sub(Var a, Var b) {
  detail::require_same_graph(a, b, "sub");
  detail::require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  const Tensor& B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= B[i];
  return a.graph->emit(OpKind::sub, std::move(out), a.id, b.id);
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  detail::require_same_graph(a, b, "mul");
  detail::require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  const Tensor& B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  return a.graph->emit(OpKind::mul, std::move(out), a.id, b.id);
}

inline Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= s;
  return a.graph->emit(OpKind::scale, std::move(out), a.id, Graph::kNone, s);
}

/// max(x, 0); the subgradient at 0 is 0.
inline Var relu(Var a) {
  Tensor out = a.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return a.graph->emit(OpKind::relu, std::move(out), a.id);
}

inline Var softmax(Var a) {
  return a.graph->emit(OpKind::softmax, ardlab::softmax(a.value()), a.id);
}

/// Natural log of max(x, floor). With floor == 0 a nonpositive input is a
/// numeric error; with floor > 0 clamped entries get zero gradient.
inline Var log(Var a, double floor = 0.0) {
  Tensor out = a.value();
  for (double& v : out.data()) {
    if (floor <= 0.0 && v <= 0.0) throw NumericError("log: nonpositive input");
    v = std::log(std::max(v, floor));
  }
  return a.graph->emit(OpKind::log, std::move(out), a.id, Graph::kNone, floor);
}

inline Var square(Var a) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= v;
  return a.graph->emit(OpKind::square, std::move(out), a.id);
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.graph->emit(OpKind::sum, Tensor({1}, s), a.id);
}

inline Var mean(Var a) {
  const Tensor& A = a.value();
  if (A.size() == 0) throw ContractError("mean: empty tensor");
  double s = 0.0;
  for (double v : A.data()) s += v;
  return a.graph->emit(OpKind::mean, Tensor({1}, s / static_cast<double>(A.size())), a.id);
}

/// [n,m] -> [n]
inline Var row_sum(Var a) {
  const Tensor& A = a.value();
  Tensor out({A.rows()}, 0.0);
  for (std::size_t r = 0; r < A.rows(); ++r)
    for (double v : A.row(r)) out[r] += v;
  return a.graph->emit(OpKind::row_sum, std::move(out), a.id);
}

/// Sum of squares of every entry.
inline Var l2_norm_sq(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v * v;
  return a.graph->emit(OpKind::l2_norm_sq, Tensor({1}, s), a.id);
}

/// Per-row softmax cross-entropy against integer labels: [n,C] -> [n].
inline Var cross_entropy(Var logits, const std::vector<int>& labels) {
  const Tensor& Z = logits.value();
  if (Z.rank() != 2 || Z.dim(0) != labels.size())
    throw ContractError("cross_entropy: logits " + shape_str(Z.shape()) + " vs " +
                        std::to_string(labels.size()) + " labels");
  const std::size_t n = Z.dim(0), c = Z.dim(1);
  Tensor p = ardlab::softmax(Z);
  Tensor out({n});
  for (std::size_t r = 0; r < n; ++r) {
    const int y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= c) throw ContractError("cross_entropy: label out of range");
    out[r] = -std::log(std::max(p[r * c + static_cast<std::size_t>(y)], kProbFloor));
  }
  Var v = logits.graph->emit(OpKind::cross_entropy, std::move(out), logits.id);
  auto& node = logits.graph->nodes_[v.id];
  node.labels = labels;
  node.aux = std::move(p);
  return v;
}

/// Per-row KL divergence between softened distributions: [n,C] -> [n].
/// `teacher_logits` is a constant; probabilities are floored at 1e-12 inside
/// the logs.
inline Var kl_rows(Var student_logits, const Tensor& teacher_logits, double temperature,
                   KlDirection direction) {
  const Tensor& Z = student_logits.value();
  detail::require_same_shape(Z, teacher_logits, "kl_rows");
  if (!(temperature > 0.0)) throw ContractError("kl_rows: temperature must be positive");
  const std::size_t n = Z.rows(), c = Z.cols();
  Tensor zs = Z, zt = teacher_logits;
  for (double& v : zs.data()) v /= temperature;
  for (double& v : zt.data()) v /= temperature;
  Tensor ps = ardlab::softmax(zs);
  Tensor pt = ardlab::softmax(zt);
  Tensor out({n}, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      const double a = ps[r * c + k], b = pt[r * c + k];
      const double la = std::log(std::max(a, kProbFloor)), lb = std::log(std::max(b, kProbFloor));
      s += direction == KlDirection::teacher_reference ? b * (lb - la) : a * (la - lb);
    }
    out[r] = s;
  }
  Var v = student_logits.graph->emit(OpKind::kl_rows, std::move(out), student_logits.id,
                                     Graph::kNone, temperature);
  auto& node = student_logits.graph->nodes_[v.id];
  node.direction = direction;
  // aux holds [p_S ; p_T] stacked along rows.
  Tensor both({2 * n, c});
  std::copy(ps.data().begin(), ps.data().end(), both.data().begin());
  std::copy(pt.data().begin(), pt.data().end(), both.data().begin() + static_cast<std::ptrdiff_t>(n * c));
  node.aux = std::move(both);
  return v;
}

inline void Graph::propagate(std::size_t i) {
  Node& n = nodes_[i];
  const Tensor& g = n.grad;
  Tensor* ga = grad_of(n.a);
  Tensor* gb = n.b != kNone ? grad_of(n.b) : nullptr;
  const Tensor& A = nodes_[n.a].value;

  switch (n.kind) {
    case OpKind::leaf:
      break;
    case OpKind::matmul: {
      const Tensor& B = nodes_[n.b].value;
      const std::size_t rows = A.dim(0), k = A.dim(1), m = B.dim(1);
      if (ga) kernels::matmul_grad_a(g.data(), B.data(), ga->data(), rows, k, m);
      if (gb) kernels::matmul_grad_b(A.data(), g.data(), gb->data(), rows, k, m);
      break;
    }
    case OpKind::add_bias: {
      const std::size_t m = A.dim(1);
      if (ga)
        for (std::size_t j = 0; j < g.size(); ++j) (*ga)[j] += g[j];
      if (gb)
        for (std::size_t r = 0; r < A.dim(0); ++r)
          for (std::size_t j = 0; j < m; ++j) (*gb)[j] += g[r * m + j];
      break;
    }
    case OpKind::add:
      if (ga)
        for (std::size_t j = 0; j < g.size(); ++j) (*ga)[j] += g[j];
      if (gb)
        for (std::size_t j = 0; j < g.size(); ++j) (*gb)[j] += g[j];
      break;
    case OpKind::sub:
      if (ga)
        for (std::size_t j = 0; j < g.size(); ++j) (*ga)[j] += g[j];
      if (gb)
        for (std::size_t j = 0; j < g.size(); ++j) (*gb)[j] -= g[j];
      break;
    case OpKind::mul: {
      const Tensor& B = nodes_[n.b].value;
      if (ga)
        for (std::size_t j = 0; j < g.size(); ++j) (*ga)[j] += g[j] * B[j];
      if (gb)
        for (std::size_t j = 0; j < g.size(); ++j) (*gb)[j] += g[j] * A[j];
      break;
    }
    case OpKind::scale:
      for (std::size_t j = 0; j < g.size(); ++j) (*ga)[j] += g[j] * n.scalar;
      break;
    case OpKind::relu:
      for (std::size_t j = 0; j < g.size(); ++j)
        if (A[j] > 0.0) (*ga)[j] += g[j];
      break;
    case OpKind::softmax: {
      const Tensor& p = n.value;
      const std::size_t c = p.cols();
      for (std::size_t r = 0; r < p.rows(); ++r) {
        double dot = 0.0;
        for (std::size_t k = 0; k < c; ++k) dot += g[r * c + k] * p[r * c + k];
        for (std::size_t k = 0; k < c; ++k) (*ga)[r * c + k] += p[r * c + k] * (g[r * c + k] - dot);
      }
      break;
    }
    case OpKind::log:
      for (std::size_t j = 0; j < g.size(); ++j)
        if (A[j] > n.scalar) (*ga)[j] += g[j] / A[j];
      break;
    case OpKind::square:
      for (std::size_t j = 0; j < g.size(); ++j) (*ga)[j] += 2.0 * A[j] * g[j];
      break;
    case OpKind::sum:
      for (std::size_t j = 0; j < A.size(); ++j) (*ga)[j] += g[0];
      break;
    case OpKind::mean: {
      const double s = g[0] / static_cast<double>(A.size());
      for (std::size_t j = 0; j < A.size(); ++j) (*ga)[j] += s;
      break;
    }
    case OpKind::row_sum: {
      const std::size_t c = A.cols();
      for (std::size_t r = 0; r < A.rows(); ++r)
        for (std::size_t k = 0; k < c; ++k) (*ga)[r * c + k] += g[r];
      break;
    }
    case OpKind::l2_norm_sq:
      for (std::size_t j = 0; j < A.size(); ++j) (*ga)[j] += 2.0 * A[j] * g[0];
      break;
    case OpKind::cross_entropy: {
      const Tensor& p = n.aux;
      const std::size_t c = p.cols();
      for (std::size_t r = 0; r < p.rows(); ++r) {
        const auto y = static_cast<std::size_t>(n.labels[r]);
        // Below the probability floor the loss is constant.
        if (p[r * c + y] < kProbFloor) continue;
        for (std::size_t k = 0; k < c; ++k)
          (*ga)[r * c + k] += g[r] * (p[r * c + k] - (k == y ? 1.0 : 0.0));
      }
      break;
    }
    case OpKind::kl_rows: {
      const std::size_t rows = A.rows(), c = A.cols();
      const double inv_t = 1.0 / n.scalar;
      for (std::size_t r = 0; r < rows; ++r) {
        const double* ps = n.aux.data().data() + r * c;
        const double* pt = n.aux.data().data() + (rows + r) * c;
        double* out = ga->data().data() + r * c;
        if (n.direction == KlDirection::teacher_reference) {
          // d/dz_S of -sum p_T log p_S, with floored entries treated as constant.
          double kept = 0.0;
          bool any_floored = false;
          for (std::size_t k = 0; k < c; ++k) {
            if (ps[k] > kProbFloor) kept += pt[k];
            else any_floored = true;
          }
          for (std::size_t k = 0; k < c; ++k) {
            const double tk = ps[k] > kProbFloor ? pt[k] : 0.0;
            // When nothing is floored sum p_T == 1 mathematically; using it
            // exactly keeps the gradient identically zero at p_S == p_T.
            const double d = any_floored ? kept * ps[k] - tk : ps[k] - tk;
            out[k] += g[r] * d * inv_t;
          }
        } else {
          double avg = 0.0;
          for (std::size_t k = 0; k < c; ++k) {
            const double l = std::log(std::max(ps[k], kProbFloor)) - std::log(std::max(pt[k], kProbFloor));
            avg += ps[k] * l;
          }
          for (std::size_t k = 0; k < c; ++k) {
            const double l = std::log(std::max(ps[k], kProbFloor)) - std::log(std::max(pt[k], kProbFloor));
            // The +1 from d(p log p) cancels against the softmax row constraint.
            out[k] += g[r] * ps[k] * (l - avg) * inv_t;
          }
        }
      }
      break;
    }
  }
}

}  // namespace ardlab
