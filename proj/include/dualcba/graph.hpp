#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dualcba/tensor.hpp"

namespace dcba::nd {

/// Which part of the model recorded a node. Second-order differentiation is
/// only defined for head and adaptor nodes.
enum class Region : std::uint8_t { body, head, adaptor };

inline const char* region_name(Region r) {
  switch (r) {
    case Region::body: return "body";
    case Region::head: return "head";
    case Region::adaptor: return "adaptor";
  }
  return "?";
}

enum class Op : std::uint8_t {
  leaf,
  matmul,
  transpose,
  add,
  sub,
  mul,
  div,
  neg,
  scale,
  add_scalar,
  exp,
  log,
  sqrt,
  tanh,
  sigmoid,
  softplus,
  relu,
  clamp_min,
  sum_rows,
  sum_cols,
  sum_all,
  expand,
  gather_cols,
  scatter_cols,
};

inline const char* op_name(Op op) {
  static constexpr const char* names[] = {"leaf",    "matmul",   "transpose", "add",       "sub",      "mul",
                                          "div",     "neg",      "scale",     "add_scalar", "exp",     "log",
                                          "sqrt",    "tanh",     "sigmoid",   "softplus",  "relu",     "clamp_min",
                                          "sum_rows", "sum_cols", "sum_all",  "expand",    "gather_cols",
                                          "scatter_cols"};
  return names[static_cast<std::size_t>(op)];
}

class Tape;

struct Node {
  Tensor value;
  Op op = Op::leaf;
  Region region = Region::body;
  Tape* tape = nullptr;  // null for constants
  std::size_t order = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  double scalar = 0.0;
  std::vector<std::size_t> index;
  std::size_t dim0 = 0, dim1 = 0;
  std::string name;
};

/// Handle to a graph value. A Var without a tape is a constant: operations
/// on constants compute eagerly and record nothing.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  const Tensor& value() const { return node_->value; }
  Tape* tape() const noexcept { return node_ ? node_->tape : nullptr; }
  bool recorded() const noexcept { return tape() != nullptr; }
  bool valid() const noexcept { return node_ != nullptr; }
  const std::shared_ptr<Node>& node() const noexcept { return node_; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }

 private:
  std::shared_ptr<Node> node_;
};

inline Var constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

inline Var detach(const Var& v) { return constant(v.value()); }

/// Recording context. Construction begins a tape; nodes live until the tape
/// is destroyed. A tape is confined to one thread.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// A differentiable parameter.
  Var leaf(Tensor value, std::string name = {}) {
    if (!value.all_finite()) throw NumericError("leaf '" + name + "' has non-finite entries");
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->op = Op::leaf;
    n->name = std::move(name);
    return Var(push(std::move(n)));
  }

  Region region() const noexcept { return region_; }
  void set_region(Region r) noexcept { region_ = r; }

  /// Scoped region switch.
  class RegionScope {
   public:
    RegionScope(Tape* t, Region r) : tape_(t) {
      if (tape_) {
        saved_ = tape_->region_;
        tape_->region_ = r;
      }
    }
    ~RegionScope() {
      if (tape_) tape_->region_ = saved_;
    }
    RegionScope(const RegionScope&) = delete;
    RegionScope& operator=(const RegionScope&) = delete;

   private:
    Tape* tape_;
    Region saved_ = Region::body;
  };

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Number of non-leaf nodes recorded in region `r`.
  std::size_t count(Region r) const {
    std::size_t c = 0;
    for (const auto& n : nodes_)
      if (n->op != Op::leaf && n->region == r) ++c;
    return c;
  }

  std::shared_ptr<Node> push(std::shared_ptr<Node> n) {
    n->tape = this;
    n->order = nodes_.size();
    n->region = region_;
    nodes_.push_back(n);
    return n;
  }

  /// Gradients of the scalar `loss` with respect to `wrt`. Leaves that the
  /// loss does not depend on receive zeros.
  std::vector<Tensor> gradients(const Var& loss, std::span<const Var> wrt) {
    auto g = backprop(loss, wrt, false);
    std::vector<Tensor> out;
    out.reserve(g.size());
    for (std::size_t i = 0; i < g.size(); ++i)
      out.push_back(g[i].valid() ? g[i].value() : Tensor(wrt[i].shape(), 0.0));
    return out;
  }

  /// Like gradients(), but the backward pass is itself recorded so that the
  /// result can be differentiated again. Only head and adaptor nodes may lie
  /// on the path; a body node there is a GraphError.
  std::vector<Var> gradients_graph(const Var& loss, std::span<const Var> wrt) {
    RegionScope scope(this, Region::head);
    auto g = backprop(loss, wrt, true);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!g[i].valid()) g[i] = constant(Tensor(wrt[i].shape(), 0.0));
    return g;
  }

  /// True if `v` depends on any of `leaves` through recorded operations.
  bool depends_on(const Var& v, std::span<const Var> leaves) const {
    if (!v.recorded()) return false;
    auto rel = relevance(v.node()->order, leaves);
    return rel[v.node()->order];
  }

 private:
  std::vector<char> relevance(std::size_t upto, std::span<const Var> wrt) const {
    std::vector<char> rel(upto + 1, 0);
    for (const auto& w : wrt) {
      if (w.tape() != this) throw GraphError("gradient target is not recorded on this tape");
      if (w.node()->order <= upto) rel[w.node()->order] = 1;
    }
    for (std::size_t k = 0; k <= upto; ++k) {
      const auto& n = nodes_[k];
      if (n->op == Op::leaf || rel[k]) continue;
      for (const auto& in : n->inputs)
        if (in->tape == this && in->order <= upto && rel[in->order]) {
          rel[k] = 1;
          break;
        }
    }
    return rel;
  }

  std::vector<Var> backprop(const Var& loss, std::span<const Var> wrt, bool create_graph);

  std::vector<std::shared_ptr<Node>> nodes_;
  Region region_ = Region::head;  // unscoped ops (losses) sit on the head side of the features
};

// ---------------------------------------------------------------------------
// Operations. Each returns a constant when no input is recorded.

namespace detail {

inline Tape* common_tape(std::initializer_list<const Var*> vars) {
  Tape* t = nullptr;
  for (const Var* v : vars) {
    Tape* vt = v->tape();
    if (!vt) continue;
    if (t && t != vt) throw GraphError("operands recorded on different tapes");
    t = vt;
  }
  return t;
}

inline Var make(Op op, Tensor value, std::initializer_list<const Var*> inputs) {
  if (!value.all_finite()) throw NumericError(std::string(op_name(op)) + " produced a non-finite value");
  Tape* t = common_tape(inputs);
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = op;
  if (!t) return Var(std::move(n));
  for (const Var* v : inputs) n->inputs.push_back(v->node());
  return Var(t->push(std::move(n)));
}

inline double sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  return detail::make(Op::matmul, kernel::matmul(a.value(), b.value()), {&a, &b});
}

inline Var transpose(const Var& a) { return detail::make(Op::transpose, kernel::transpose(a.value()), {&a}); }

inline Var operator+(const Var& a, const Var& b) {
  return detail::make(Op::add, kernel::binary(a.value(), b.value(), std::plus<>(), "add"), {&a, &b});
}

inline Var operator-(const Var& a, const Var& b) {
  return detail::make(Op::sub, kernel::binary(a.value(), b.value(), std::minus<>(), "sub"), {&a, &b});
}

inline Var operator*(const Var& a, const Var& b) {
  return detail::make(Op::mul, kernel::binary(a.value(), b.value(), std::multiplies<>(), "mul"), {&a, &b});
}

inline Var operator/(const Var& a, const Var& b) {
  return detail::make(Op::div, kernel::binary(a.value(), b.value(), std::divides<>(), "div"), {&a, &b});
}

inline Var operator-(const Var& a) {
  return detail::make(Op::neg, kernel::unary(a.value(), [](double x) { return -x; }), {&a});
}

inline Var scale(const Var& a, double s) {
  Var out = detail::make(Op::scale, kernel::unary(a.value(), [s](double x) { return s * x; }), {&a});
  out.node()->scalar = s;
  return out;
}

inline Var add_scalar(const Var& a, double s) {
  Var out = detail::make(Op::add_scalar, kernel::unary(a.value(), [s](double x) { return x + s; }), {&a});
  out.node()->scalar = s;
  return out;
}

inline Var exp(const Var& a) {
  return detail::make(Op::exp, kernel::unary(a.value(), [](double x) { return std::exp(x); }), {&a});
}

inline Var log(const Var& a) {
  return detail::make(Op::log, kernel::unary(a.value(), [](double x) { return std::log(x); }), {&a});
}

inline Var sqrt(const Var& a) {
  return detail::make(Op::sqrt, kernel::unary(a.value(), [](double x) { return std::sqrt(x); }), {&a});
}

inline Var tanh(const Var& a) {
  return detail::make(Op::tanh, kernel::unary(a.value(), [](double x) { return std::tanh(x); }), {&a});
}

inline Var sigmoid(const Var& a) {
  return detail::make(Op::sigmoid, kernel::unary(a.value(), detail::sigmoid), {&a});
}

inline Var softplus(const Var& a) {
  return detail::make(Op::softplus, kernel::unary(a.value(), detail::softplus), {&a});
}

inline Var relu(const Var& a) {
  return detail::make(Op::relu, kernel::unary(a.value(), [](double x) { return x > 0 ? x : 0.0; }), {&a});
}

inline Var clamp_min(const Var& a, double floor) {
  Var out = detail::make(Op::clamp_min, kernel::unary(a.value(), [floor](double x) { return x > floor ? x : floor; }),
                         {&a});
  out.node()->scalar = floor;
  return out;
}

inline Var sum_rows(const Var& a) { return detail::make(Op::sum_rows, kernel::sum_rows(a.value()), {&a}); }
inline Var sum_cols(const Var& a) { return detail::make(Op::sum_cols, kernel::sum_cols(a.value()), {&a}); }
inline Var sum_all(const Var& a) { return detail::make(Op::sum_all, kernel::sum_all(a.value()), {&a}); }

inline Var mean_all(const Var& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.value().size())); }

inline Var expand(const Var& a, std::size_t rows, std::size_t cols) {
  Var out = detail::make(Op::expand, kernel::expand(a.value(), rows, cols), {&a});
  out.node()->dim0 = rows;
  out.node()->dim1 = cols;
  return out;
}

inline Var gather_cols(const Var& a, std::vector<std::size_t> idx) {
  Var out = detail::make(Op::gather_cols, kernel::gather_cols(a.value(), idx), {&a});
  out.node()->index = std::move(idx);
  return out;
}

inline Var scatter_cols(const Var& a, std::vector<std::size_t> idx, std::size_t total) {
  Var out = detail::make(Op::scatter_cols, kernel::scatter_cols(a.value(), idx, total), {&a});
  out.node()->index = std::move(idx);
  out.node()->dim1 = total;
  return out;
}

/// Sum `g` down to `target` shape (adjoint of broadcasting).
inline Var reduce_to(const Var& g, const Shape& target) {
  if (g.shape() == target) return g;
  if (target[0] == 1 && target[1] == 1) return sum_all(g);
  if (target[0] == 1) return sum_rows(g);
  if (target[1] == 1) return sum_cols(g);
  throw DimensionError("reduce_to: cannot reduce " + shape_str(g.shape()) + " to " + shape_str(target));
}

/// Row-wise softmax. The row maximum is subtracted as a constant, which
/// leaves both the value and its derivatives unchanged.
inline Var softmax(const Var& logits) {
  Var shifted = logits - constant(kernel::row_max(logits.value()));
  Var e = exp(shifted);
  return e / sum_cols(e);
}

constexpr double kProbFloor = 1e-12;

/// Mean over rows of -log(probs[i, labels[i]]), probabilities clamped at 1e-12.
inline Var cross_entropy(const Var& probs, std::span<const std::size_t> labels) {
  const std::size_t n = probs.rows(), c = probs.cols();
  if (labels.size() != n) throw DimensionError("cross_entropy: label count differs from batch size");
  Tensor onehot = Tensor::matrix(n, c);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= c) {
      throw IndexError("cross_entropy: label " + std::to_string(labels[i]) + " out of range [0, " +
                       std::to_string(c) + ")");
    }
    onehot(i, labels[i]) = 1.0;
  }
  Var picked = sum_all(log(clamp_min(probs, kProbFloor)) * constant(std::move(onehot)));
  return scale(picked, -1.0 / static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// Reverse pass.

namespace detail {

inline Var mask_where(const Tensor& x, double threshold) {
  return constant(kernel::unary(x, [threshold](double v) { return v > threshold ? 1.0 : 0.0; }));
}

/// Vector-Jacobian product of `node` for input `i`. `in` and `out` are the
/// node's inputs and output, detached when the pass is not being recorded.
inline Var vjp(const Node& node, std::size_t i, const std::vector<Var>& in, const Var& out, const Var& g) {
  switch (node.op) {
    case Op::matmul:
      return i == 0 ? matmul(g, transpose(in[1])) : matmul(transpose(in[0]), g);
    case Op::transpose: return transpose(g);
    case Op::add: return reduce_to(g, in[i].shape());
    case Op::sub: return i == 0 ? reduce_to(g, in[0].shape()) : reduce_to(-g, in[1].shape());
    case Op::mul: return reduce_to(g * in[1 - i], in[i].shape());
    case Op::div:
      return i == 0 ? reduce_to(g / in[1], in[0].shape()) : reduce_to(-(g * out / in[1]), in[1].shape());
    case Op::neg: return -g;
    case Op::scale: return scale(g, node.scalar);
    case Op::add_scalar: return g;
    case Op::exp: return g * out;
    case Op::log: return g / in[0];
    case Op::sqrt: return scale(g / out, 0.5);
    case Op::tanh: return g - g * out * out;
    case Op::sigmoid: return g * (out - out * out);
    case Op::softplus: return g * sigmoid(in[0]);
    case Op::relu: return g * mask_where(in[0].value(), 0.0);
    case Op::clamp_min: return g * mask_where(in[0].value(), node.scalar);
    case Op::sum_rows:
    case Op::sum_cols:
    case Op::sum_all: return expand(g, in[0].rows(), in[0].cols());
    case Op::expand: return reduce_to(g, in[0].shape());
    case Op::gather_cols: return scatter_cols(g, node.index, in[0].cols());
    case Op::scatter_cols: return gather_cols(g, node.index);
    case Op::leaf: break;
  }
  throw GraphError(std::string("no derivative rule for ") + op_name(node.op));
}

}  // namespace detail

inline std::vector<Var> Tape::backprop(const Var& loss, std::span<const Var> wrt, bool create_graph) {
  if (!loss.valid() || loss.tape() != this) throw GraphError("backward: loss is not recorded on this tape");
  if (loss.value().size() != 1) throw GraphError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
  const std::size_t top = loss.node()->order;
  const auto rel = relevance(top, wrt);

  std::vector<Var> grad(top + 1);
  grad[top] = constant(Tensor::scalar(1.0));
  std::vector<Var> ins;
  for (std::size_t k = top + 1; k-- > 0;) {
    if (!rel[k] || !grad[k].valid()) continue;
    const Node& n = *nodes_[k];
    if (n.op == Op::leaf) continue;
    if (create_graph && n.region == Region::body) {
      throw GraphError(std::string("double-backward reached body node '") + op_name(n.op) +
                       "'; second-order support covers the head and adaptor only");
    }
    ins.clear();
    for (const auto& p : n.inputs) ins.push_back(create_graph ? Var(p) : constant(p->value));
    const Var out = create_graph ? Var(nodes_[k]) : constant(n.value);
    for (std::size_t i = 0; i < n.inputs.size(); ++i) {
      const auto& p = n.inputs[i];
      if (p->tape != this || p->order > top || !rel[p->order]) continue;
      Var c = detail::vjp(n, i, ins, out, grad[k]);
      grad[p->order] = grad[p->order].valid() ? grad[p->order] + c : c;
    }
    if (!create_graph) grad[k] = Var();  // release intermediates early
  }

  std::vector<Var> result;
  result.reserve(wrt.size());
  for (const auto& w : wrt) {
    const std::size_t o = w.node()->order;
    result.push_back(o <= top ? grad[o] : Var());
  }
  return result;
}

/// Hypergradient through a one-step head update: given an inner loss that
/// depends on head leaves and adaptor leaves phi, returns
///   -alpha * d/dphi < outer_grad, d inner_loss / d head >,
/// the second-order term of the look-ahead update restricted to the head.
inline std::vector<Tensor> head_double_backward(Tape& tape, const Var& inner_loss, std::span<const Var> head,
                                                std::span<const Tensor> outer_grad, std::span<const Var> phi,
                                                double alpha) {
  if (head.size() != outer_grad.size()) throw DimensionError("head_double_backward: one outer gradient per head leaf");
  std::vector<Var> g = tape.gradients_graph(inner_loss, head);
  Var contracted;
  for (std::size_t k = 0; k < g.size(); ++k) {
    if (!g[k].value().same_shape(outer_grad[k])) throw DimensionError("head_double_backward: outer gradient shape");
    Var term = sum_all(g[k] * constant(outer_grad[k]));
    contracted = contracted.valid() ? contracted + term : term;
  }
  for (const auto& p : phi) {
    std::span<const Var> one(&p, 1);
    if (!tape.depends_on(contracted, one)) {
      throw GraphError("head_double_backward: adaptor leaf '" + p.node()->name +
                       "' is not reachable from the head gradient");
    }
  }
  auto hg = tape.gradients(contracted, phi);
  for (auto& t : hg)
    for (double& v : t.data()) v *= -alpha;
  return hg;
}

}  // namespace dcba::nd
