#pragma once

// Reverse-mode differentiation over dense Eigen matrices.
//
// Every primitive appends one node to a Tape. Node indices are a topological
// order, so a reverse sweep simply walks indices downwards. The backward rule of
// every primitive is itself written with tape primitives: when `grad` is asked
// to create a graph, the gradient nodes it emits are ordinary tape nodes and can
// be differentiated again (gradient through a gradient step).

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <deque>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace metaite::ad {

enum class Op : std::uint8_t {
  leaf,
  add,
  sub,
  neg,
  scale,
  add_scalar,
  hadamard,
  quotient,
  matmul,
  transpose,
  exp,
  log,
  sigmoid,
  softplus,
  tanh,
  elu,
  elu_deriv,
  sum,
  broadcast_scalar,
  sum_rows,
  broadcast_rows,
  sum_cols,
  broadcast_cols,
};

template <typename Scalar>
class BasicTape;

/// Handle to one node on a tape. Cheap to copy; valid while the tape is alive
/// and has not been cleared.
template <typename Scalar>
class BasicVar {
 public:
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

  BasicVar() = default;
  BasicVar(BasicTape<Scalar>* tape, std::size_t index) : tape_(tape), index_(index) {}

  bool valid() const { return tape_ != nullptr; }
  BasicTape<Scalar>* tape() const { return tape_; }
  std::size_t index() const { return index_; }

  const Mat& value() const { return tape_->value(index_); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Scalar scalar() const { return value()(0, 0); }
  bool requires_grad() const { return tape_->requires_grad(index_); }

 private:
  BasicTape<Scalar>* tape_ = nullptr;
  std::size_t index_ = 0;
};

template <typename Scalar>
class BasicTape {
 public:
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Var = BasicVar<Scalar>;

  BasicTape() = default;
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  /// Differentiable leaf.
  Var variable(Mat value) { return push_leaf(std::move(value), true); }
  /// Non-differentiable leaf.
  Var constant(Mat value) { return push_leaf(std::move(value), false); }

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  const Mat& value(std::size_t i) const { return nodes_.at(i).value; }
  bool requires_grad(std::size_t i) const { return nodes_.at(i).requires_grad; }
  Op op(std::size_t i) const { return nodes_.at(i).op; }

  /// While false, new nodes are recorded as constants (no backward link).
  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }

  Var apply(Op op, const Var& a, const Var& b = Var{}, Scalar factor = Scalar(0), Eigen::Index rows = 0,
            Eigen::Index cols = 0, int order = 0);

  /// Gradients of the scalar `output` with respect to each node in `wrt`.
  /// With `create_graph` the returned gradients are differentiable tape nodes.
  std::vector<Var> grad(const Var& output, std::span<const Var> wrt, bool create_graph = false);

  /// Recomputes every non-leaf node from its recorded inputs and checks the
  /// result is bit-identical to what was recorded.
  bool replay_matches() const;

 private:
  struct Node {
    Mat value;
    Op op = Op::leaf;
    std::int64_t a = -1;
    std::int64_t b = -1;
    Scalar factor = Scalar(0);
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
    int order = 0;
    bool requires_grad = false;
  };

  Var push_leaf(Mat value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  static Mat forward(const Node& n, const Mat* a, const Mat* b);
  void backward(std::size_t i, const Var& g, const std::vector<char>& relevant, std::vector<std::int64_t>& adj);
  void accumulate(std::vector<std::int64_t>& adj, std::int64_t parent, const Var& contribution);

  std::deque<Node> nodes_;
  bool recording_ = true;
};

/// Disables recording on a tape for the lifetime of the guard.
template <typename Scalar>
class BasicNoGradGuard {
 public:
  explicit BasicNoGradGuard(BasicTape<Scalar>& tape) : tape_(tape), previous_(tape.recording()) {
    tape_.set_recording(false);
  }
  ~BasicNoGradGuard() { tape_.set_recording(previous_); }
  BasicNoGradGuard(const BasicNoGradGuard&) = delete;
  BasicNoGradGuard& operator=(const BasicNoGradGuard&) = delete;

 private:
  BasicTape<Scalar>& tape_;
  bool previous_;
};

using Tape = BasicTape<double>;
using Var = BasicVar<double>;
using NoGradGuard = BasicNoGradGuard<double>;

// ---------------------------------------------------------------------------
// Primitive wrappers.

template <typename S>
BasicVar<S> operator+(const BasicVar<S>& a, const BasicVar<S>& b) {
  return a.tape()->apply(Op::add, a, b);
}
template <typename S>
BasicVar<S> operator-(const BasicVar<S>& a, const BasicVar<S>& b) {
  return a.tape()->apply(Op::sub, a, b);
}
template <typename S>
BasicVar<S> operator-(const BasicVar<S>& a) {
  return a.tape()->apply(Op::neg, a);
}
template <typename S>
BasicVar<S> operator*(S c, const BasicVar<S>& a) {
  return a.tape()->apply(Op::scale, a, {}, c);
}
template <typename S>
BasicVar<S> operator*(const BasicVar<S>& a, S c) {
  return c * a;
}
template <typename S>
BasicVar<S> add_scalar(const BasicVar<S>& a, S c) {
  return a.tape()->apply(Op::add_scalar, a, {}, c);
}
template <typename S>
BasicVar<S> hadamard(const BasicVar<S>& a, const BasicVar<S>& b) {
  return a.tape()->apply(Op::hadamard, a, b);
}
template <typename S>
BasicVar<S> quotient(const BasicVar<S>& a, const BasicVar<S>& b) {
  return a.tape()->apply(Op::quotient, a, b);
}
template <typename S>
BasicVar<S> square(const BasicVar<S>& a) {
  return hadamard(a, a);
}
template <typename S>
BasicVar<S> matmul(const BasicVar<S>& a, const BasicVar<S>& b) {
  return a.tape()->apply(Op::matmul, a, b);
}
template <typename S>
BasicVar<S> transpose(const BasicVar<S>& a) {
  return a.tape()->apply(Op::transpose, a);
}
template <typename S>
BasicVar<S> exp(const BasicVar<S>& a) {
  return a.tape()->apply(Op::exp, a);
}
template <typename S>
BasicVar<S> log(const BasicVar<S>& a) {
  return a.tape()->apply(Op::log, a);
}
template <typename S>
BasicVar<S> sigmoid(const BasicVar<S>& a) {
  return a.tape()->apply(Op::sigmoid, a);
}
/// log(1 + exp(x)), evaluated without overflow.
template <typename S>
BasicVar<S> softplus(const BasicVar<S>& a) {
  return a.tape()->apply(Op::softplus, a);
}
template <typename S>
BasicVar<S> tanh(const BasicVar<S>& a) {
  return a.tape()->apply(Op::tanh, a);
}
/// ELU with unit scale: x for x > 0, exp(x) - 1 otherwise.
template <typename S>
BasicVar<S> elu(const BasicVar<S>& a) {
  return a.tape()->apply(Op::elu, a);
}
/// `order`-th derivative of ELU, order >= 1.
template <typename S>
BasicVar<S> elu_derivative(const BasicVar<S>& a, int order) {
  return a.tape()->apply(Op::elu_deriv, a, {}, S(0), 0, 0, order);
}
template <typename S>
BasicVar<S> sum(const BasicVar<S>& a) {
  return a.tape()->apply(Op::sum, a);
}
template <typename S>
BasicVar<S> mean(const BasicVar<S>& a) {
  return S(1) / static_cast<S>(a.rows() * a.cols()) * sum(a);
}
/// 1x1 -> rows x cols.
template <typename S>
BasicVar<S> broadcast_scalar(const BasicVar<S>& a, Eigen::Index rows, Eigen::Index cols) {
  return a.tape()->apply(Op::broadcast_scalar, a, {}, S(0), rows, cols);
}
/// rows x n -> 1 x n (column sums).
template <typename S>
BasicVar<S> sum_rows(const BasicVar<S>& a) {
  return a.tape()->apply(Op::sum_rows, a);
}
/// 1 x n -> rows x n.
template <typename S>
BasicVar<S> broadcast_rows(const BasicVar<S>& a, Eigen::Index rows) {
  return a.tape()->apply(Op::broadcast_rows, a, {}, S(0), rows, 0);
}
/// rows x n -> rows x 1 (row sums).
template <typename S>
BasicVar<S> sum_cols(const BasicVar<S>& a) {
  return a.tape()->apply(Op::sum_cols, a);
}
/// rows x 1 -> rows x cols.
template <typename S>
BasicVar<S> broadcast_cols(const BasicVar<S>& a, Eigen::Index cols) {
  return a.tape()->apply(Op::broadcast_cols, a, {}, S(0), 0, cols);
}

// ---------------------------------------------------------------------------
// Implementation.

namespace detail {

template <typename S>
S elu_deriv_value(S x, int order) {
  if (x > S(0)) return order == 1 ? S(1) : S(0);
  return std::exp(x);
}

template <typename S>
S softplus_value(S x) {
  return x > S(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <typename S>
S sigmoid_value(S x) {
  if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
  const S e = std::exp(x);
  return e / (S(1) + e);
}

inline std::string shape_str(Eigen::Index r, Eigen::Index c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

}  // namespace detail

template <typename Scalar>
typename BasicTape<Scalar>::Mat BasicTape<Scalar>::forward(const Node& n, const Mat* a, const Mat* b) {
  using detail::shape_str;
  auto same_shape = [&](const char* what) {
    if (a->rows() != b->rows() || a->cols() != b->cols())
      throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_str(a->rows(), a->cols()) +
                                  " vs " + shape_str(b->rows(), b->cols()));
  };
  switch (n.op) {
    case Op::leaf:
      return n.value;
    case Op::add:
      same_shape("add");
      return *a + *b;
    case Op::sub:
      same_shape("sub");
      return *a - *b;
    case Op::neg:
      return -*a;
    case Op::scale:
      return n.factor * *a;
    case Op::add_scalar:
      return (a->array() + n.factor).matrix();
    case Op::hadamard:
      same_shape("hadamard");
      return a->cwiseProduct(*b);
    case Op::quotient:
      same_shape("quotient");
      return a->cwiseQuotient(*b);
    case Op::matmul: {
      if (a->cols() != b->rows())
        throw std::invalid_argument("matmul: inner dimension mismatch " + shape_str(a->rows(), a->cols()) + " * " +
                                    shape_str(b->rows(), b->cols()));
      Mat out(a->rows(), b->cols());
      out.noalias() = *a * *b;
      return out;
    }
    case Op::transpose:
      return a->transpose();
    case Op::exp:
      return a->array().exp().matrix();
    case Op::log:
      return a->array().log().matrix();
    case Op::sigmoid:
      return a->unaryExpr([](Scalar x) { return detail::sigmoid_value(x); });
    case Op::softplus:
      return a->unaryExpr([](Scalar x) { return detail::softplus_value(x); });
    case Op::tanh:
      return a->array().tanh().matrix();
    case Op::elu:
      return a->unaryExpr([](Scalar x) { return x > Scalar(0) ? x : std::expm1(x); });
    case Op::elu_deriv: {
      const int order = n.order;
      return a->unaryExpr([order](Scalar x) { return detail::elu_deriv_value(x, order); });
    }
    case Op::sum:
      return Mat::Constant(1, 1, a->sum());
    case Op::broadcast_scalar:
      if (a->rows() != 1 || a->cols() != 1) throw std::invalid_argument("broadcast_scalar: input must be 1x1");
      return Mat::Constant(n.rows, n.cols, (*a)(0, 0));
    case Op::sum_rows:
      return a->colwise().sum();
    case Op::broadcast_rows:
      if (a->rows() != 1) throw std::invalid_argument("broadcast_rows: input must have one row");
      return a->replicate(n.rows, 1);
    case Op::sum_cols:
      return a->rowwise().sum();
    case Op::broadcast_cols:
      if (a->cols() != 1) throw std::invalid_argument("broadcast_cols: input must have one column");
      return a->replicate(1, n.cols);
  }
  throw std::logic_error("unknown tape op");
}

template <typename Scalar>
BasicVar<Scalar> BasicTape<Scalar>::apply(Op op, const Var& a, const Var& b, Scalar factor, Eigen::Index rows,
                                          Eigen::Index cols, int order) {
  if (!a.valid() || a.tape() != this) throw std::invalid_argument("tape op: operand not on this tape");
  if (b.valid() && b.tape() != this) throw std::invalid_argument("tape op: operand not on this tape");
  if (op == Op::elu_deriv && order < 1) throw std::invalid_argument("elu_derivative: order must be >= 1");
  Node n;
  n.op = op;
  n.a = static_cast<std::int64_t>(a.index());
  n.b = b.valid() ? static_cast<std::int64_t>(b.index()) : -1;
  n.factor = factor;
  n.rows = rows;
  n.cols = cols;
  n.order = order;
  n.value = forward(n, &nodes_[a.index()].value, b.valid() ? &nodes_[b.index()].value : nullptr);
  n.requires_grad = recording_ && (nodes_[a.index()].requires_grad || (b.valid() && nodes_[b.index()].requires_grad));
  if (!n.requires_grad) {
    n.a = -1;
    n.b = -1;
    n.op = Op::leaf;
  }
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

template <typename Scalar>
void BasicTape<Scalar>::accumulate(std::vector<std::int64_t>& adj, std::int64_t parent, const Var& contribution) {
  auto& slot = adj[static_cast<std::size_t>(parent)];
  if (slot < 0) {
    slot = static_cast<std::int64_t>(contribution.index());
  } else {
    slot = static_cast<std::int64_t>((Var(this, static_cast<std::size_t>(slot)) + contribution).index());
  }
}

template <typename Scalar>
void BasicTape<Scalar>::backward(std::size_t i, const Var& g, const std::vector<char>& relevant,
                                 std::vector<std::int64_t>& adj) {
  const Op op = nodes_[i].op;
  const std::int64_t ia = nodes_[i].a;
  const std::int64_t ib = nodes_[i].b;
  const Scalar factor = nodes_[i].factor;
  const int order = nodes_[i].order;
  const Var out(this, i);
  const Var a = ia >= 0 ? Var(this, static_cast<std::size_t>(ia)) : Var{};
  const Var b = ib >= 0 ? Var(this, static_cast<std::size_t>(ib)) : Var{};
  const bool need_a = ia >= 0 && relevant[static_cast<std::size_t>(ia)];
  const bool need_b = ib >= 0 && relevant[static_cast<std::size_t>(ib)];

  switch (op) {
    case Op::leaf:
      return;
    case Op::add:
      if (need_a) accumulate(adj, ia, g);
      if (need_b) accumulate(adj, ib, g);
      return;
    case Op::sub:
      if (need_a) accumulate(adj, ia, g);
      if (need_b) accumulate(adj, ib, -g);
      return;
    case Op::neg:
      if (need_a) accumulate(adj, ia, -g);
      return;
    case Op::scale:
      if (need_a) accumulate(adj, ia, factor * g);
      return;
    case Op::add_scalar:
      if (need_a) accumulate(adj, ia, g);
      return;
    case Op::hadamard:
      if (need_a) accumulate(adj, ia, hadamard(g, b));
      if (need_b) accumulate(adj, ib, hadamard(g, a));
      return;
    case Op::quotient:
      if (need_a) accumulate(adj, ia, quotient(g, b));
      if (need_b) accumulate(adj, ib, -quotient(hadamard(g, out), b));
      return;
    case Op::matmul:
      if (need_a) accumulate(adj, ia, matmul(g, transpose(b)));
      if (need_b) accumulate(adj, ib, matmul(transpose(a), g));
      return;
    case Op::transpose:
      if (need_a) accumulate(adj, ia, transpose(g));
      return;
    case Op::exp:
      if (need_a) accumulate(adj, ia, hadamard(g, out));
      return;
    case Op::log:
      if (need_a) accumulate(adj, ia, quotient(g, a));
      return;
    case Op::sigmoid:
      if (need_a) accumulate(adj, ia, hadamard(g, hadamard(out, add_scalar(-out, Scalar(1)))));
      return;
    case Op::softplus:
      if (need_a) accumulate(adj, ia, hadamard(g, sigmoid(a)));
      return;
    case Op::tanh:
      if (need_a) accumulate(adj, ia, hadamard(g, add_scalar(-square(out), Scalar(1))));
      return;
    case Op::elu:
      if (need_a) accumulate(adj, ia, hadamard(g, elu_derivative(a, 1)));
      return;
    case Op::elu_deriv:
      if (need_a) accumulate(adj, ia, hadamard(g, elu_derivative(a, order + 1)));
      return;
    case Op::sum:
      if (need_a) accumulate(adj, ia, broadcast_scalar(g, a.rows(), a.cols()));
      return;
    case Op::broadcast_scalar:
      if (need_a) accumulate(adj, ia, sum(g));
      return;
    case Op::sum_rows:
      if (need_a) accumulate(adj, ia, broadcast_rows(g, a.rows()));
      return;
    case Op::broadcast_rows:
      if (need_a) accumulate(adj, ia, sum_rows(g));
      return;
    case Op::sum_cols:
      if (need_a) accumulate(adj, ia, broadcast_cols(g, a.cols()));
      return;
    case Op::broadcast_cols:
      if (need_a) accumulate(adj, ia, sum_cols(g));
      return;
  }
}

template <typename Scalar>
std::vector<BasicVar<Scalar>> BasicTape<Scalar>::grad(const Var& output, std::span<const Var> wrt, bool create_graph) {
  if (!output.valid() || output.tape() != this) throw std::invalid_argument("grad: output not on this tape");
  if (output.rows() != 1 || output.cols() != 1)
    throw std::invalid_argument("grad: output must be scalar, got " +
                                detail::shape_str(output.rows(), output.cols()));
  for (const auto& w : wrt) {
    if (!w.valid() || w.tape() != this || w.index() >= nodes_.size())
      throw std::invalid_argument("grad: parameter not on this tape");
  }

  const std::size_t top = output.index();
  // relevant[i]: node i lies on a path from some wrt node.
  std::vector<char> relevant(top + 1, 0);
  for (const auto& w : wrt)
    if (w.index() <= top) relevant[w.index()] = 1;
  for (std::size_t i = 0; i <= top; ++i) {
    if (relevant[i]) continue;
    const Node& n = nodes_[i];
    if (!n.requires_grad) continue;
    if ((n.a >= 0 && relevant[static_cast<std::size_t>(n.a)]) || (n.b >= 0 && relevant[static_cast<std::size_t>(n.b)]))
      relevant[i] = 1;
  }

  const bool previous = recording_;
  recording_ = create_graph;
  std::vector<std::int64_t> adj(top + 1, -1);
  if (relevant[top]) adj[top] = static_cast<std::int64_t>(constant(Mat::Ones(1, 1)).index());
  for (std::size_t i = top + 1; i-- > 0;) {
    if (adj[i] < 0 || !relevant[i]) continue;
    backward(i, Var(this, static_cast<std::size_t>(adj[i])), relevant, adj);
  }
  recording_ = previous;

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const auto& w : wrt) {
    if (w.index() <= top && adj[w.index()] >= 0) {
      out.emplace_back(this, static_cast<std::size_t>(adj[w.index()]));
    } else {
      out.push_back(constant(Mat::Zero(w.rows(), w.cols())));
    }
  }
  return out;
}

template <typename Scalar>
bool BasicTape<Scalar>::replay_matches() const {
  for (const Node& n : nodes_) {
    if (n.op == Op::leaf) continue;
    const Mat* a = &nodes_[static_cast<std::size_t>(n.a)].value;
    const Mat* b = n.b >= 0 ? &nodes_[static_cast<std::size_t>(n.b)].value : nullptr;
    const Mat again = forward(n, a, b);
    if (again.rows() != n.value.rows() || again.cols() != n.value.cols()) return false;
    for (Eigen::Index k = 0; k < again.size(); ++k) {
      const Scalar x = again.data()[k];
      const Scalar y = n.value.data()[k];
      if (std::memcmp(&x, &y, sizeof(Scalar)) != 0) return false;
    }
  }
  return true;
}

}  // namespace metaite::ad
