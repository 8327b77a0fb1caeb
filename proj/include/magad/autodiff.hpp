#pragma once

// Dense matrices with a reverse-mode tape.
//
// Every node records its op, parents and current value. Values are computed
// eagerly when a node is recorded and can be recomputed from the leaves with
// Tape::forward(). Gradients are themselves recorded as tape nodes, so a
// gradient can be differentiated again (used by MAML and gradient matching).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "magad/error.hpp"

namespace magad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::string shape_str(Eigen::Index r, Eigen::Index c) {
  return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
}
inline std::string shape_str(const Matrix& m) { return shape_str(m.rows(), m.cols()); }

inline constexpr double kLogFloor = 1e-12;

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

namespace ad {

enum class Op : std::uint8_t {
  Leaf,
  MatMul,     // a * b
  MatMulNT,   // a * b^T
  MatMulTN,   // a^T * b
  Add,
  Sub,
  Mul,        // elementwise
  AddRow,     // (n x k) + broadcast (1 x k)
  Relu,
  Sigmoid,
  Tanh,
  Exp,
  Log,        // log(max(x, kLogFloor))
  Abs,
  Recip,
  Sqrt,
  MeanRows,   // (n x k) -> (1 x k)
  SumRows,    // (n x k) -> (1 x k)
  SumCols,    // (n x k) -> (n x 1)
  Sum,        // -> (1 x 1)
  ConcatCols,
  SliceCols,  // columns [i0, i1)
  PadCols,    // place into zeros of width i1 at column offset i0
  Scale,
  AddScalar,
  MaxScalar,
  Transpose,
  Reshape,         // row-major reinterpretation as (i0 x i1)
  BroadcastRows,   // (1 x k) -> (i0 x k)
  BroadcastCols,   // (n x 1) -> (n x i1)
  BroadcastScalar, // (1 x 1) -> (i0 x i1)
  Mask,       // 1 where x > c else 0; zero derivative
  Sign,       // zero derivative
};

const char* op_name(Op op);

/// True for ops whose derivative is identically zero.
constexpr bool is_constant_op(Op op) { return op == Op::Mask || op == Op::Sign; }

struct Node {
  Op op = Op::Leaf;
  int a = -1;
  int b = -1;
  double c = 0.0;
  Eigen::Index i0 = 0;
  Eigen::Index i1 = 0;
  bool is_param = false;
  Matrix value;
};

class Tape;

/// Handle to a tape node.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
  bool valid() const { return tape != nullptr && id >= 0; }
};

class Tape {
 public:
  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix m) {
    Node n;
    n.value = std::move(m);
    return push(std::move(n));
  }

  Var scalar(double x) { return constant(Matrix::Constant(1, 1, x)); }

  /// Trainable leaf; its adjoint is reported by backward().
  Var param(Matrix m, std::string name = {}) {
    Node n;
    n.value = std::move(m);
    n.is_param = true;
    Var v = push(std::move(n));
    params_.push_back(v.id);
    param_names_.push_back(name.empty() ? "p" + std::to_string(params_.size() - 1) : std::move(name));
    return v;
  }

  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  const Matrix& value(int id) const { return node(id).value; }
  std::size_t size() const { return nodes_.size(); }

  const std::vector<int>& params() const { return params_; }
  const std::vector<std::string>& param_names() const { return param_names_; }

  /// Overwrite a leaf value. Dependent nodes are stale until forward().
  void set_value(Var leaf, Matrix m) {
    Node& n = nodes_[static_cast<std::size_t>(leaf.id)];
    if (n.op != Op::Leaf) throw ContractError("set_value: node " + std::to_string(leaf.id) + " is not a leaf");
    if (m.rows() != n.value.rows() || m.cols() != n.value.cols())
      throw DimensionError("set_value: " + shape_str(n.value) + " vs " + shape_str(m));
    n.value = std::move(m);
  }

  /// Recompute every non-leaf node from current leaf values.
  void forward() {
    for (auto& n : nodes_) {
      if (n.op != Op::Leaf) n.value = compute(n);
    }
  }

  /// Drop nodes with id >= n. Params recorded after n are dropped as well.
  void truncate(std::size_t n) {
    nodes_.resize(n);
    while (!params_.empty() && static_cast<std::size_t>(params_.back()) >= n) {
      params_.pop_back();
      param_names_.pop_back();
    }
  }

  Var record(Op op, int a, int b = -1, double c = 0.0, Eigen::Index i0 = 0, Eigen::Index i1 = 0) {
    Node n;
    n.op = op;
    n.a = a;
    n.b = b;
    n.c = c;
    n.i0 = i0;
    n.i1 = i1;
    check_shapes(n);
    n.value = compute(n);
    return push(std::move(n));
  }

 private:
  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size() - 1)};
  }

  void check_shapes(const Node& n) const {
    const Matrix& A = value(n.a);
    auto fail = [&](const char* what) {
      std::string msg = std::string(op_name(n.op)) + ": " + what + " " + shape_str(A);
      if (n.b >= 0) msg += " vs " + shape_str(value(n.b));
      throw DimensionError(msg);
    };
    switch (n.op) {
      case Op::MatMul:
        if (A.cols() != value(n.b).rows()) fail("inner dimension mismatch");
        break;
      case Op::MatMulNT:
        if (A.cols() != value(n.b).cols()) fail("inner dimension mismatch");
        break;
      case Op::MatMulTN:
        if (A.rows() != value(n.b).rows()) fail("inner dimension mismatch");
        break;
      case Op::Add:
      case Op::Sub:
      case Op::Mul:
        if (A.rows() != value(n.b).rows() || A.cols() != value(n.b).cols()) fail("shape mismatch");
        break;
      case Op::AddRow:
        if (value(n.b).rows() != 1 || A.cols() != value(n.b).cols()) fail("row broadcast mismatch");
        break;
      case Op::ConcatCols:
        if (A.rows() != value(n.b).rows()) fail("row count mismatch");
        break;
      case Op::SliceCols:
        if (n.i0 < 0 || n.i1 > A.cols() || n.i0 > n.i1) fail("column range out of bounds");
        break;
      case Op::PadCols:
        if (n.i0 < 0 || n.i0 + A.cols() > n.i1) fail("padding out of bounds");
        break;
      case Op::Reshape:
        if (n.i0 * n.i1 != A.size()) fail("element count mismatch");
        break;
      case Op::BroadcastRows:
        if (A.rows() != 1) fail("expects a row vector");
        break;
      case Op::BroadcastCols:
        if (A.cols() != 1) fail("expects a column vector");
        break;
      case Op::BroadcastScalar:
        if (A.size() != 1) fail("expects a scalar");
        break;
      default:
        break;
    }
  }

  Matrix compute(const Node& n) const {
    const Matrix& A = value(n.a);
    switch (n.op) {
      case Op::Leaf:
        return n.value;
      case Op::MatMul: {
        Matrix r(A.rows(), value(n.b).cols());
        r.noalias() = A * value(n.b);
        return r;
      }
      case Op::MatMulNT: {
        Matrix r(A.rows(), value(n.b).rows());
        r.noalias() = A * value(n.b).transpose();
        return r;
      }
      case Op::MatMulTN: {
        Matrix r(A.cols(), value(n.b).cols());
        r.noalias() = A.transpose() * value(n.b);
        return r;
      }
      case Op::Add:
        return A + value(n.b);
      case Op::Sub:
        return A - value(n.b);
      case Op::Mul:
        return A.cwiseProduct(value(n.b));
      case Op::AddRow:
        return A.rowwise() + value(n.b).row(0);
      case Op::Relu:
        return A.cwiseMax(0.0);
      case Op::Sigmoid:
        return A.unaryExpr([](double x) { return stable_sigmoid(x); });
      case Op::Tanh:
        return A.array().tanh().matrix();
      case Op::Exp:
        return A.array().exp().matrix();
      case Op::Log:
        return A.cwiseMax(kLogFloor).array().log().matrix();
      case Op::Abs:
        return A.cwiseAbs();
      case Op::Recip:
        return A.cwiseInverse();
      case Op::Sqrt:
        return A.cwiseSqrt();
      case Op::MeanRows:
        return A.colwise().mean();
      case Op::SumRows:
        return A.colwise().sum();
      case Op::SumCols:
        return A.rowwise().sum();
      case Op::Sum:
        return Matrix::Constant(1, 1, A.sum());
      case Op::ConcatCols: {
        const Matrix& B = value(n.b);
        Matrix r(A.rows(), A.cols() + B.cols());
        r.leftCols(A.cols()) = A;
        r.rightCols(B.cols()) = B;
        return r;
      }
      case Op::SliceCols:
        return A.middleCols(n.i0, n.i1 - n.i0);
      case Op::PadCols: {
        Matrix r = Matrix::Zero(A.rows(), n.i1);
        r.middleCols(n.i0, A.cols()) = A;
        return r;
      }
      case Op::Scale:
        return A * n.c;
      case Op::AddScalar:
        return (A.array() + n.c).matrix();
      case Op::MaxScalar:
        return A.cwiseMax(n.c);
      case Op::Transpose:
        return A.transpose();
      case Op::Reshape:
        return Eigen::Map<const Matrix>(A.data(), n.i0, n.i1);
      case Op::BroadcastRows:
        return A.replicate(n.i0, 1);
      case Op::BroadcastCols:
        return A.replicate(1, n.i1);
      case Op::BroadcastScalar:
        return Matrix::Constant(n.i0, n.i1, A(0, 0));
      case Op::Mask:
        return A.unaryExpr([c = n.c](double x) { return x > c ? 1.0 : 0.0; });
      case Op::Sign:
        return A.unaryExpr([](double x) { return static_cast<double>((x > 0.0) - (x < 0.0)); });
    }
    return {};
  }

  std::vector<Node> nodes_;
  std::vector<int> params_;
  std::vector<std::string> param_names_;
};

inline const Matrix& Var::value() const { return tape->value(id); }

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::MatMul: return "matmul";
    case Op::MatMulNT: return "matmul_nt";
    case Op::MatMulTN: return "matmul_tn";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::AddRow: return "add_row";
    case Op::Relu: return "relu";
    case Op::Sigmoid: return "sigmoid";
    case Op::Tanh: return "tanh";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Abs: return "abs";
    case Op::Recip: return "recip";
    case Op::Sqrt: return "sqrt";
    case Op::MeanRows: return "mean_rows";
    case Op::SumRows: return "sum_rows";
    case Op::SumCols: return "sum_cols";
    case Op::Sum: return "sum";
    case Op::ConcatCols: return "concat_cols";
    case Op::SliceCols: return "slice_cols";
    case Op::PadCols: return "pad_cols";
    case Op::Scale: return "scale";
    case Op::AddScalar: return "add_scalar";
    case Op::MaxScalar: return "max_scalar";
    case Op::Transpose: return "transpose";
    case Op::Reshape: return "reshape";
    case Op::BroadcastRows: return "broadcast_rows";
    case Op::BroadcastCols: return "broadcast_cols";
    case Op::BroadcastScalar: return "broadcast_scalar";
    case Op::Mask: return "mask";
    case Op::Sign: return "sign";
  }
  return "?";
}

inline void same_tape(const Var& x, const Var& y) {
  if (x.tape != y.tape) throw ContractError("operands live on different tapes");
}

// Op constructors.

inline Var unary(Op op, const Var& x, double c = 0.0, Eigen::Index i0 = 0, Eigen::Index i1 = 0) {
  return x.tape->record(op, x.id, -1, c, i0, i1);
}
inline Var binary(Op op, const Var& x, const Var& y) {
  same_tape(x, y);
  return x.tape->record(op, x.id, y.id);
}

inline Var matmul(const Var& x, const Var& y) { return binary(Op::MatMul, x, y); }
inline Var matmul_nt(const Var& x, const Var& y) { return binary(Op::MatMulNT, x, y); }
inline Var matmul_tn(const Var& x, const Var& y) { return binary(Op::MatMulTN, x, y); }
inline Var add(const Var& x, const Var& y) { return binary(Op::Add, x, y); }
inline Var sub(const Var& x, const Var& y) { return binary(Op::Sub, x, y); }
inline Var mul(const Var& x, const Var& y) { return binary(Op::Mul, x, y); }
inline Var add_row(const Var& x, const Var& row) { return binary(Op::AddRow, x, row); }
inline Var concat_cols(const Var& x, const Var& y) { return binary(Op::ConcatCols, x, y); }

inline Var relu(const Var& x) { return unary(Op::Relu, x); }
inline Var sigmoid(const Var& x) { return unary(Op::Sigmoid, x); }
inline Var tanh(const Var& x) { return unary(Op::Tanh, x); }
inline Var exp(const Var& x) { return unary(Op::Exp, x); }
inline Var log(const Var& x) { return unary(Op::Log, x); }
inline Var abs(const Var& x) { return unary(Op::Abs, x); }
inline Var recip(const Var& x) { return unary(Op::Recip, x); }
inline Var sqrt(const Var& x) { return unary(Op::Sqrt, x); }
inline Var mean_rows(const Var& x) { return unary(Op::MeanRows, x); }
inline Var sum_rows(const Var& x) { return unary(Op::SumRows, x); }
inline Var sum_cols(const Var& x) { return unary(Op::SumCols, x); }
inline Var sum(const Var& x) { return unary(Op::Sum, x); }
inline Var slice_cols(const Var& x, Eigen::Index begin, Eigen::Index end) { return unary(Op::SliceCols, x, 0.0, begin, end); }
inline Var pad_cols(const Var& x, Eigen::Index offset, Eigen::Index width) { return unary(Op::PadCols, x, 0.0, offset, width); }
inline Var scale(const Var& x, double c) { return unary(Op::Scale, x, c); }
inline Var add_scalar(const Var& x, double c) { return unary(Op::AddScalar, x, c); }
inline Var max_scalar(const Var& x, double c) { return unary(Op::MaxScalar, x, c); }
inline Var transpose(const Var& x) { return unary(Op::Transpose, x); }
inline Var reshape(const Var& x, Eigen::Index rows, Eigen::Index cols) { return unary(Op::Reshape, x, 0.0, rows, cols); }
inline Var broadcast_rows(const Var& x, Eigen::Index rows) { return unary(Op::BroadcastRows, x, 0.0, rows, 0); }
inline Var broadcast_cols(const Var& x, Eigen::Index cols) { return unary(Op::BroadcastCols, x, 0.0, 0, cols); }
inline Var broadcast_scalar(const Var& x, Eigen::Index rows, Eigen::Index cols) {
  return unary(Op::BroadcastScalar, x, 0.0, rows, cols);
}
inline Var mask_greater(const Var& x, double c) { return unary(Op::Mask, x, c); }
inline Var sign(const Var& x) { return unary(Op::Sign, x); }

inline Var operator+(const Var& x, const Var& y) { return add(x, y); }
inline Var operator-(const Var& x, const Var& y) { return sub(x, y); }
inline Var operator*(const Var& x, double c) { return scale(x, c); }
inline Var operator*(double c, const Var& x) { return scale(x, c); }
inline Var operator-(const Var& x) { return scale(x, -1.0); }

namespace detail {

/// Vector-Jacobian product of node `id` with upstream adjoint `g`, for parent
/// slot 0 (a) or 1 (b). Expressed with tape ops so it is differentiable.
inline Var vjp(Tape& t, int id, const Var& g, int slot) {
  // Recording below may reallocate the node array; keep copies of the fields.
  struct {
    Op op;
    int a, b;
    double c;
    Eigen::Index i0;
  } const n{t.node(id).op, t.node(id).a, t.node(id).b, t.node(id).c, t.node(id).i0};
  const Var a{&t, n.a};
  const Var b{&t, n.b};
  const Var out{&t, id};
  switch (n.op) {
    case Op::MatMul:
      return slot == 0 ? matmul_nt(g, b) : matmul_tn(a, g);
    case Op::MatMulNT:
      return slot == 0 ? matmul(g, b) : matmul_tn(g, a);
    case Op::MatMulTN:
      return slot == 0 ? matmul_nt(b, g) : matmul(a, g);
    case Op::Add:
      return g;
    case Op::Sub:
      return slot == 0 ? g : scale(g, -1.0);
    case Op::Mul:
      return slot == 0 ? mul(g, b) : mul(g, a);
    case Op::AddRow:
      return slot == 0 ? g : sum_rows(g);
    case Op::Relu:
      return mul(g, mask_greater(a, 0.0));
    case Op::Sigmoid:
      return mul(g, mul(out, add_scalar(scale(out, -1.0), 1.0)));
    case Op::Tanh:
      return mul(g, add_scalar(scale(mul(out, out), -1.0), 1.0));
    case Op::Exp:
      return mul(g, out);
    case Op::Log:
      return mul(mul(g, mask_greater(a, kLogFloor)), recip(max_scalar(a, kLogFloor)));
    case Op::Abs:
      return mul(g, sign(a));
    case Op::Recip:
      return scale(mul(g, mul(out, out)), -1.0);
    case Op::Sqrt:
      return scale(mul(g, recip(out)), 0.5);
    case Op::MeanRows:
      return scale(broadcast_rows(g, a.rows()), 1.0 / static_cast<double>(a.rows()));
    case Op::SumRows:
      return broadcast_rows(g, a.rows());
    case Op::SumCols:
      return broadcast_cols(g, a.cols());
    case Op::Sum:
      return broadcast_scalar(g, a.rows(), a.cols());
    case Op::ConcatCols:
      return slot == 0 ? slice_cols(g, 0, a.cols()) : slice_cols(g, a.cols(), a.cols() + b.cols());
    case Op::SliceCols:
      return pad_cols(g, n.i0, a.cols());
    case Op::PadCols:
      return slice_cols(g, n.i0, n.i0 + a.cols());
    case Op::Scale:
      return scale(g, n.c);
    case Op::AddScalar:
      return g;
    case Op::MaxScalar:
      return mul(g, mask_greater(a, n.c));
    case Op::Transpose:
      return transpose(g);
    case Op::Reshape:
      return reshape(g, a.rows(), a.cols());
    case Op::BroadcastRows:
      return sum_rows(g);
    case Op::BroadcastCols:
      return sum_cols(g);
    case Op::BroadcastScalar:
      return sum(g);
    case Op::Leaf:
    case Op::Mask:
    case Op::Sign:
      break;
  }
  throw ContractError(std::string("vjp: op has no derivative: ") + op_name(n.op));
}

}  // namespace detail

/// Gradients of scalar `output` with respect to each node in `wrt`.
///
/// With create_graph the returned gradients are tape nodes that can be
/// differentiated again. Otherwise the scratch nodes are discarded and the
/// gradients come back as constants appended to the tape.
inline std::vector<Var> grad(const Var& output, std::span<const Var> wrt, bool create_graph) {
  Tape& t = *output.tape;
  if (output.rows() != 1 || output.cols() != 1)
    throw ContractError("grad: output must be a scalar (1x1), got " + shape_str(output.value()));
  for (const auto& w : wrt) same_tape(output, w);

  const std::size_t n_before = t.size();
  const int out = output.id;
  int lo = out;
  for (const auto& w : wrt) lo = std::min(lo, w.id);

  // Nodes in [lo, out] that depend on some wrt node.
  std::vector<char> relevant(static_cast<std::size_t>(out - lo + 1), 0);
  auto rel = [&](int id) { return id >= lo && id <= out && relevant[static_cast<std::size_t>(id - lo)]; };
  for (const auto& w : wrt)
    if (w.id <= out) relevant[static_cast<std::size_t>(w.id - lo)] = 1;
  for (int id = lo; id <= out; ++id) {
    const Node& n = t.node(id);
    if (n.op == Op::Leaf || is_constant_op(n.op)) continue;
    if (rel(n.a) || (n.b >= 0 && rel(n.b))) relevant[static_cast<std::size_t>(id - lo)] = 1;
  }

  std::vector<int> adj(static_cast<std::size_t>(out - lo + 1), -1);
  auto accumulate = [&](int id, const Var& g) {
    int& slot = adj[static_cast<std::size_t>(id - lo)];
    slot = slot < 0 ? g.id : add(Var{&t, slot}, g).id;
  };
  if (rel(out)) adj.back() = t.scalar(1.0).id;

  for (int id = out; id >= lo; --id) {
    const int g_id = adj[static_cast<std::size_t>(id - lo)];
    if (g_id < 0) continue;
    const Node& n = t.node(id);
    if (n.op == Op::Leaf || is_constant_op(n.op)) continue;
    const int a = n.a;
    const int b = n.b;
    const Var g{&t, g_id};
    if (rel(a)) accumulate(a, detail::vjp(t, id, g, 0));
    if (b >= 0 && rel(b)) accumulate(b, detail::vjp(t, id, g, 1));
  }

  std::vector<Var> result;
  result.reserve(wrt.size());
  if (create_graph) {
    for (const auto& w : wrt) {
      const int g = w.id <= out ? adj[static_cast<std::size_t>(w.id - lo)] : -1;
      result.push_back(g >= 0 ? Var{&t, g} : t.constant(Matrix::Zero(w.rows(), w.cols())));
    }
    return result;
  }
  std::vector<Matrix> values;
  values.reserve(wrt.size());
  for (const auto& w : wrt) {
    const int g = w.id <= out ? adj[static_cast<std::size_t>(w.id - lo)] : -1;
    values.push_back(g >= 0 ? t.value(g) : Matrix::Zero(w.rows(), w.cols()));
  }
  t.truncate(n_before);
  for (auto& v : values) result.push_back(t.constant(std::move(v)));
  return result;
}

/// Gradient values only; the tape is left exactly as it was.
inline std::vector<Matrix> grad_values(const Var& output, std::span<const Var> wrt) {
  Tape& t = *output.tape;
  const std::size_t n_before = t.size();
  auto g = grad(output, wrt, false);
  std::vector<Matrix> out;
  out.reserve(g.size());
  for (auto& v : g) out.push_back(v.value());
  t.truncate(n_before);
  return out;
}

}  // namespace ad
}  // namespace magad
