#include "pideq/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "pideq/errors.hpp"

namespace pideq::ad {
namespace {

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

[[noreturn]] void shape_error(OpKind kind, const std::string& detail) {
  throw ShapeError(std::string(to_string(kind)) + ": " + detail);
}

void require_arity(OpKind kind, std::size_t got, std::size_t expected) {
  if (got != expected) {
    shape_error(kind, "expected " + std::to_string(expected) + " operands, got " + std::to_string(got));
  }
}

void require_same_shape(OpKind kind, const Matrix& x, const Matrix& y) {
  if (x.rows() != y.rows() || x.cols() != y.cols()) {
    shape_error(kind, "operand shapes " + shape_str(x) + " and " + shape_str(y) + " differ");
  }
}

Matrix scalar_matrix(double v) { return Matrix::Constant(1, 1, v); }

Matrix evaluate(OpKind kind, const std::vector<const Matrix*>& in, const OpAttributes& at) {
  switch (kind) {
    case OpKind::Add:
      require_arity(kind, in.size(), 2);
      require_same_shape(kind, *in[0], *in[1]);
      return *in[0] + *in[1];
    case OpKind::Sub:
      require_arity(kind, in.size(), 2);
      require_same_shape(kind, *in[0], *in[1]);
      return *in[0] - *in[1];
    case OpKind::Mul:
      require_arity(kind, in.size(), 2);
      require_same_shape(kind, *in[0], *in[1]);
      return in[0]->cwiseProduct(*in[1]);
    case OpKind::Div:
      require_arity(kind, in.size(), 2);
      require_same_shape(kind, *in[0], *in[1]);
      return in[0]->cwiseQuotient(*in[1]);
    case OpKind::Scale:
      require_arity(kind, in.size(), 1);
      return *in[0] * at.scalar;
    case OpKind::AddScalar:
      require_arity(kind, in.size(), 1);
      return (in[0]->array() + at.scalar).matrix();
    case OpKind::MatMul: {
      require_arity(kind, in.size(), 2);
      const Matrix& x = *in[0];
      const Matrix& y = *in[1];
      const Index inner_x = at.transpose_lhs ? x.rows() : x.cols();
      const Index inner_y = at.transpose_rhs ? y.cols() : y.rows();
      if (inner_x != inner_y) {
        shape_error(kind, "inner dimensions differ for " + shape_str(x) + " and " + shape_str(y));
      }
      if (at.transpose_lhs && at.transpose_rhs) return x.transpose() * y.transpose();
      if (at.transpose_lhs) return x.transpose() * y;
      if (at.transpose_rhs) return x * y.transpose();
      return x * y;
    }
    case OpKind::Transpose:
      require_arity(kind, in.size(), 1);
      return in[0]->transpose();
    case OpKind::Tanh:
      require_arity(kind, in.size(), 1);
      return in[0]->array().tanh().matrix();
    case OpKind::Sqrt:
      require_arity(kind, in.size(), 1);
      return in[0]->array().sqrt().matrix();
    case OpKind::Sum:
      require_arity(kind, in.size(), 1);
      return scalar_matrix(in[0]->sum());
    case OpKind::Mean:
      require_arity(kind, in.size(), 1);
      if (in[0]->size() == 0) shape_error(kind, "empty operand");
      return scalar_matrix(in[0]->mean());
    case OpKind::SquaredNorm:
      require_arity(kind, in.size(), 1);
      return scalar_matrix(in[0]->squaredNorm());
    case OpKind::L1Norm:
      require_arity(kind, in.size(), 1);
      return scalar_matrix(in[0]->cwiseAbs().sum());
    case OpKind::FrobeniusNorm:
      require_arity(kind, in.size(), 1);
      return scalar_matrix(in[0]->norm());
    case OpKind::RepeatCols:
      require_arity(kind, in.size(), 1);
      if (in[0]->cols() != 1) shape_error(kind, "operand must be a column, got " + shape_str(*in[0]));
      if (at.cols < 1) shape_error(kind, "count must be positive");
      return in[0]->replicate(1, at.cols);
    case OpKind::SumRows:
      require_arity(kind, in.size(), 1);
      return in[0]->rowwise().sum();
    case OpKind::RepeatRows:
      require_arity(kind, in.size(), 1);
      if (in[0]->rows() != 1) shape_error(kind, "operand must be a row, got " + shape_str(*in[0]));
      if (at.rows < 1) shape_error(kind, "count must be positive");
      return in[0]->replicate(at.rows, 1);
    case OpKind::SumCols:
      require_arity(kind, in.size(), 1);
      return in[0]->colwise().sum();
    case OpKind::BroadcastScalar:
      require_arity(kind, in.size(), 1);
      if (in[0]->size() != 1) shape_error(kind, "operand must be 1x1, got " + shape_str(*in[0]));
      if (at.rows < 1 || at.cols < 1) shape_error(kind, "target shape must be positive");
      return Matrix::Constant(at.rows, at.cols, (*in[0])(0, 0));
    case OpKind::ConcatRows: {
      if (in.empty()) shape_error(kind, "needs at least one operand");
      const Index cols = in[0]->cols();
      Index rows = 0;
      for (const Matrix* m : in) {
        if (m->cols() != cols) shape_error(kind, "column counts differ");
        rows += m->rows();
      }
      Matrix out(rows, cols);
      Index r = 0;
      for (const Matrix* m : in) {
        out.middleRows(r, m->rows()) = *m;
        r += m->rows();
      }
      return out;
    }
    case OpKind::SliceRows:
      require_arity(kind, in.size(), 1);
      if (at.offset < 0 || at.rows < 1 || at.offset + at.rows > in[0]->rows()) {
        shape_error(kind, "row range out of bounds for " + shape_str(*in[0]));
      }
      return in[0]->middleRows(at.offset, at.rows);
    case OpKind::PadRows: {
      require_arity(kind, in.size(), 1);
      if (at.offset < 0 || at.offset + in[0]->rows() > at.rows) {
        shape_error(kind, "padding target too small for " + shape_str(*in[0]));
      }
      Matrix out = Matrix::Zero(at.rows, in[0]->cols());
      out.middleRows(at.offset, in[0]->rows()) = *in[0];
      return out;
    }
    case OpKind::Leaf:
    case OpKind::Custom:
      break;
  }
  throw std::invalid_argument("unsupported operation kind for record(): " + std::string(to_string(kind)));
}

Var constant_like(Tape& tape, Matrix value) { return tape.leaf(std::move(value)); }

// Backward rule of a built-in node: cotangents for each operand, recorded on
// the tape.
std::vector<std::optional<Var>> builtin_vjp(Tape& tape, std::size_t id, Var g,
                                            const std::vector<bool>& needs) {
  // Copy what we need: recording may reallocate the node storage.
  const OpKind kind = tape.node(id).kind;
  const OpAttributes at = tape.node(id).attrs;
  std::vector<Var> x;
  for (std::size_t op : tape.node(id).operands) x.emplace_back(&tape, op);
  const Var self(&tape, id);

  std::vector<std::optional<Var>> out(x.size());
  auto need = [&](std::size_t i) { return needs[i]; };

  switch (kind) {
    case OpKind::Add:
      if (need(0)) out[0] = g;
      if (need(1)) out[1] = g;
      break;
    case OpKind::Sub:
      if (need(0)) out[0] = g;
      if (need(1)) out[1] = -g;
      break;
    case OpKind::Mul:
      if (need(0)) out[0] = hadamard(g, x[1]);
      if (need(1)) out[1] = hadamard(g, x[0]);
      break;
    case OpKind::Div:
      if (need(0)) out[0] = divide(g, x[1]);
      if (need(1)) out[1] = -divide(hadamard(g, self), x[1]);
      break;
    case OpKind::Scale:
      out[0] = g * at.scalar;
      break;
    case OpKind::AddScalar:
      out[0] = g;
      break;
    case OpKind::MatMul: {
      const bool tl = at.transpose_lhs;
      const bool tr = at.transpose_rhs;
      if (need(0)) out[0] = tl ? matmul(x[1], g, tr, true) : matmul(g, x[1], false, !tr);
      if (need(1)) out[1] = tr ? matmul(g, x[0], true, tl) : matmul(x[0], g, !tl, false);
      break;
    }
    case OpKind::Transpose:
      out[0] = transpose(g);
      break;
    case OpKind::Tanh:
      out[0] = hadamard(g, 1.0 - hadamard(self, self));
      break;
    case OpKind::Sqrt:
      if ((self.value().array() == 0.0).any()) {
        // Subgradient 0 where the root vanishes; the factor is then a constant.
        Matrix factor = self.value().unaryExpr([](double r) { return r == 0.0 ? 0.0 : 0.5 / r; });
        out[0] = hadamard(g, constant_like(tape, std::move(factor)));
      } else {
        out[0] = divide(g, self * 2.0);
      }
      break;
    case OpKind::Sum:
      out[0] = broadcast(g, x[0].rows(), x[0].cols());
      break;
    case OpKind::Mean:
      out[0] = broadcast(g, x[0].rows(), x[0].cols()) * (1.0 / static_cast<double>(x[0].value().size()));
      break;
    case OpKind::SquaredNorm:
      out[0] = hadamard(broadcast(g, x[0].rows(), x[0].cols()), x[0] * 2.0);
      break;
    case OpKind::L1Norm: {
      Matrix sign = x[0].value().unaryExpr([](double v) { return static_cast<double>((v > 0.0) - (v < 0.0)); });
      out[0] = hadamard(broadcast(g, x[0].rows(), x[0].cols()), constant_like(tape, std::move(sign)));
      break;
    }
    case OpKind::FrobeniusNorm:
      if (self.scalar() == 0.0) {
        // Subgradient 0 at the origin.
        out[0] = constant_like(tape, Matrix::Zero(x[0].rows(), x[0].cols()));
      } else {
        out[0] = hadamard(broadcast(divide(g, self), x[0].rows(), x[0].cols()), x[0]);
      }
      break;
    case OpKind::RepeatCols:
      out[0] = sum_rows(g);
      break;
    case OpKind::SumRows:
      out[0] = repeat_cols(g, x[0].cols());
      break;
    case OpKind::RepeatRows:
      out[0] = sum_cols(g);
      break;
    case OpKind::SumCols:
      out[0] = repeat_rows(g, x[0].rows());
      break;
    case OpKind::BroadcastScalar:
      out[0] = sum(g);
      break;
    case OpKind::ConcatRows: {
      Index r = 0;
      for (std::size_t i = 0; i < x.size(); ++i) {
        const Index rows = x[i].rows();
        if (need(i)) out[i] = slice_rows(g, r, rows);
        r += rows;
      }
      break;
    }
    case OpKind::SliceRows:
      out[0] = pad_rows(g, at.offset, x[0].rows());
      break;
    case OpKind::PadRows:
      out[0] = slice_rows(g, at.offset, x[0].rows());
      break;
    case OpKind::Custom: {
      const std::shared_ptr<const CustomOp> custom = tape.node(id).custom;
      // std::vector<bool> is not contiguous.
      auto flags = std::make_unique<bool[]>(needs.size());
      for (std::size_t i = 0; i < needs.size(); ++i) flags[i] = needs[i];
      out = custom->vjp(tape, self, x, g, std::span<const bool>(flags.get(), needs.size()));
      if (out.size() != x.size()) {
        throw std::logic_error("custom op '" + std::string(custom->name()) + "' returned wrong cotangent count");
      }
      break;
    }
    case OpKind::Leaf:
      break;
  }
  return out;
}

}  // namespace

std::string_view to_string(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Div: return "div";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::MatMul: return "matmul";
    case OpKind::Transpose: return "transpose";
    case OpKind::Tanh: return "tanh";
    case OpKind::Sqrt: return "sqrt";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::SquaredNorm: return "squared_norm";
    case OpKind::L1Norm: return "l1_norm";
    case OpKind::FrobeniusNorm: return "frobenius_norm";
    case OpKind::RepeatCols: return "repeat_cols";
    case OpKind::SumRows: return "sum_rows";
    case OpKind::RepeatRows: return "repeat_rows";
    case OpKind::SumCols: return "sum_cols";
    case OpKind::BroadcastScalar: return "broadcast";
    case OpKind::ConcatRows: return "concat_rows";
    case OpKind::SliceRows: return "slice_rows";
    case OpKind::PadRows: return "pad_rows";
    case OpKind::Custom: return "custom";
  }
  return "unknown";
}

const Matrix& Var::value() const { return tape_->node(id_).value; }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw ShapeError("expected a 1x1 node, got " + shape_str(v));
  return v(0, 0);
}

Var Tape::push(Node node) {
  if (guard_ && !node.value.allFinite()) {
    const auto kind = node.kind == OpKind::Custom && node.custom ? node.custom->name() : to_string(node.kind);
    throw NumericalError("non-finite value recorded by '" + std::string(kind) + "'");
  }
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::leaf(Matrix value) {
  Node n;
  n.kind = OpKind::Leaf;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::scalar(double value) { return leaf(Matrix::Constant(1, 1, value)); }

Var Tape::vector(const Vector& value) { return leaf(Matrix(value)); }

Var Tape::record(OpKind kind, std::span<const Var> operands, const OpAttributes& attrs) {
  std::vector<const Matrix*> in;
  in.reserve(operands.size());
  Node n;
  n.kind = kind;
  n.attrs = attrs;
  n.operands.reserve(operands.size());
  for (const Var& v : operands) {
    if (!owns(v)) throw std::invalid_argument("operand does not belong to this tape");
    in.push_back(&nodes_[v.id()].value);
    n.operands.push_back(v.id());
  }
  n.value = evaluate(kind, in, attrs);
  return push(std::move(n));
}

Var Tape::record_custom(std::shared_ptr<const CustomOp> op, std::span<const Var> operands, Matrix value) {
  if (!op) throw std::invalid_argument("custom op must not be null");
  Node n;
  n.kind = OpKind::Custom;
  n.custom = std::move(op);
  n.value = std::move(value);
  for (const Var& v : operands) {
    if (!owns(v)) throw std::invalid_argument("operand does not belong to this tape");
    n.operands.push_back(v.id());
  }
  return push(std::move(n));
}

void Tape::truncate(std::size_t size) {
  if (size < nodes_.size()) nodes_.resize(size);
}

bool GradientMap::contains(const Var& input) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == input.id(); });
}

Var GradientMap::at(const Var& input) const {
  for (const auto& [id, g] : entries_) {
    if (id == input.id()) return g;
  }
  throw std::out_of_range("gradient is structurally zero");
}

Matrix GradientMap::value(const Var& input) const {
  for (const auto& [id, g] : entries_) {
    if (id == input.id()) return g.value();
  }
  return Matrix::Zero(input.rows(), input.cols());
}

GradientMap gradient(Tape& tape, Var output, std::span<const Var> inputs, bool create_graph) {
  if (!tape.owns(output)) throw std::invalid_argument("output does not belong to this tape");
  if (output.value().size() != 1) throw ShapeError("gradient output must be a scalar node");
  for (const Var& v : inputs) {
    if (!tape.owns(v)) throw std::invalid_argument("gradient input does not belong to this tape");
  }

  GradientMap result;
  if (inputs.empty()) return result;
  const std::size_t top = output.id();
  std::size_t low = top + 1;
  for (const Var& v : inputs) low = std::min(low, v.id());
  if (low > top) return result;

  const std::size_t start = tape.size();
  const std::size_t span_size = top - low + 1;
  // reach[i]: node low + i depends on at least one input.
  std::vector<char> reach(span_size, 0);
  for (const Var& v : inputs) {
    if (v.id() <= top) reach[v.id() - low] = 1;
  }
  for (std::size_t i = low; i <= top; ++i) {
    if (reach[i - low]) continue;
    for (std::size_t op : tape.node(i).operands) {
      if (op >= low && reach[op - low]) {
        reach[i - low] = 1;
        break;
      }
    }
  }

  std::vector<std::optional<Var>> adj(span_size);
  adj[top - low] = tape.scalar(1.0);
  for (std::size_t i = top + 1; i-- > low;) {
    if (!reach[i - low] || !adj[i - low]) continue;
    if (tape.node(i).kind == OpKind::Leaf) continue;
    const std::vector<std::size_t> operands = tape.node(i).operands;
    std::vector<bool> needs(operands.size());
    bool any = false;
    for (std::size_t k = 0; k < operands.size(); ++k) {
      needs[k] = operands[k] >= low && reach[operands[k] - low];
      any = any || needs[k];
    }
    if (!any) continue;
    auto cots = builtin_vjp(tape, i, *adj[i - low], needs);
    for (std::size_t k = 0; k < operands.size(); ++k) {
      if (!needs[k] || !cots[k]) continue;
      auto& slot = adj[operands[k] - low];
      slot = slot ? (*slot + *cots[k]) : *cots[k];
    }
  }

  if (create_graph) {
    for (const Var& v : inputs) {
      if (v.id() <= top && adj[v.id() - low]) result.set(v.id(), *adj[v.id() - low]);
    }
    return result;
  }

  std::vector<std::pair<std::size_t, Matrix>> values;
  for (const Var& v : inputs) {
    if (v.id() <= top && adj[v.id() - low]) values.emplace_back(v.id(), adj[v.id() - low]->value());
  }
  tape.truncate(start);
  for (auto& [id, value] : values) result.set(id, tape.leaf(std::move(value)));
  return result;
}

Matrix second_gradient(Tape& tape, Var output, Var first, Var second) {
  const std::size_t start = tape.size();
  const GradientMap g1 = gradient(tape, output, {first}, true);
  Matrix h = Matrix::Zero(first.value().size(), second.value().size());
  if (!g1.contains(first)) {
    tape.truncate(start);
    return h;
  }
  const Var grad = g1.at(first);
  for (Index i = 0; i < grad.value().size(); ++i) {
    Matrix pick = Matrix::Zero(grad.rows(), grad.cols());
    pick(i) = 1.0;
    const Var component = sum(hadamard(grad, tape.leaf(std::move(pick))));
    const GradientMap g2 = gradient(tape, component, {second}, false);
    const Matrix row = g2.value(second);
    h.row(i) = Eigen::Map<const Eigen::RowVectorXd>(row.data(), row.size());
  }
  tape.truncate(start);
  return h;
}

Vector finite_difference_gradient(const std::function<double(const Vector&)>& f, const Vector& x, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite difference step must be positive");
  Vector grad(x.size());
  Vector probe = x;
  for (Index i = 0; i < x.size(); ++i) {
    probe(i) = x(i) + h;
    const double up = f(probe);
    probe(i) = x(i) - h;
    const double down = f(probe);
    probe(i) = x(i);
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericalError("non-finite function value in finite differences at coordinate " + std::to_string(i));
    }
    grad(i) = (up - down) / (2.0 * h);
  }
  return grad;
}

Var operator+(Var x, Var y) { return x.tape().record(OpKind::Add, {x, y}); }
Var operator-(Var x, Var y) { return x.tape().record(OpKind::Sub, {x, y}); }
Var operator-(Var x) { return x * -1.0; }
Var operator*(Var x, double c) {
  OpAttributes at;
  at.scalar = c;
  return x.tape().record(OpKind::Scale, {x}, at);
}
Var operator*(double c, Var x) { return x * c; }
Var operator+(Var x, double c) {
  OpAttributes at;
  at.scalar = c;
  return x.tape().record(OpKind::AddScalar, {x}, at);
}
Var operator+(double c, Var x) { return x + c; }
Var operator-(double c, Var x) { return (x * -1.0) + c; }
Var operator-(Var x, double c) { return x + (-c); }
Var hadamard(Var x, Var y) { return x.tape().record(OpKind::Mul, {x, y}); }
Var divide(Var x, Var y) { return x.tape().record(OpKind::Div, {x, y}); }
Var matmul(Var x, Var y, bool transpose_lhs, bool transpose_rhs) {
  OpAttributes at;
  at.transpose_lhs = transpose_lhs;
  at.transpose_rhs = transpose_rhs;
  return x.tape().record(OpKind::MatMul, {x, y}, at);
}
Var transpose(Var x) { return x.tape().record(OpKind::Transpose, {x}); }
Var tanh(Var x) { return x.tape().record(OpKind::Tanh, {x}); }
Var sqrt(Var x) { return x.tape().record(OpKind::Sqrt, {x}); }
Var sum(Var x) { return x.tape().record(OpKind::Sum, {x}); }
Var mean(Var x) { return x.tape().record(OpKind::Mean, {x}); }
Var squared_norm(Var x) { return x.tape().record(OpKind::SquaredNorm, {x}); }
Var l1_norm(Var x) { return x.tape().record(OpKind::L1Norm, {x}); }
Var frobenius_norm(Var x) { return x.tape().record(OpKind::FrobeniusNorm, {x}); }
Var repeat_cols(Var column, Index count) {
  OpAttributes at;
  at.cols = count;
  return column.tape().record(OpKind::RepeatCols, {column}, at);
}
Var sum_rows(Var x) { return x.tape().record(OpKind::SumRows, {x}); }
Var repeat_rows(Var row, Index count) {
  OpAttributes at;
  at.rows = count;
  return row.tape().record(OpKind::RepeatRows, {row}, at);
}
Var sum_cols(Var x) { return x.tape().record(OpKind::SumCols, {x}); }
Var broadcast(Var scalar, Index rows, Index cols) {
  OpAttributes at;
  at.rows = rows;
  at.cols = cols;
  return scalar.tape().record(OpKind::BroadcastScalar, {scalar}, at);
}
Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: needs at least one operand");
  return parts.front().tape().record(OpKind::ConcatRows, parts);
}
Var concat_rows(std::initializer_list<Var> parts) {
  return concat_rows(std::span<const Var>(parts.begin(), parts.size()));
}
Var slice_rows(Var x, Index offset, Index count) {
  OpAttributes at;
  at.offset = offset;
  at.rows = count;
  return x.tape().record(OpKind::SliceRows, {x}, at);
}
Var pad_rows(Var x, Index offset, Index total_rows) {
  OpAttributes at;
  at.offset = offset;
  at.rows = total_rows;
  return x.tape().record(OpKind::PadRows, {x}, at);
}
Var scale_by(Var x, Var s) { return hadamard(x, broadcast(s, x.rows(), x.cols())); }

double fixed_point_change(const Var& next, const Var& previous) {
  const Matrix& a = next.value();
  const Matrix& b = previous.value();
  double worst = 0.0;
  for (Index j = 0; j < a.cols(); ++j) {
    const double change = (a.col(j) - b.col(j)).norm() / std::max(1.0, a.col(j).norm());
    if (std::isnan(change)) return change;
    worst = std::max(worst, change);
  }
  return worst;
}

}  // namespace pideq::ad
