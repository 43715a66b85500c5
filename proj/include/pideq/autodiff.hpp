#pragma once

// Tape-based reverse-mode automatic differentiation over dense matrices.
//
// Every backward rule is itself expressed with recorded operations, so the
// gradients returned with `create_graph = true` are ordinary tape nodes that
// can be differentiated again (reverse-over-reverse).

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace pideq::ad {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

enum class OpKind {
  Leaf,
  Add,
  Sub,
  Mul,             // elementwise
  Div,             // elementwise
  Scale,           // x * attrs.scalar
  AddScalar,       // x + attrs.scalar
  MatMul,          // op(x) * op(y), op selected by transpose flags
  Transpose,
  Tanh,
  Sqrt,
  Sum,             // -> 1x1
  Mean,            // -> 1x1
  SquaredNorm,     // sum of squares -> 1x1
  L1Norm,          // sum of absolute values -> 1x1
  FrobeniusNorm,   // sqrt of sum of squares -> 1x1
  RepeatCols,      // n x 1 -> n x attrs.cols
  SumRows,         // n x m -> n x 1 (sum along each row)
  RepeatRows,      // 1 x m -> attrs.rows x m
  SumCols,         // n x m -> 1 x m (sum along each column)
  BroadcastScalar, // 1x1 -> attrs.rows x attrs.cols
  ConcatRows,      // vertical stack of any number of operands
  SliceRows,       // rows [offset, offset + rows)
  PadRows,         // embed into zeros with attrs.rows total rows at offset
  Custom,
};

std::string_view to_string(OpKind kind);

struct OpAttributes {
  double scalar = 0.0;
  Index rows = 0;
  Index cols = 0;
  Index offset = 0;
  bool transpose_lhs = false;
  bool transpose_rhs = false;
};

class Tape;

/// Handle to a node of a tape. Cheap to copy; only valid while the node
/// exists on its tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  [[nodiscard]] bool valid() const { return tape_ != nullptr; }
  [[nodiscard]] std::size_t id() const { return id_; }
  [[nodiscard]] Tape& tape() const { return *tape_; }
  [[nodiscard]] const Matrix& value() const;
  [[nodiscard]] Index rows() const { return value().rows(); }
  [[nodiscard]] Index cols() const { return value().cols(); }
  /// Value of a 1x1 node.
  [[nodiscard]] double scalar() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// User-defined node. The backward rule must record its result on the tape
/// (so that it stays differentiable). `needs[i]` tells whether operand i
/// requires a cotangent; entries for which it is false may be left empty.
class CustomOp {
 public:
  virtual ~CustomOp() = default;
  [[nodiscard]] virtual std::string_view name() const = 0;
  virtual std::vector<std::optional<Var>> vjp(Tape& tape, Var self,
                                              std::span<const Var> operands,
                                              Var cotangent,
                                              std::span<const bool> needs) const = 0;
};

struct Node {
  OpKind kind = OpKind::Leaf;
  std::vector<std::size_t> operands;
  Matrix value;
  OpAttributes attrs;
  std::shared_ptr<const CustomOp> custom;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// A leaf node; any leaf may later be used as a gradient input.
  Var leaf(Matrix value);
  Var scalar(double value);
  Var vector(const Vector& value);

  /// Records `kind` applied to `operands`. Throws ShapeError on incompatible
  /// shapes, std::invalid_argument for Leaf/Custom (use `leaf`/`record_custom`)
  /// and NumericalError on non-finite results in guard mode.
  Var record(OpKind kind, std::span<const Var> operands, const OpAttributes& attrs = {});
  Var record(OpKind kind, std::initializer_list<Var> operands, const OpAttributes& attrs = {}) {
    return record(kind, std::span<const Var>(operands.begin(), operands.size()), attrs);
  }
  Var record_custom(std::shared_ptr<const CustomOp> op, std::span<const Var> operands, Matrix value);

  [[nodiscard]] const Node& node(std::size_t id) const { return nodes_.at(id); }
  [[nodiscard]] std::size_t size() const { return nodes_.size(); }
  [[nodiscard]] bool owns(const Var& v) const { return v.valid() && &v.tape() == this && v.id() < nodes_.size(); }

  /// Drops every node with id >= `size`.
  void truncate(std::size_t size);
  void clear() { nodes_.clear(); }

  void set_guard(bool on) { guard_ = on; }
  [[nodiscard]] bool guard() const { return guard_; }

 private:
  Var push(Node node);

  std::vector<Node> nodes_;
  bool guard_ = true;
};

/// Gradients keyed by input node. Missing entries are structural zeros.
class GradientMap {
 public:
  void set(std::size_t input_id, Var grad) { entries_.emplace_back(input_id, grad); }
  [[nodiscard]] bool contains(const Var& input) const;
  /// Gradient node; throws std::out_of_range for structural zeros.
  [[nodiscard]] Var at(const Var& input) const;
  /// Gradient value, zeros shaped like `input` when structurally zero.
  [[nodiscard]] Matrix value(const Var& input) const;

 private:
  std::vector<std::pair<std::size_t, Var>> entries_;
};

/// d output / d inputs for a scalar (1x1) output. With `create_graph` the
/// returned gradients are differentiable tape nodes; otherwise the
/// intermediate backward nodes are discarded and the gradients are stored
/// as constant leaves.
GradientMap gradient(Tape& tape, Var output, std::span<const Var> inputs, bool create_graph = false);
inline GradientMap gradient(Tape& tape, Var output, std::initializer_list<Var> inputs,
                            bool create_graph = false) {
  return gradient(tape, output, std::span<const Var>(inputs.begin(), inputs.size()), create_graph);
}

/// Matrix of mixed partials H(i, j) = d^2 output / d first_i d second_j,
/// with entries enumerated in column-major order of each input.
Matrix second_gradient(Tape& tape, Var output, Var first, Var second);
inline Matrix second_gradient(Tape& tape, Var output, Var input) {
  return second_gradient(tape, output, input, input);
}

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h.
Vector finite_difference_gradient(const std::function<double(const Vector&)>& f, const Vector& x,
                                  double h);

// Recording helpers.
Var operator+(Var x, Var y);
Var operator-(Var x, Var y);
Var operator-(Var x);
Var operator*(double c, Var x);
Var operator*(Var x, double c);
Var operator+(Var x, double c);
Var operator+(double c, Var x);
Var operator-(double c, Var x);
Var operator-(Var x, double c);
Var hadamard(Var x, Var y);
Var divide(Var x, Var y);
Var matmul(Var x, Var y, bool transpose_lhs = false, bool transpose_rhs = false);
Var transpose(Var x);
Var tanh(Var x);
Var sqrt(Var x);
Var sum(Var x);
Var mean(Var x);
Var squared_norm(Var x);
Var l1_norm(Var x);
Var frobenius_norm(Var x);
Var repeat_cols(Var column, Index count);
Var sum_rows(Var x);
Var repeat_rows(Var row, Index count);
Var sum_cols(Var x);
Var broadcast(Var scalar, Index rows, Index cols);
Var concat_rows(std::span<const Var> parts);
Var concat_rows(std::initializer_list<Var> parts);
Var slice_rows(Var x, Index offset, Index count);
Var pad_rows(Var x, Index offset, Index total_rows);
/// x * s for a 1x1 node s.
Var scale_by(Var x, Var s);

/// Largest per-column change ||a_j - b_j|| / max(1, ||a_j||) between two
/// successive iterates; used by iterative solvers running on the tape.
double fixed_point_change(const Var& next, const Var& previous);

}  // namespace pideq::ad
