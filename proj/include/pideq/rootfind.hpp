#pragma once

// Fixed-point solvers for z = g(z) and the iterative linear scheme used by
// the differentiable backward pass.

#include <cmath>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace pideq::rootfind {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

enum class Method { Simple, Anderson, Broyden, Newton };

std::string_view to_string(Method method);
/// Throws ConfigError for unknown names.
Method parse_method(std::string_view name);

struct SolverConfig {
  Method method = Method::Anderson;
  double tolerance = 1e-4;
  int max_iterations = 200;
  int anderson_memory = 5;
  double anderson_damping = 1.0;
  /// Added to the diagonal of the Anderson normal equations.
  double anderson_regularization = 1e-10;
  /// Residual norm beyond which an iteration is declared divergent.
  double divergence_threshold = 1e8;
  bool keep_trace = false;

  /// Throws ConfigError on out-of-range fields.
  void validate() const;
};

struct SolverResult {
  Vector solution;
  /// Number of updates applied to the initial guess.
  int iterations = 0;
  /// Number of calls to g.
  int evaluations = 0;
  /// ||g(z) - z|| / max(1, ||z||) at the returned solution; this is the
  /// quantity compared against the tolerance.
  double residual_norm = 0.0;
  /// ||g(z) - z|| at the returned solution.
  double absolute_residual = 0.0;
  bool converged = false;
  std::string diagnostic;
  std::vector<double> trace;
};

using FixedPointMap = std::function<Vector(const Vector&)>;
using JacobianMap = std::function<Matrix(const Vector&)>;

/// ||g(z) - z|| / max(1, ||z||).
double relative_residual(const Vector& gz, const Vector& z);

SolverResult simple_iteration(const FixedPointMap& g, Vector z0, const SolverConfig& cfg);
SolverResult anderson(const FixedPointMap& g, Vector z0, const SolverConfig& cfg);
/// "Good" Broyden on r(z) = g(z) - z with inverse Jacobian estimate
/// initialised to -I.
SolverResult broyden(const FixedPointMap& g, Vector z0, const SolverConfig& cfg);
/// Solves (dg/dz - I) dz = -(g(z) - z) each step. Throws NumericalError when
/// dg/dz - I is singular.
SolverResult newton(const FixedPointMap& g, const JacobianMap& jacobian, Vector z0, const SolverConfig& cfg);

/// Dispatches on cfg.method. `jacobian` is only consulted by Newton.
SolverResult solve(const FixedPointMap& g, const JacobianMap& jacobian, Vector z0, const SolverConfig& cfg);

template <typename V>
struct LinearSolveResult {
  V solution;
  int iterations = 0;
  bool converged = false;
  double last_change = 0.0;
};

/// Largest per-column ||a_j - b_j|| / max(1, ||a_j||).
double fixed_point_change(const Matrix& next, const Matrix& previous);
inline double fixed_point_change(const Vector& next, const Vector& previous) {
  return fixed_point_change(Matrix(next), Matrix(previous));
}

/// Solves x = rhs + apply(x) by fixed-point iteration starting at rhs,
/// i.e. (I - J) x = rhs for the linear operator `apply`. V may be a plain
/// Eigen type or a tape variable: only `+` and `fixed_point_change` are
/// used, so every step can be recorded for differentiation.
template <typename V, typename Apply>
LinearSolveResult<V> neumann_solve(Apply&& apply, const V& rhs, const SolverConfig& cfg) {
  LinearSolveResult<V> result{rhs, 0, false, 0.0};
  for (int k = 1; k <= cfg.max_iterations; ++k) {
    V next = rhs + apply(result.solution);
    const double change = fixed_point_change(next, result.solution);
    result.solution = next;
    result.iterations = k;
    result.last_change = change;
    if (change <= cfg.tolerance) {
      result.converged = true;
      return result;
    }
    if (!std::isfinite(change) || change > cfg.divergence_threshold) return result;
  }
  return result;
}

/// Solves u^T (I - dg/dz) = rhs^T given v -> (v^T dg/dz)^T.
template <typename V, typename TransposeProduct>
LinearSolveResult<V> adjoint_linear_solve(TransposeProduct&& vector_jacobian_product, const V& rhs,
                                          const SolverConfig& cfg) {
  return neumann_solve(std::forward<TransposeProduct>(vector_jacobian_product), rhs, cfg);
}

}  // namespace pideq::rootfind
