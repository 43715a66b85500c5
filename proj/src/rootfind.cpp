#include "pideq/rootfind.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "pideq/errors.hpp"

namespace pideq::rootfind {
namespace {

// Outcome of checking one evaluation g(z).
enum class Step { Converged, Diverged, Continue };

struct Monitor {
  const SolverConfig& cfg;
  SolverResult& result;

  Step check(const Vector& z, const Vector& gz) {
    ++result.evaluations;
    if (!gz.allFinite()) {
      result.diagnostic = "non-finite iterate after " + std::to_string(result.iterations) + " iterations";
      result.residual_norm = result.absolute_residual = std::numeric_limits<double>::infinity();
      return Step::Diverged;
    }
    const double abs_res = (gz - z).norm();
    const double rel_res = abs_res / std::max(1.0, z.norm());
    if (cfg.keep_trace) result.trace.push_back(rel_res);
    result.solution = z;
    result.absolute_residual = abs_res;
    result.residual_norm = rel_res;
    if (rel_res <= cfg.tolerance) {
      result.converged = true;
      return Step::Converged;
    }
    if (!std::isfinite(abs_res) || abs_res > cfg.divergence_threshold) {
      result.diagnostic = "residual " + std::to_string(abs_res) + " exceeds divergence threshold";
      return Step::Diverged;
    }
    if (result.iterations >= cfg.max_iterations) {
      result.diagnostic = "max_iterations reached with residual " + std::to_string(rel_res);
      return Step::Diverged;
    }
    return Step::Continue;
  }
};

}  // namespace

std::string_view to_string(Method method) {
  switch (method) {
    case Method::Simple: return "simple";
    case Method::Anderson: return "anderson";
    case Method::Broyden: return "broyden";
    case Method::Newton: return "newton";
  }
  return "unknown";
}

Method parse_method(std::string_view name) {
  if (name == "simple") return Method::Simple;
  if (name == "anderson") return Method::Anderson;
  if (name == "broyden") return Method::Broyden;
  if (name == "newton") return Method::Newton;
  throw ConfigError("unknown solver method '" + std::string(name) + "'");
}

void SolverConfig::validate() const {
  if (!(tolerance > 0.0)) throw ConfigError("solver tolerance must be positive");
  if (max_iterations < 1) throw ConfigError("solver max_iterations must be at least 1");
  if (anderson_memory < 0) throw ConfigError("anderson_memory must be nonnegative");
  if (!(anderson_damping > 0.0 && anderson_damping <= 1.0)) throw ConfigError("anderson_damping must lie in (0, 1]");
  if (!(anderson_regularization >= 0.0)) throw ConfigError("anderson_regularization must be nonnegative");
  if (!(divergence_threshold > 0.0)) throw ConfigError("divergence_threshold must be positive");
}

double relative_residual(const Vector& gz, const Vector& z) { return (gz - z).norm() / std::max(1.0, z.norm()); }

double fixed_point_change(const Matrix& next, const Matrix& previous) {
  double worst = 0.0;
  for (Eigen::Index j = 0; j < next.cols(); ++j) {
    const double change = (next.col(j) - previous.col(j)).norm() / std::max(1.0, next.col(j).norm());
    if (std::isnan(change)) return change;
    worst = std::max(worst, change);
  }
  return worst;
}

SolverResult simple_iteration(const FixedPointMap& g, Vector z0, const SolverConfig& cfg) {
  SolverResult result;
  Monitor monitor{cfg, result};
  Vector z = std::move(z0);
  while (true) {
    Vector gz = g(z);
    if (monitor.check(z, gz) != Step::Continue) return result;
    z = std::move(gz);
    ++result.iterations;
  }
}

SolverResult anderson(const FixedPointMap& g, Vector z0, const SolverConfig& cfg) {
  const int memory = cfg.anderson_memory;
  const double beta = cfg.anderson_damping;
  SolverResult result;
  Monitor monitor{cfg, result};
  const Eigen::Index n = z0.size();

  Vector z = std::move(z0);
  Vector z_prev, f_prev;
  // Columns hold successive differences of iterates and residuals, oldest first.
  Matrix dz(n, 0), df(n, 0);
  while (true) {
    Vector gz = g(z);
    if (monitor.check(z, gz) != Step::Continue) return result;
    Vector f = gz - z;

    Vector next;
    if (memory > 0 && result.iterations > 0) {
      if (dz.cols() == memory) {
        dz.leftCols(memory - 1) = dz.rightCols(memory - 1).eval();
        df.leftCols(memory - 1) = df.rightCols(memory - 1).eval();
      } else {
        dz.conservativeResize(n, dz.cols() + 1);
        df.conservativeResize(n, df.cols() + 1);
      }
      dz.rightCols(1) = z - z_prev;
      df.rightCols(1) = f - f_prev;
    }
    if (dz.cols() == 0) {
      next = beta == 1.0 ? gz : Vector(beta * gz + (1.0 - beta) * z);
    } else {
      Matrix normal = df.transpose() * df;
      normal.diagonal().array() += cfg.anderson_regularization;
      const Vector gamma = normal.ldlt().solve(df.transpose() * f);
      next = (z - dz * gamma) + beta * (f - df * gamma);
    }
    if (memory > 0) {
      z_prev = z;
      f_prev = std::move(f);
    }
    z = std::move(next);
    ++result.iterations;
  }
}

SolverResult broyden(const FixedPointMap& g, Vector z0, const SolverConfig& cfg) {
  SolverResult result;
  Monitor monitor{cfg, result};
  const Eigen::Index n = z0.size();
  Matrix inv_jac = -Matrix::Identity(n, n);

  Vector z = std::move(z0);
  Vector gz = g(z);
  if (monitor.check(z, gz) != Step::Continue) return result;
  Vector f = gz - z;
  while (true) {
    const Vector step = -(inv_jac * f);
    z += step;
    ++result.iterations;
    gz = g(z);
    if (monitor.check(z, gz) != Step::Continue) return result;
    Vector f_next = gz - z;
    const Vector df = f_next - f;
    const Eigen::RowVectorXd step_h = step.transpose() * inv_jac;
    const double denom = step_h.dot(df);
    if (std::abs(denom) > 1e-300) {
      inv_jac += ((step - inv_jac * df) / denom) * step_h;
    }
    f = std::move(f_next);
  }
}

SolverResult newton(const FixedPointMap& g, const JacobianMap& jacobian, Vector z0, const SolverConfig& cfg) {
  if (!jacobian) throw std::invalid_argument("newton requires a Jacobian");
  SolverResult result;
  Monitor monitor{cfg, result};
  Vector z = std::move(z0);
  while (true) {
    const Vector gz = g(z);
    if (monitor.check(z, gz) != Step::Continue) return result;
    Matrix system = jacobian(z);
    system.diagonal().array() -= 1.0;
    const Eigen::FullPivLU<Matrix> lu(system);
    if (!lu.isInvertible()) {
      throw NumericalError("newton: dg/dz - I is singular after " + std::to_string(result.iterations) + " iterations");
    }
    z += lu.solve(-(gz - z));
    ++result.iterations;
  }
}

SolverResult solve(const FixedPointMap& g, const JacobianMap& jacobian, Vector z0, const SolverConfig& cfg) {
  switch (cfg.method) {
    case Method::Simple: return simple_iteration(g, std::move(z0), cfg);
    case Method::Anderson: return anderson(g, std::move(z0), cfg);
    case Method::Broyden: return broyden(g, std::move(z0), cfg);
    case Method::Newton: return newton(g, jacobian, std::move(z0), cfg);
  }
  throw std::invalid_argument("unknown solver method");
}

}  // namespace pideq::rootfind
