#pragma once

// Classical Runge-Kutta reference solutions and the IAE metric.

#include <functional>
#include <iosfwd>
#include <vector>

#include <Eigen/Dense>

#include "pideq/physics.hpp"

namespace pideq::reference {

using Vector = Eigen::VectorXd;
using Dynamics = std::function<Vector(double, const Vector&)>;

struct Trajectory {
  std::vector<double> times;
  std::vector<Vector> states;

  [[nodiscard]] std::size_t size() const { return times.size(); }
  /// Throws std::invalid_argument if times are not strictly increasing or
  /// state sizes differ.
  void validate() const;
};

/// y + h/6 (k1 + 2 k2 + 2 k3 + k4). Throws NumericalError on non-finite stages.
Vector rk4_step(const Dynamics& f, double t, const Vector& y, double h);

/// `n_steps` uniform RK4 steps over [t0, horizon].
Trajectory integrate(const physics::IvpSpec& ivp, int n_steps);

/// Model values at n_points + 1 equally spaced times covering [t0, horizon].
Trajectory evaluate_on_grid(const std::function<Vector(double)>& model, const physics::IvpSpec& ivp, int n_points);

/// Every k-th state of a uniform trajectory so that it has n_points + 1
/// entries. Throws if the step count is not a multiple of n_points.
Trajectory subsample(const Trajectory& fine, int n_points);

struct IaeReport {
  double iae = 0.0;
  int n_eval_points = 0;
  std::vector<double> per_point_errors;
};

/// Left Riemann sum of ||pred_k - ref_k||_1 over the shared grid.
IaeReport iae(const Trajectory& pred, const Trajectory& ref);

/// CSV with header `t,y1,...,ym`, 17 significant digits.
void write_csv(std::ostream& os, const Trajectory& trajectory);
Trajectory read_csv(std::istream& is);

}  // namespace pideq::reference
