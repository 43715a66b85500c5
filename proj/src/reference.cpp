#include "pideq/reference.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "pideq/errors.hpp"

namespace pideq::reference {

void Trajectory::validate() const {
  if (times.size() != states.size()) throw std::invalid_argument("trajectory times and states differ in length");
  for (std::size_t i = 1; i < times.size(); ++i) {
    if (!(times[i] > times[i - 1])) throw std::invalid_argument("trajectory times must be strictly increasing");
    if (states[i].size() != states[0].size()) throw std::invalid_argument("trajectory state sizes differ");
  }
}

Vector rk4_step(const Dynamics& f, double t, const Vector& y, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("rk4 step must be positive");
  const Vector k1 = f(t, y);
  const Vector k2 = f(t + 0.5 * h, y + 0.5 * h * k1);
  const Vector k3 = f(t + 0.5 * h, y + 0.5 * h * k2);
  const Vector k4 = f(t + h, y + h * k3);
  if (!k1.allFinite() || !k2.allFinite() || !k3.allFinite() || !k4.allFinite()) {
    throw NumericalError("non-finite RK4 stage at t=" + std::to_string(t));
  }
  return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

Trajectory integrate(const physics::IvpSpec& ivp, int n_steps) {
  ivp.validate();
  if (n_steps < 1) throw std::invalid_argument("n_steps must be at least 1");
  const double h = (ivp.horizon - ivp.t0) / n_steps;
  Trajectory out;
  out.times.reserve(static_cast<std::size_t>(n_steps) + 1);
  out.states.reserve(static_cast<std::size_t>(n_steps) + 1);
  out.times.push_back(ivp.t0);
  out.states.push_back(ivp.y0);
  for (int k = 0; k < n_steps; ++k) {
    // Times are computed from the index to avoid drift.
    const double t = ivp.t0 + k * h;
    Vector next = rk4_step(ivp.dynamics, t, out.states.back(), h);
    if (!next.allFinite()) throw NumericalError("non-finite state at t=" + std::to_string(t + h));
    out.states.push_back(std::move(next));
    out.times.push_back(k + 1 == n_steps ? ivp.horizon : ivp.t0 + (k + 1) * h);
  }
  return out;
}

Trajectory evaluate_on_grid(const std::function<Vector(double)>& model, const physics::IvpSpec& ivp, int n_points) {
  if (n_points < 1) throw std::invalid_argument("n_points must be at least 1");
  const double dt = (ivp.horizon - ivp.t0) / n_points;
  Trajectory out;
  for (int k = 0; k <= n_points; ++k) {
    const double t = k == n_points ? ivp.horizon : ivp.t0 + k * dt;
    out.times.push_back(t);
    out.states.push_back(model(t));
  }
  return out;
}

Trajectory subsample(const Trajectory& fine, int n_points) {
  if (n_points < 1 || fine.size() < 2) throw std::invalid_argument("subsample needs n_points >= 1 and a trajectory");
  const std::size_t steps = fine.size() - 1;
  if (steps % static_cast<std::size_t>(n_points) != 0) {
    throw std::invalid_argument("trajectory of " + std::to_string(steps) + " steps cannot be sampled at " +
                                std::to_string(n_points) + " intervals");
  }
  const std::size_t stride = steps / static_cast<std::size_t>(n_points);
  Trajectory out;
  for (std::size_t k = 0; k <= steps; k += stride) {
    out.times.push_back(fine.times[k]);
    out.states.push_back(fine.states[k]);
  }
  return out;
}

IaeReport iae(const Trajectory& pred, const Trajectory& ref) {
  if (pred.size() != ref.size() || pred.size() < 2) throw std::invalid_argument("IAE needs matching grids of >= 2 points");
  const double span = ref.times.back() - ref.times.front();
  const double dt = span / static_cast<double>(ref.size() - 1);
  for (std::size_t k = 0; k < ref.size(); ++k) {
    if (std::abs(pred.times[k] - ref.times[k]) > 1e-9 * std::max(1.0, std::abs(span))) {
      throw std::invalid_argument("IAE grids differ at index " + std::to_string(k));
    }
    if (pred.states[k].size() != ref.states[k].size()) throw std::invalid_argument("IAE state sizes differ");
  }
  IaeReport report;
  report.n_eval_points = static_cast<int>(ref.size() - 1);
  report.per_point_errors.reserve(ref.size());
  double total = 0.0;
  for (std::size_t k = 0; k < ref.size(); ++k) {
    const double err = (pred.states[k] - ref.states[k]).lpNorm<1>();
    report.per_point_errors.push_back(err);
    if (k + 1 < ref.size()) total += err * dt;
  }
  report.iae = total;
  return report;
}

void write_csv(std::ostream& os, const Trajectory& trajectory) {
  const Eigen::Index dim = trajectory.states.empty() ? 0 : trajectory.states.front().size();
  os << 't';
  for (Eigen::Index i = 0; i < dim; ++i) os << ",y" << (i + 1);
  os << '\n';
  char buf[40];
  for (std::size_t k = 0; k < trajectory.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%.17g", trajectory.times[k]);
    os << buf;
    for (Eigen::Index i = 0; i < dim; ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", trajectory.states[k](i));
      os << ',' << buf;
    }
    os << '\n';
  }
}

Trajectory read_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line.rfind("t", 0) != 0) throw std::runtime_error("trajectory CSV lacks a header");
  const auto dim = static_cast<Eigen::Index>(std::count(line.begin(), line.end(), ','));
  Trajectory out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> values;
    while (std::getline(ss, cell, ',')) values.push_back(std::stod(cell));
    if (static_cast<Eigen::Index>(values.size()) != dim + 1) throw std::runtime_error("trajectory CSV row has wrong width");
    out.times.push_back(values[0]);
    out.states.emplace_back(Eigen::Map<const Vector>(values.data() + 1, dim));
  }
  out.validate();
  return out;
}

}  // namespace pideq::reference
