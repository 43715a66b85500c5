#include "pideq/physics.hpp"

#include <cmath>

#include "pideq/errors.hpp"
#include "pideq/random.hpp"

namespace pideq::physics {

using ad::Var;

void IvpSpec::validate() const {
  if (!dynamics) throw ConfigError("IVP dynamics are not set");
  if (!(horizon > t0)) throw ConfigError("IVP horizon must exceed t0");
  if (state_dim < 1 || y0.size() != state_dim) throw ConfigError("initial state does not match state_dim");
  if (!y0.allFinite() || !std::isfinite(t0) || !std::isfinite(horizon)) throw ConfigError("non-finite IVP data");
}

Eigen::Vector2d vdp_dynamics(double /*t*/, const Eigen::Vector2d& y, const VdpConfig& cfg) {
  return {y(1), cfg.mu * (1.0 - y(0) * y(0)) * y(1) - y(0)};
}

Var vdp_dynamics(Var /*times*/, Var states, const VdpConfig& cfg) {
  if (states.rows() != 2) throw ShapeError("Van der Pol states must have two rows");
  const Var y1 = ad::slice_rows(states, 0, 1);
  const Var y2 = ad::slice_rows(states, 1, 1);
  const Var damping = (1.0 - ad::hadamard(y1, y1)) * cfg.mu;
  return ad::concat_rows({y2, ad::hadamard(damping, y2) - y1});
}

IvpSpec make_vdp_ivp(const VdpConfig& cfg, double t0, double horizon, const Vector& y0) {
  if (!std::isfinite(cfg.mu)) throw ConfigError("mu must be finite");
  IvpSpec ivp;
  ivp.dynamics = [cfg](double t, const Vector& y) -> Vector {
    if (y.size() != 2) throw ShapeError("Van der Pol state must have two components");
    return vdp_dynamics(t, Eigen::Vector2d(y(0), y(1)), cfg);
  };
  ivp.recorded_dynamics = [cfg](Var times, Var states) { return vdp_dynamics(times, states, cfg); };
  ivp.t0 = t0;
  ivp.horizon = horizon;
  ivp.y0 = y0;
  ivp.state_dim = 2;
  ivp.validate();
  return ivp;
}

std::vector<double> sample_collocation(const IvpSpec& ivp, std::size_t n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("collocation count must be at least 1");
  std::mt19937_64 rng(seed);
  std::vector<double> points(n);
  for (double& t : points) t = uniform(rng, ivp.t0, ivp.horizon);
  return points;
}

Var boundary_loss(Var output_at_t0, const IvpSpec& ivp) {
  if (output_at_t0.cols() != 1 || output_at_t0.rows() != ivp.y0.size()) {
    throw ShapeError("boundary output does not match the initial state");
  }
  return ad::squared_norm(output_at_t0 - output_at_t0.tape().vector(ivp.y0));
}

double boundary_loss(const Vector& output_at_t0, const IvpSpec& ivp) {
  if (output_at_t0.size() != ivp.y0.size()) throw ShapeError("boundary output does not match the initial state");
  return (output_at_t0 - ivp.y0).squaredNorm();
}

Var physics_residual(Var predicted_derivative, Var dynamics_value) {
  return ad::squared_norm(predicted_derivative - dynamics_value);
}

Var physics_loss(const models::RecordedBatch& batch, Var times, const IvpSpec& ivp) {
  if (!batch.time_derivative) throw std::invalid_argument("physics loss needs the model time derivative");
  if (!ivp.recorded_dynamics) throw ConfigError("IVP has no recorded dynamics");
  return physics_residual(*batch.time_derivative, ivp.recorded_dynamics(times, batch.value));
}

namespace {

Var times_row(ad::Tape& tape, std::span<const double> points) {
  if (points.empty()) throw std::invalid_argument("at least one collocation point is required");
  ad::Matrix row(1, static_cast<Eigen::Index>(points.size()));
  for (std::size_t j = 0; j < points.size(); ++j) row(0, static_cast<Eigen::Index>(j)) = points[j];
  return tape.leaf(std::move(row));
}

}  // namespace

Var physics_loss(models::TapeModel& model, ad::Tape& tape, const IvpSpec& ivp, std::span<const double> points) {
  const Var times = times_row(tape, points);
  return physics_loss(model.record(times, true), times, ivp);
}

void LossWeights::validate() const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be a nonnegative number");
  if (!(kappa >= 0.0) || !std::isfinite(kappa)) throw ConfigError("kappa must be a nonnegative number");
}

double combine(const LossWeights& w, double boundary, double physics, double penalty) {
  return boundary + w.lambda * physics + w.kappa * penalty;
}

LossBreakdown total_loss(models::TapeModel& model, ad::Tape& tape, const IvpSpec& ivp,
                         std::span<const double> points, const LossWeights& weights) {
  weights.validate();
  LossBreakdown out;

  const Var t0 = tape.scalar(ivp.t0);
  const models::RecordedBatch start = model.record(t0, false);
  out.boundary = boundary_loss(start.value, ivp);

  const Var times = times_row(tape, points);
  const models::RecordedBatch batch = model.record(times, true);
  out.physics = physics_loss(batch, times, ivp);
  out.penalty = batch.jacobian_penalty ? *batch.jacobian_penalty : tape.scalar(0.0);
  out.stats = batch.stats;

  Var total = out.boundary + out.physics * weights.lambda;
  if (batch.jacobian_penalty && weights.kappa != 0.0) total = total + out.penalty * weights.kappa;
  out.total = total;
  return out;
}

}  // namespace pideq::physics
