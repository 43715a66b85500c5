#pragma once

// Initial value problems and the physics-informed loss
//   J = J_b + lambda * J_N + kappa * ||df/dz||_F.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "pideq/autodiff.hpp"
#include "pideq/models.hpp"

namespace pideq::physics {

using Vector = Eigen::VectorXd;

/// dy/dt = N(t, y) on [t0, horizon] with y(t0) = y0.
struct IvpSpec {
  std::function<Vector(double, const Vector&)> dynamics;
  /// The same dynamics on the tape: times is 1 x B, states is state_dim x B.
  std::function<ad::Var(ad::Var times, ad::Var states)> recorded_dynamics;
  double t0 = 0.0;
  double horizon = 2.0;
  Vector y0;
  Eigen::Index state_dim = 0;

  /// Throws ConfigError.
  void validate() const;
};

struct VdpConfig {
  double mu = 1.0;
};

/// (y2, mu (1 - y1^2) y2 - y1).
Eigen::Vector2d vdp_dynamics(double t, const Eigen::Vector2d& y, const VdpConfig& cfg = {});
/// Batched tape version; `states` has two rows.
ad::Var vdp_dynamics(ad::Var times, ad::Var states, const VdpConfig& cfg = {});

IvpSpec make_vdp_ivp(const VdpConfig& cfg = {}, double t0 = 0.0, double horizon = 2.0,
                     const Vector& y0 = Eigen::Vector2d(0.0, 0.1));

/// `n` i.i.d. uniform draws from [t0, horizon], deterministic in `seed`.
std::vector<double> sample_collocation(const IvpSpec& ivp, std::size_t n, std::uint64_t seed);

/// ||model(t0) - y0||^2.
ad::Var boundary_loss(ad::Var output_at_t0, const IvpSpec& ivp);
double boundary_loss(const Vector& output_at_t0, const IvpSpec& ivp);

/// Sum over the batch of ||predicted_derivative - dynamics||^2.
ad::Var physics_residual(ad::Var predicted_derivative, ad::Var dynamics_value);

/// J_N for a recorded batch at `times`.
ad::Var physics_loss(const models::RecordedBatch& batch, ad::Var times, const IvpSpec& ivp);
/// Records the model's time derivative at `points` and returns J_N.
ad::Var physics_loss(models::TapeModel& model, ad::Tape& tape, const IvpSpec& ivp, std::span<const double> points);

struct LossWeights {
  double lambda = 0.1;
  double kappa = 1.0;
  void validate() const;
};

struct LossBreakdown {
  ad::Var total;
  ad::Var boundary;
  ad::Var physics;
  /// Constant zero for models without an equilibrium function.
  ad::Var penalty;
  models::ForwardStats stats;

  [[nodiscard]] double total_value() const { return total.scalar(); }
  [[nodiscard]] double boundary_value() const { return boundary.scalar(); }
  [[nodiscard]] double physics_value() const { return physics.scalar(); }
  [[nodiscard]] double penalty_value() const { return penalty.scalar(); }
};

/// J_b + lambda * J_N + kappa * penalty.
double combine(const LossWeights& w, double boundary, double physics, double penalty);

/// Full loss on the tape. The penalty is taken from the collocation batch.
LossBreakdown total_loss(models::TapeModel& model, ad::Tape& tape, const IvpSpec& ivp, std::span<const double> points,
                         const LossWeights& weights);

}  // namespace pideq::physics
