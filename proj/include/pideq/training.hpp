#pragma once

// Adam, the physics-informed training loop and multi-seed sweeps.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "pideq/models.hpp"
#include "pideq/physics.hpp"
#include "pideq/reference.hpp"
#include "pideq/rootfind.hpp"

namespace pideq::training {

using Matrix = Eigen::MatrixXd;

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  void validate() const;
};

class AdamState {
 public:
  AdamState() = default;
  AdamState(AdamConfig cfg, std::span<const models::ParamBlock> blocks);

  [[nodiscard]] const AdamConfig& config() const { return cfg_; }
  [[nodiscard]] long step_count() const { return step_; }
  [[nodiscard]] const std::vector<Matrix>& first_moment() const { return m_; }
  [[nodiscard]] const std::vector<Matrix>& second_moment() const { return v_; }

  /// Bias-corrected update params -= lr * m_hat / (sqrt(v_hat) + eps).
  /// Throws NumericalError naming the block if a gradient is not finite and
  /// ShapeError if shapes disagree.
  void step(std::span<models::ParamBlock> params, std::span<const Matrix> grads);

 private:
  AdamConfig cfg_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  long step_ = 0;
};

inline void adam_step(AdamState& state, std::span<models::ParamBlock> params, std::span<const Matrix> grads) {
  state.step(params, grads);
}

enum class ModelKind { Pideq, Pinn };
std::string_view to_string(ModelKind kind);
ModelKind parse_model_kind(std::string_view name);

struct TrainConfig {
  ModelKind model = ModelKind::Pideq;
  int n_z = 80;
  std::vector<int> hidden_layers{20, 20, 20, 20};
  rootfind::SolverConfig solver{};
  /// Tolerance and iteration cap of the recorded backward/time-derivative
  /// solves; the method field is ignored.
  rootfind::SolverConfig backward{rootfind::Method::Simple, 1e-6, 200};
  physics::LossWeights weights{};
  AdamConfig adam{};
  int epochs = 50000;
  int collocation_n = 100;
  std::uint64_t seed = 0;
  int eval_every = 10;
  int reference_steps = 20000;
  int iae_points = 1000;
  /// When set, curve.csv and checkpoints are written here.
  std::optional<std::filesystem::path> output_dir;

  void validate() const;
};

struct CurveRecord {
  int epoch = 0;
  double j_b = 0.0;
  double j_n = 0.0;
  double jac_penalty = 0.0;
  double total = 0.0;
  /// IAE of the parameters at the end of the epoch.
  double iae = 0.0;
  /// Mean forward-solver iterations per collocation point.
  double solver_iters = 0.0;
};

struct LearningCurve {
  std::vector<CurveRecord> records;

  [[nodiscard]] bool empty() const { return records.empty(); }
  [[nodiscard]] std::vector<double> column(std::string_view name) const;
};

inline constexpr std::string_view kCurveHeader = "epoch,j_b,j_n,jac_penalty,total,iae,solver_iters";
void write_curve_csv(std::ostream& os, const LearningCurve& curve);
LearningCurve read_curve_csv(std::istream& is);

struct TrainResult {
  models::ModelParams final_params;
  models::ModelParams best_params;
  double best_iae = 0.0;
  int best_epoch = 0;
  double final_iae = 0.0;
  LearningCurve curve;
  bool ok = true;
  std::string diagnostic;
  int epochs_run = 0;
  std::uint64_t seed = 0;
  /// Forward-solver work summed over every epoch's collocation batch.
  std::uint64_t forward_points = 0;
  std::uint64_t forward_iterations = 0;
  std::uint64_t forward_evaluations = 0;
  std::vector<std::filesystem::path> artifacts;

  [[nodiscard]] double mean_forward_iterations() const {
    return forward_points ? static_cast<double>(forward_iterations) / static_cast<double>(forward_points) : 0.0;
  }
  [[nodiscard]] double mean_forward_evaluations() const {
    return forward_points ? static_cast<double>(forward_evaluations) / static_cast<double>(forward_points) : 0.0;
  }
};

/// Initial parameters for cfg.model drawn from cfg.seed.
models::ModelParams initial_params(const TrainConfig& cfg);

/// RK4 reference sampled on the IAE grid.
reference::Trajectory reference_on_grid(const physics::IvpSpec& ivp, int reference_steps, int iae_points);

/// IAE of `params` against a reference already on the evaluation grid.
double evaluate_iae(const models::ModelParams& params, const physics::IvpSpec& ivp,
                    const reference::Trajectory& reference_grid, const rootfind::SolverConfig& forward);

/// Runs the epoch loop. Numerical failures do not throw: the result carries
/// ok = false, a diagnostic and the partial curve (also written to disk).
TrainResult train(const TrainConfig& cfg, const physics::IvpSpec& ivp,
                  const reference::Trajectory* reference_grid = nullptr);

/// Trailing mean over at most `window` values, shorter during warm-up.
std::vector<double> moving_average(std::span<const double> series, std::size_t window);

struct EnvelopeRecord {
  int epoch = 0;
  CurveRecord mean, min, max;
};

struct SweepReport {
  std::vector<TrainResult> runs;
  std::vector<bool> failed;
  /// Per-epoch aggregate over successful runs, truncated to the shortest curve.
  std::vector<EnvelopeRecord> envelope;
  /// Index into runs of the successful run with the median final IAE.
  std::optional<std::size_t> median_run;

  [[nodiscard]] std::size_t successful() const;
  [[nodiscard]] std::vector<double> final_iaes() const;
};

/// Runs seeds cfg.seed .. cfg.seed + n_runs - 1 on up to `jobs` threads. When
/// cfg.output_dir is set each run writes into <output_dir>/<run_dir_name(i)>.
SweepReport seed_sweep(const TrainConfig& cfg, int n_runs, const physics::IvpSpec& ivp, int jobs = 1,
                       const std::function<std::string(std::uint64_t seed)>& run_dir_name = {});

/// Envelope and median selection from finished runs.
void aggregate(SweepReport& report);

void write_aggregate_csv(std::ostream& os, const SweepReport& report);

}  // namespace pideq::training
