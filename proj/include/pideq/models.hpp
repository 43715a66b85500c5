#pragma once

// Deep equilibrium model D(t) = C z*, z* = tanh(A z* + t a + b), and the
// feed-forward tanh network used as a baseline.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "pideq/autodiff.hpp"
#include "pideq/rootfind.hpp"

namespace pideq::models {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;
using rootfind::SolverConfig;
using rootfind::SolverResult;

/// Mutable view of one trainable block, stored column-major.
struct ParamBlock {
  std::string name;
  std::span<double> data;
  Index rows = 0;
  Index cols = 0;
};

struct PideqParams {
  Matrix A;  // n_z x n_z
  Vector a;  // input injection
  Vector b;  // bias
  Matrix C;  // n_out x n_z

  [[nodiscard]] Index n_z() const { return A.rows(); }
  [[nodiscard]] Index n_out() const { return C.rows(); }
  [[nodiscard]] std::size_t parameter_count() const {
    return static_cast<std::size_t>(A.size() + a.size() + b.size() + C.size());
  }
  /// Throws ShapeError / NumericalError.
  void validate() const;
  std::vector<ParamBlock> blocks();

  static PideqParams zeros(Index n_z, Index n_out = 2);
  /// A and C uniform in +-1/sqrt(n_z); a and b zero.
  static PideqParams random(Index n_z, Index n_out, std::mt19937_64& rng);
};

struct PinnLayer {
  Matrix W;  // out x in
  Vector b;
};

struct PinnParams {
  /// Hidden layers use tanh; the last layer is linear.
  std::vector<PinnLayer> layers;

  [[nodiscard]] Index n_in() const { return layers.front().W.cols(); }
  [[nodiscard]] Index n_out() const { return layers.back().W.rows(); }
  [[nodiscard]] std::size_t parameter_count() const;
  /// Layer widths including input and output, e.g. {1, 20, 20, 2}.
  [[nodiscard]] std::vector<Index> sizes() const;
  void validate() const;
  std::vector<ParamBlock> blocks();

  static PinnParams zeros(std::span<const Index> sizes);
  /// Weights uniform in +-1/sqrt(fan_in); biases zero.
  static PinnParams random(std::span<const Index> sizes, std::mt19937_64& rng);
};

using ModelParams = std::variant<PideqParams, PinnParams>;

std::vector<ParamBlock> parameter_blocks(ModelParams& params);
std::size_t parameter_count(const ModelParams& params);

// ---------------------------------------------------------------------------
// Plain evaluation

/// tanh(A z + t a + b).
Vector equilibrium_fn(const PideqParams& params, double t, const Vector& z);
/// d f / d z = diag(1 - tanh^2(A z + t a + b)) A.
Matrix equilibrium_jacobian(const PideqParams& params, double t, const Vector& z);

struct DeqForwardRecord {
  double t = 0.0;
  Vector z_star;
  Vector output;
  SolverResult solver;
};

/// Solves z = f(t, z) from z = 0 with the configured method.
DeqForwardRecord deq_forward(const PideqParams& params, double t, const SolverConfig& cfg);

struct PideqGradients {
  Matrix A;
  Vector a;
  Vector b;
  Matrix C;
  double t = 0.0;
};

/// Gradients of cotangent . D(t) with respect to (A, a, b, C, t) through the
/// implicit function theorem. Throws NumericalError on adjoint
/// non-convergence or if the forward record did not converge.
PideqGradients implicit_vjp(const PideqParams& params, const DeqForwardRecord& record, const Vector& cotangent,
                            const SolverConfig& backward);

/// d D(t) / dt = C (I - df/dz)^{-1} df/dt. Throws NumericalError.
Vector deq_time_derivative(const PideqParams& params, const DeqForwardRecord& record, const SolverConfig& backward);

/// || df/dz ||_F at (t, z*).
double jacobian_frobenius(const PideqParams& params, const DeqForwardRecord& record);

Vector pinn_forward(const PinnParams& params, double t);
/// d output / dt via automatic differentiation.
Vector pinn_time_derivative(const PinnParams& params, double t);

/// Number of rows of A whose Euclidean norm is below `threshold`.
Index count_null_rows(const Matrix& A, double threshold);

// ---------------------------------------------------------------------------
// Tape evaluation over a batch of times (a 1 x B row)

struct ForwardStats {
  std::size_t points = 0;
  std::size_t iterations = 0;
  std::size_t evaluations = 0;
  int max_iterations = 0;
  bool all_converged = true;
  std::string diagnostic;

  void merge(const ForwardStats& other);
  [[nodiscard]] double mean_iterations() const {
    return points ? static_cast<double>(iterations) / static_cast<double>(points) : 0.0;
  }
  [[nodiscard]] double mean_evaluations() const {
    return points ? static_cast<double>(evaluations) / static_cast<double>(points) : 0.0;
  }
};

struct PideqVars {
  ad::Var A, a, b, C;
};

/// Registers the parameters as leaves.
PideqVars bind(ad::Tape& tape, const PideqParams& params);

/// tanh(A Z + a t + b 1^T) for a batch Z (n_z x B) and times (1 x B).
ad::Var record_equilibrium_fn(const PideqVars& p, ad::Var times, ad::Var z);

/// Equilibrium node Z* (n_z x B). Its backward rule solves the adjoint system
/// iteratively with recorded operations, so the node is differentiable to any
/// order. Throws NumericalError if a column fails to converge and
/// `stats` is null; otherwise non-convergence is reported through `stats`.
ad::Var record_equilibrium(const PideqVars& p, ad::Var times, const SolverConfig& forward,
                           const SolverConfig& backward, ForwardStats* stats = nullptr);

/// dZ*/dt (n_z x B) from (I - df/dz) v = df/dt with recorded iterations.
ad::Var record_state_time_derivative(const PideqVars& p, ad::Var times, ad::Var z_star,
                                     const SolverConfig& backward);

/// Per-column ||df/dz||_F at (t_j, z*_j), as a 1 x B row.
ad::Var record_jacobian_frobenius(const PideqVars& p, ad::Var times, ad::Var z_star);

/// Output (n_out x B) of the tanh network for a row of times.
ad::Var record_pinn(std::span<const ad::Var> layer_vars, ad::Var times);

/// Model outputs on a batch, ready for the physics-informed loss.
struct RecordedBatch {
  ad::Var value;                          // n_out x B
  std::optional<ad::Var> time_derivative; // n_out x B
  std::optional<ad::Var> jacobian_penalty;// 1x1, absent for models without one
  ForwardStats stats;
};

/// A model whose parameters live as leaves on a tape.
class TapeModel {
 public:
  virtual ~TapeModel() = default;
  virtual RecordedBatch record(ad::Var times, bool with_time_derivative) = 0;
  [[nodiscard]] virtual std::span<const ad::Var> parameters() const = 0;
};

class PideqTapeModel final : public TapeModel {
 public:
  PideqTapeModel(ad::Tape& tape, const PideqParams& params, SolverConfig forward, SolverConfig backward);
  /// The returned penalty is the mean over the batch of ||df/dz||_F.
  RecordedBatch record(ad::Var times, bool with_time_derivative) override;
  [[nodiscard]] std::span<const ad::Var> parameters() const override { return leaves_; }
  [[nodiscard]] const PideqVars& vars() const { return vars_; }

 private:
  PideqVars vars_;
  std::vector<ad::Var> leaves_;
  SolverConfig forward_;
  SolverConfig backward_;
};

class PinnTapeModel final : public TapeModel {
 public:
  PinnTapeModel(ad::Tape& tape, const PinnParams& params);
  /// Time derivatives come from create_graph gradients of each output row.
  RecordedBatch record(ad::Var times, bool with_time_derivative) override;
  [[nodiscard]] std::span<const ad::Var> parameters() const override { return leaves_; }

 private:
  std::vector<ad::Var> leaves_;  // W0, b0, W1, b1, ...
};

std::unique_ptr<TapeModel> make_tape_model(ad::Tape& tape, const ModelParams& params, const SolverConfig& forward,
                                           const SolverConfig& backward);

/// Plain prediction at a single time; for DEQs throws NumericalError when the
/// forward solve does not converge.
Vector predict(const ModelParams& params, double t, const SolverConfig& forward, SolverResult* diagnostics = nullptr);

// ---------------------------------------------------------------------------
// Checkpoints

struct CheckpointHeader {
  std::string kind;  // "pideq" or "pinn"
  std::vector<Index> shape;  // {n_z, n_out} or layer sizes
  std::uint64_t seed = 0;
};

void save_checkpoint(std::ostream& os, const ModelParams& params, std::uint64_t seed);
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, std::uint64_t seed);
ModelParams load_checkpoint(std::istream& is, CheckpointHeader* header = nullptr);
ModelParams load_checkpoint(const std::filesystem::path& path, CheckpointHeader* header = nullptr);

}  // namespace pideq::models
