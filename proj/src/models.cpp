#include "pideq/models.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "pideq/errors.hpp"
#include "pideq/random.hpp"

namespace pideq::models {
namespace {

using ad::Var;

template <typename M>
ParamBlock make_block(std::string name, M& m) {
  return ParamBlock{std::move(name), std::span<double>(m.data(), static_cast<std::size_t>(m.size())), m.rows(),
                    m.cols()};
}

void fill_uniform(Matrix& m, double bound, std::mt19937_64& rng) {
  for (Index j = 0; j < m.cols(); ++j) {
    for (Index i = 0; i < m.rows(); ++i) m(i, j) = uniform(rng, -bound, bound);
  }
}

Var pre_activation(Var A, Var a, Var b, Var times, Var z) {
  return matmul(A, z) + matmul(a, times) + ad::repeat_cols(b, z.cols());
}

// 1 - tanh^2 evaluated from the equilibrium function value.
Var tanh_slope(Var s) { return 1.0 - ad::hadamard(s, s); }

// Node whose value is a batch of equilibria z*_j = tanh(A z*_j + t_j a + b)
// and whose backward rule follows from the implicit function theorem.
class EquilibriumOp final : public ad::CustomOp {
 public:
  explicit EquilibriumOp(SolverConfig backward) : backward_(backward) {}

  [[nodiscard]] std::string_view name() const override { return "equilibrium"; }

  std::vector<std::optional<Var>> vjp(ad::Tape& /*tape*/, Var self, std::span<const Var> operands, Var cotangent,
                                      std::span<const bool> needs) const override {
    const Var A = operands[0];
    const Var a = operands[1];
    const Var b = operands[2];
    const Var times = operands[3];
    const Var slope = tanh_slope(ad::tanh(pre_activation(A, a, b, times, self)));

    // u = cot + (df/dz)^T u
    auto transposed = [&](const Var& u) { return matmul(A, ad::hadamard(slope, u), true, false); };
    const auto adjoint = rootfind::adjoint_linear_solve(transposed, cotangent, backward_);
    if (!adjoint.converged) {
      throw NumericalError("adjoint solve did not converge after " + std::to_string(adjoint.iterations) +
                           " iterations (last change " + std::to_string(adjoint.last_change) + ")");
    }
    const Var pre_cot = ad::hadamard(slope, adjoint.solution);

    std::vector<std::optional<Var>> out(4);
    if (needs[0]) out[0] = matmul(pre_cot, self, false, true);
    if (needs[1]) out[1] = matmul(pre_cot, times, false, true);
    if (needs[2]) out[2] = ad::sum_rows(pre_cot);
    if (needs[3]) out[3] = matmul(a, pre_cot, true, false);
    return out;
  }

 private:
  SolverConfig backward_;
};

Var equilibrium_node(const PideqVars& p, Var times, Matrix z_star, const SolverConfig& backward) {
  const Var operands[] = {p.A, p.a, p.b, times};
  return times.tape().record_custom(std::make_shared<EquilibriumOp>(backward), operands, std::move(z_star));
}

void require_times_row(Var times) {
  if (times.rows() != 1 || times.cols() < 1) throw ShapeError("times must be a non-empty 1 x B row");
}

void write_hex(std::ostream& os, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  os << buf;
}

double read_hex(std::istream& is) {
  std::string token;
  if (!(is >> token)) throw std::runtime_error("checkpoint: unexpected end of file");
  char* end = nullptr;
  const double v = std::strtod(token.c_str(), &end);
  if (end == token.c_str() || *end != '\0') throw std::runtime_error("checkpoint: malformed number '" + token + "'");
  return v;
}

void expect_token(std::istream& is, const std::string& expected) {
  std::string token;
  if (!(is >> token) || token != expected) {
    throw std::runtime_error("checkpoint: expected '" + expected + "', found '" + token + "'");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Parameter sets

void PideqParams::validate() const {
  const Index n = A.rows();
  if (n < 1 || A.cols() != n) throw ShapeError("A must be a non-empty square matrix");
  if (a.size() != n || b.size() != n) throw ShapeError("a and b must have n_z entries");
  if (C.cols() != n || C.rows() < 1) throw ShapeError("C must have n_z columns");
  if (!A.allFinite() || !a.allFinite() || !b.allFinite() || !C.allFinite()) {
    throw NumericalError("non-finite PIDEQ parameter");
  }
}

std::vector<ParamBlock> PideqParams::blocks() {
  return {make_block("A", A), make_block("a", a), make_block("b", b), make_block("C", C)};
}

PideqParams PideqParams::zeros(Index n_z, Index n_out) {
  return PideqParams{Matrix::Zero(n_z, n_z), Vector::Zero(n_z), Vector::Zero(n_z), Matrix::Zero(n_out, n_z)};
}

PideqParams PideqParams::random(Index n_z, Index n_out, std::mt19937_64& rng) {
  PideqParams p = zeros(n_z, n_out);
  const double bound = 1.0 / std::sqrt(static_cast<double>(n_z));
  fill_uniform(p.A, bound, rng);
  fill_uniform(p.C, bound, rng);
  return p;
}

std::size_t PinnParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += static_cast<std::size_t>(l.W.size() + l.b.size());
  return n;
}

std::vector<Index> PinnParams::sizes() const {
  std::vector<Index> s;
  if (layers.empty()) return s;
  s.push_back(layers.front().W.cols());
  for (const auto& l : layers) s.push_back(l.W.rows());
  return s;
}

void PinnParams::validate() const {
  if (layers.empty()) throw ShapeError("network needs at least one layer");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (l.W.rows() < 1 || l.W.cols() < 1) throw ShapeError("empty weight matrix in layer " + std::to_string(i));
    if (l.b.size() != l.W.rows()) throw ShapeError("bias size mismatch in layer " + std::to_string(i));
    if (i > 0 && l.W.cols() != layers[i - 1].W.rows()) {
      throw ShapeError("layer " + std::to_string(i) + " input does not match previous output");
    }
    if (!l.W.allFinite() || !l.b.allFinite()) throw NumericalError("non-finite network parameter");
  }
}

std::vector<ParamBlock> PinnParams::blocks() {
  std::vector<ParamBlock> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    out.push_back(make_block("W" + std::to_string(i), layers[i].W));
    out.push_back(make_block("b" + std::to_string(i), layers[i].b));
  }
  return out;
}

PinnParams PinnParams::zeros(std::span<const Index> sizes) {
  if (sizes.size() < 2) throw ShapeError("network needs an input and an output size");
  PinnParams p;
  for (std::size_t i = 1; i < sizes.size(); ++i) {
    if (sizes[i] < 1 || sizes[i - 1] < 1) throw ShapeError("layer sizes must be positive");
    p.layers.push_back(PinnLayer{Matrix::Zero(sizes[i], sizes[i - 1]), Vector::Zero(sizes[i])});
  }
  return p;
}

PinnParams PinnParams::random(std::span<const Index> sizes, std::mt19937_64& rng) {
  PinnParams p = zeros(sizes);
  for (auto& l : p.layers) fill_uniform(l.W, 1.0 / std::sqrt(static_cast<double>(l.W.cols())), rng);
  return p;
}

std::vector<ParamBlock> parameter_blocks(ModelParams& params) {
  return std::visit([](auto& p) { return p.blocks(); }, params);
}

std::size_t parameter_count(const ModelParams& params) {
  return std::visit([](const auto& p) { return p.parameter_count(); }, params);
}

// ---------------------------------------------------------------------------
// Plain evaluation

Vector equilibrium_fn(const PideqParams& params, double t, const Vector& z) {
  if (z.size() != params.n_z()) throw ShapeError("state size does not match n_z");
  return (params.A * z + t * params.a + params.b).array().tanh().matrix();
}

Matrix equilibrium_jacobian(const PideqParams& params, double t, const Vector& z) {
  const Vector s = equilibrium_fn(params, t, z);
  const Vector slope = (1.0 - s.array().square()).matrix();
  return slope.asDiagonal() * params.A;
}

DeqForwardRecord deq_forward(const PideqParams& params, double t, const SolverConfig& cfg) {
  params.validate();
  auto g = [&](const Vector& z) { return equilibrium_fn(params, t, z); };
  auto jac = [&](const Vector& z) { return equilibrium_jacobian(params, t, z); };
  DeqForwardRecord rec;
  rec.t = t;
  rec.solver = rootfind::solve(g, jac, Vector::Zero(params.n_z()), cfg);
  rec.z_star = rec.solver.solution;
  rec.output = params.C * rec.z_star;
  return rec;
}

PideqGradients implicit_vjp(const PideqParams& params, const DeqForwardRecord& record, const Vector& cotangent,
                            const SolverConfig& backward) {
  if (!record.solver.converged) throw NumericalError("implicit_vjp requires a converged forward record");
  if (cotangent.size() != params.n_out()) throw ShapeError("cotangent size does not match the model output");
  ad::Tape tape;
  const PideqVars p = bind(tape, params);
  const Var times = tape.scalar(record.t);
  const Var z = equilibrium_node(p, times, Matrix(record.z_star), backward);
  const Var loss = ad::sum(ad::hadamard(matmul(p.C, z), tape.vector(cotangent)));
  const ad::GradientMap g = ad::gradient(tape, loss, {p.A, p.a, p.b, p.C, times});
  PideqGradients out;
  out.A = g.value(p.A);
  out.a = g.value(p.a);
  out.b = g.value(p.b);
  out.C = g.value(p.C);
  out.t = g.value(times)(0, 0);
  return out;
}

Vector deq_time_derivative(const PideqParams& params, const DeqForwardRecord& record, const SolverConfig& backward) {
  if (!record.solver.converged) throw NumericalError("deq_time_derivative requires a converged forward record");
  ad::Tape tape;
  const PideqVars p = bind(tape, params);
  const Var times = tape.scalar(record.t);
  const Var z = equilibrium_node(p, times, Matrix(record.z_star), backward);
  const Var v = record_state_time_derivative(p, times, z, backward);
  return params.C * v.value();
}

double jacobian_frobenius(const PideqParams& params, const DeqForwardRecord& record) {
  return equilibrium_jacobian(params, record.t, record.z_star).norm();
}

Vector pinn_forward(const PinnParams& params, double t) {
  Vector h = Vector::Constant(1, t);
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    const auto& l = params.layers[i];
    if (l.W.cols() != h.size()) throw ShapeError("layer " + std::to_string(i) + " input size mismatch");
    h = l.W * h + l.b;
    if (i + 1 < params.layers.size()) h = h.array().tanh().matrix();
  }
  return h;
}

Vector pinn_time_derivative(const PinnParams& params, double t) {
  ad::Tape tape;
  PinnTapeModel model(tape, params);
  const Var times = tape.scalar(t);
  const RecordedBatch batch = model.record(times, true);
  return batch.time_derivative->value().col(0);
}

Index count_null_rows(const Matrix& A, double threshold) {
  if (!(threshold > 0.0)) throw std::invalid_argument("null-row threshold must be positive");
  Index n = 0;
  for (Index i = 0; i < A.rows(); ++i) {
    if (A.row(i).norm() < threshold) ++n;
  }
  return n;
}

// ---------------------------------------------------------------------------
// Tape evaluation

void ForwardStats::merge(const ForwardStats& other) {
  points += other.points;
  iterations += other.iterations;
  evaluations += other.evaluations;
  max_iterations = std::max(max_iterations, other.max_iterations);
  if (!other.all_converged && all_converged) diagnostic = other.diagnostic;
  all_converged = all_converged && other.all_converged;
}

PideqVars bind(ad::Tape& tape, const PideqParams& params) {
  params.validate();
  return PideqVars{tape.leaf(params.A), tape.vector(params.a), tape.vector(params.b), tape.leaf(params.C)};
}

ad::Var record_equilibrium_fn(const PideqVars& p, Var times, Var z) {
  require_times_row(times);
  return ad::tanh(pre_activation(p.A, p.a, p.b, times, z));
}

ad::Var record_equilibrium(const PideqVars& p, Var times, const SolverConfig& forward, const SolverConfig& backward,
                           ForwardStats* stats) {
  require_times_row(times);
  const Matrix& A = p.A.value();
  const Vector a = p.a.value().col(0);
  const Vector b = p.b.value().col(0);
  const Index n = A.rows();
  const Index batch = times.cols();

  Matrix z_star(n, batch);
  ForwardStats local;
  for (Index j = 0; j < batch; ++j) {
    const Vector offset = times.value()(0, j) * a + b;
    auto g = [&](const Vector& z) -> Vector { return (A * z + offset).array().tanh().matrix(); };
    auto jac = [&](const Vector& z) -> Matrix {
      const Vector s = (A * z + offset).array().tanh().matrix();
      return (1.0 - s.array().square()).matrix().asDiagonal() * A;
    };
    const SolverResult r = rootfind::solve(g, jac, Vector::Zero(n), forward);
    z_star.col(j) = r.solution;
    ++local.points;
    local.iterations += static_cast<std::size_t>(r.iterations);
    local.evaluations += static_cast<std::size_t>(r.evaluations);
    local.max_iterations = std::max(local.max_iterations, r.iterations);
    if (!r.converged && local.all_converged) {
      local.all_converged = false;
      std::ostringstream os;
      os << "forward solve (" << rootfind::to_string(forward.method) << ") failed at t=" << times.value()(0, j)
         << ": " << r.diagnostic;
      local.diagnostic = os.str();
    }
  }
  if (stats == nullptr && !local.all_converged) throw NumericalError(local.diagnostic);
  if (stats != nullptr) stats->merge(local);
  return equilibrium_node(p, times, std::move(z_star), backward);
}

ad::Var record_state_time_derivative(const PideqVars& p, Var times, Var z_star, const SolverConfig& backward) {
  const Var slope = tanh_slope(record_equilibrium_fn(p, times, z_star));
  const Var rhs = ad::hadamard(slope, ad::repeat_cols(p.a, times.cols()));
  auto forward_product = [&](const Var& v) { return ad::hadamard(slope, matmul(p.A, v)); };
  const auto solved = rootfind::neumann_solve(forward_product, rhs, backward);
  if (!solved.converged) {
    throw NumericalError("time-derivative solve did not converge after " + std::to_string(solved.iterations) +
                         " iterations (last change " + std::to_string(solved.last_change) + ")");
  }
  return solved.solution;
}

ad::Var record_jacobian_frobenius(const PideqVars& p, Var times, Var z_star) {
  const Var slope = tanh_slope(record_equilibrium_fn(p, times, z_star));
  const Var row_norms = ad::sum_rows(ad::hadamard(p.A, p.A));
  const Var squared = ad::sum_cols(ad::hadamard(ad::hadamard(slope, slope), ad::repeat_cols(row_norms, times.cols())));
  return ad::sqrt(squared);
}

ad::Var record_pinn(std::span<const Var> layer_vars, Var times) {
  require_times_row(times);
  if (layer_vars.empty() || layer_vars.size() % 2 != 0) throw ShapeError("expected (W, b) pairs");
  Var h = times;
  const std::size_t n_layers = layer_vars.size() / 2;
  for (std::size_t i = 0; i < n_layers; ++i) {
    h = matmul(layer_vars[2 * i], h) + ad::repeat_cols(layer_vars[2 * i + 1], times.cols());
    if (i + 1 < n_layers) h = ad::tanh(h);
  }
  return h;
}

PideqTapeModel::PideqTapeModel(ad::Tape& tape, const PideqParams& params, SolverConfig forward,
                               SolverConfig backward)
    : vars_(bind(tape, params)), forward_(forward), backward_(backward) {
  leaves_ = {vars_.A, vars_.a, vars_.b, vars_.C};
}

RecordedBatch PideqTapeModel::record(Var times, bool with_time_derivative) {
  RecordedBatch out;
  const Var z = record_equilibrium(vars_, times, forward_, backward_, &out.stats);
  if (!out.stats.all_converged) throw NumericalError(out.stats.diagnostic);
  out.value = matmul(vars_.C, z);
  if (with_time_derivative) {
    out.time_derivative = matmul(vars_.C, record_state_time_derivative(vars_, times, z, backward_));
  }
  out.jacobian_penalty = ad::mean(record_jacobian_frobenius(vars_, times, z));
  return out;
}

PinnTapeModel::PinnTapeModel(ad::Tape& tape, const PinnParams& params) {
  params.validate();
  for (const auto& l : params.layers) {
    leaves_.push_back(tape.leaf(l.W));
    leaves_.push_back(tape.vector(l.b));
  }
}

RecordedBatch PinnTapeModel::record(Var times, bool with_time_derivative) {
  RecordedBatch out;
  out.value = record_pinn(leaves_, times);
  if (with_time_derivative) {
    ad::Tape& tape = times.tape();
    std::vector<Var> rows;
    for (Index k = 0; k < out.value.rows(); ++k) {
      const Var component = ad::sum(ad::slice_rows(out.value, k, 1));
      const ad::GradientMap g = ad::gradient(tape, component, {times}, true);
      rows.push_back(g.contains(times) ? g.at(times) : tape.leaf(Matrix::Zero(1, times.cols())));
    }
    out.time_derivative = ad::concat_rows(rows);
  }
  return out;
}

std::unique_ptr<TapeModel> make_tape_model(ad::Tape& tape, const ModelParams& params, const SolverConfig& forward,
                                           const SolverConfig& backward) {
  if (const auto* p = std::get_if<PideqParams>(&params)) {
    return std::make_unique<PideqTapeModel>(tape, *p, forward, backward);
  }
  return std::make_unique<PinnTapeModel>(tape, std::get<PinnParams>(params));
}

Vector predict(const ModelParams& params, double t, const SolverConfig& forward, SolverResult* diagnostics) {
  if (const auto* p = std::get_if<PideqParams>(&params)) {
    DeqForwardRecord rec = deq_forward(*p, t, forward);
    if (!rec.solver.converged) {
      throw NumericalError("forward solve failed at t=" + std::to_string(t) + ": " + rec.solver.diagnostic);
    }
    if (diagnostics) *diagnostics = std::move(rec.solver);
    return rec.output;
  }
  return pinn_forward(std::get<PinnParams>(params), t);
}

// ---------------------------------------------------------------------------
// Checkpoints:
//
//   pideq-lab-checkpoint 1
//   kind <pideq|pinn>
//   shape <count> <dims...>       pideq: n_z n_out; pinn: layer sizes
//   seed <u64>
//   blocks <count>
//   <name> <rows> <cols>          followed by rows x cols hex floats, row-major
//   ...
//   end

void save_checkpoint(std::ostream& os, const ModelParams& params, std::uint64_t seed) {
  ModelParams copy = params;
  std::vector<Index> shape;
  std::string kind;
  if (const auto* p = std::get_if<PideqParams>(&params)) {
    p->validate();
    kind = "pideq";
    shape = {p->n_z(), p->n_out()};
  } else {
    const auto& n = std::get<PinnParams>(params);
    n.validate();
    kind = "pinn";
    shape = n.sizes();
  }
  const std::vector<ParamBlock> blocks = parameter_blocks(copy);
  os << "pideq-lab-checkpoint 1\n";
  os << "kind " << kind << "\n";
  os << "shape " << shape.size();
  for (Index d : shape) os << ' ' << d;
  os << "\nseed " << seed << "\n";
  os << "blocks " << blocks.size() << "\n";
  for (const ParamBlock& blk : blocks) {
    os << blk.name << ' ' << blk.rows << ' ' << blk.cols << "\n";
    const Eigen::Map<const Matrix> m(blk.data.data(), blk.rows, blk.cols);
    for (Index i = 0; i < m.rows(); ++i) {
      for (Index j = 0; j < m.cols(); ++j) {
        if (j) os << ' ';
        write_hex(os, m(i, j));
      }
      os << "\n";
    }
  }
  os << "end\n";
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, std::uint64_t seed) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  save_checkpoint(os, params, seed);
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

ModelParams load_checkpoint(std::istream& is, CheckpointHeader* header) {
  expect_token(is, "pideq-lab-checkpoint");
  expect_token(is, "1");
  CheckpointHeader h;
  expect_token(is, "kind");
  is >> h.kind;
  expect_token(is, "shape");
  std::size_t dims = 0;
  is >> dims;
  if (!is || dims > 64) throw std::runtime_error("checkpoint: malformed shape");
  h.shape.resize(dims);
  for (auto& d : h.shape) is >> d;
  expect_token(is, "seed");
  is >> h.seed;
  if (!is) throw std::runtime_error("checkpoint: malformed header");

  ModelParams params;
  if (h.kind == "pideq") {
    if (h.shape.size() != 2) throw std::runtime_error("checkpoint: pideq shape needs n_z and n_out");
    params = PideqParams::zeros(h.shape[0], h.shape[1]);
  } else if (h.kind == "pinn") {
    params = PinnParams::zeros(h.shape);
  } else {
    throw std::runtime_error("checkpoint: unknown model kind '" + h.kind + "'");
  }

  std::vector<ParamBlock> blocks = parameter_blocks(params);
  expect_token(is, "blocks");
  std::size_t count = 0;
  is >> count;
  if (count != blocks.size()) throw std::runtime_error("checkpoint: block count does not match the model shape");
  for (ParamBlock& blk : blocks) {
    std::string name;
    Index rows = 0, cols = 0;
    is >> name >> rows >> cols;
    if (name != blk.name || rows != blk.rows || cols != blk.cols) {
      throw std::runtime_error("checkpoint: unexpected block '" + name + "'");
    }
    Eigen::Map<Matrix> m(blk.data.data(), rows, cols);
    for (Index i = 0; i < rows; ++i) {
      for (Index j = 0; j < cols; ++j) m(i, j) = read_hex(is);
    }
  }
  expect_token(is, "end");
  if (header) *header = std::move(h);
  return params;
}

ModelParams load_checkpoint(const std::filesystem::path& path, CheckpointHeader* header) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  return load_checkpoint(is, header);
}

}  // namespace pideq::models
