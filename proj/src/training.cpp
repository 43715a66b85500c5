#include "pideq/training.hpp"

#include <algorithm>
#include <atomic>
#include <cassert>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <limits>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "pideq/errors.hpp"
#include "pideq/random.hpp"

namespace pideq::training {
namespace {

constexpr std::string_view kFields[] = {"j_b", "j_n", "jac_penalty", "total", "iae", "solver_iters"};

double field(const CurveRecord& r, std::size_t i) {
  switch (i) {
    case 0: return r.j_b;
    case 1: return r.j_n;
    case 2: return r.jac_penalty;
    case 3: return r.total;
    case 4: return r.iae;
    default: return r.solver_iters;
  }
}

double& field(CurveRecord& r, std::size_t i) {
  switch (i) {
    case 0: return r.j_b;
    case 1: return r.j_n;
    case 2: return r.jac_penalty;
    case 3: return r.total;
    case 4: return r.iae;
    default: return r.solver_iters;
  }
}

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_outputs(const TrainConfig& cfg, TrainResult& result) {
  if (!cfg.output_dir) return;
  const std::filesystem::path dir = *cfg.output_dir;
  std::filesystem::create_directories(dir);
  {
    const auto path = dir / "curve.csv";
    std::ofstream os(path, std::ios::binary);
    write_curve_csv(os, result.curve);
    result.artifacts.push_back(path);
  }
  const auto final_path = dir / "checkpoint_final.txt";
  models::save_checkpoint(final_path, result.final_params, cfg.seed);
  result.artifacts.push_back(final_path);
  const auto best_path = dir / "checkpoint_best.txt";
  models::save_checkpoint(best_path, result.best_params, cfg.seed);
  result.artifacts.push_back(best_path);
}

}  // namespace

void AdamConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in (0, 1)");
  if (!(epsilon > 0.0)) throw ConfigError("Adam epsilon must be positive");
}

AdamState::AdamState(AdamConfig cfg, std::span<const models::ParamBlock> blocks) : cfg_(cfg) {
  cfg_.validate();
  for (const auto& b : blocks) {
    m_.push_back(Matrix::Zero(b.rows, b.cols));
    v_.push_back(Matrix::Zero(b.rows, b.cols));
  }
}

void AdamState::step(std::span<models::ParamBlock> params, std::span<const Matrix> grads) {
  if (params.size() != m_.size() || grads.size() != m_.size()) throw ShapeError("Adam: block count mismatch");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (grads[k].rows() != params[k].rows || grads[k].cols() != params[k].cols) {
      throw ShapeError("Adam: gradient shape mismatch for block " + params[k].name);
    }
    if (!grads[k].allFinite()) throw NumericalError("Adam: non-finite gradient for block " + params[k].name);
  }
  ++step_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  [[maybe_unused]] const double bound = cfg_.lr / (1.0 - cfg_.beta1) / std::sqrt(1.0 - cfg_.beta2);
  for (std::size_t k = 0; k < params.size(); ++k) {
    m_[k] = cfg_.beta1 * m_[k] + (1.0 - cfg_.beta1) * grads[k];
    v_[k] = cfg_.beta2 * v_[k] + (1.0 - cfg_.beta2) * grads[k].cwiseAbs2();
    Eigen::Map<Matrix> p(params[k].data.data(), params[k].rows, params[k].cols);
    const Matrix delta =
        -cfg_.lr * ((m_[k].array() / c1) / ((v_[k].array() / c2).sqrt() + cfg_.epsilon)).matrix();
    assert((delta.cwiseAbs().array() <= bound).all());
    p += delta;
  }
}

std::string_view to_string(ModelKind kind) { return kind == ModelKind::Pideq ? "pideq" : "pinn"; }

ModelKind parse_model_kind(std::string_view name) {
  if (name == "pideq") return ModelKind::Pideq;
  if (name == "pinn") return ModelKind::Pinn;
  throw ConfigError("unknown model kind '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
  if (model == ModelKind::Pideq && n_z < 1) throw ConfigError("n_z must be positive");
  if (model == ModelKind::Pinn) {
    if (hidden_layers.empty()) throw ConfigError("the network needs at least one hidden layer");
    for (int w : hidden_layers) {
      if (w < 1) throw ConfigError("hidden layer widths must be positive");
    }
  }
  solver.validate();
  backward.validate();
  weights.validate();
  adam.validate();
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (collocation_n < 1) throw ConfigError("collocation_n must be at least 1");
  if (eval_every < 1) throw ConfigError("eval_every must be at least 1");
  if (iae_points < 1 || reference_steps < 1) throw ConfigError("iae_points and reference_steps must be positive");
  if (reference_steps % iae_points != 0) throw ConfigError("reference_steps must be a multiple of iae_points");
}

std::vector<double> LearningCurve::column(std::string_view name) const {
  std::vector<double> out;
  out.reserve(records.size());
  if (name == "epoch") {
    for (const auto& r : records) out.push_back(r.epoch);
    return out;
  }
  for (std::size_t i = 0; i < std::size(kFields); ++i) {
    if (kFields[i] == name) {
      for (const auto& r : records) out.push_back(field(r, i));
      return out;
    }
  }
  throw std::invalid_argument("unknown curve column '" + std::string(name) + "'");
}

void write_curve_csv(std::ostream& os, const LearningCurve& curve) {
  os << kCurveHeader << '\n';
  for (const auto& r : curve.records) {
    os << r.epoch;
    for (std::size_t i = 0; i < std::size(kFields); ++i) os << ',' << fmt17(field(r, i));
    os << '\n';
  }
}

LearningCurve read_curve_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kCurveHeader) throw std::runtime_error("learning curve CSV has an unexpected header");
  LearningCurve curve;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> v;
    while (std::getline(ss, cell, ',')) v.push_back(std::stod(cell));
    if (v.size() != 1 + std::size(kFields)) throw std::runtime_error("learning curve CSV row has wrong width");
    CurveRecord r;
    r.epoch = static_cast<int>(v[0]);
    for (std::size_t i = 0; i < std::size(kFields); ++i) field(r, i) = v[i + 1];
    curve.records.push_back(r);
  }
  return curve;
}

models::ModelParams initial_params(const TrainConfig& cfg) {
  std::mt19937_64 rng(derive_seed(cfg.seed, 0x1a17));
  if (cfg.model == ModelKind::Pideq) return models::PideqParams::random(cfg.n_z, 2, rng);
  std::vector<Eigen::Index> sizes{1};
  for (int w : cfg.hidden_layers) sizes.push_back(w);
  sizes.push_back(2);
  return models::PinnParams::random(sizes, rng);
}

reference::Trajectory reference_on_grid(const physics::IvpSpec& ivp, int reference_steps, int iae_points) {
  return reference::subsample(reference::integrate(ivp, reference_steps), iae_points);
}

double evaluate_iae(const models::ModelParams& params, const physics::IvpSpec& ivp,
                    const reference::Trajectory& reference_grid, const rootfind::SolverConfig& forward) {
  const int n_points = static_cast<int>(reference_grid.size()) - 1;
  const auto pred = reference::evaluate_on_grid(
      [&](double t) { return models::predict(params, t, forward); }, ivp, n_points);
  return reference::iae(pred, reference_grid).iae;
}

TrainResult train(const TrainConfig& cfg, const physics::IvpSpec& ivp, const reference::Trajectory* reference_grid) {
  cfg.validate();
  ivp.validate();
  reference::Trajectory own_reference;
  if (reference_grid == nullptr) {
    own_reference = reference_on_grid(ivp, cfg.reference_steps, cfg.iae_points);
    reference_grid = &own_reference;
  }

  TrainResult result;
  result.seed = cfg.seed;
  result.final_params = initial_params(cfg);
  result.best_params = result.final_params;
  result.best_iae = std::numeric_limits<double>::infinity();
  std::vector<models::ParamBlock> blocks = models::parameter_blocks(result.final_params);
  AdamState adam(cfg.adam, blocks);

  ad::Tape tape;
  std::vector<Matrix> grads;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    tape.clear();
    const std::vector<double> points =
        physics::sample_collocation(ivp, static_cast<std::size_t>(cfg.collocation_n), derive_seed(cfg.seed, epoch));
    CurveRecord rec;
    rec.epoch = epoch;
    try {
      auto model = models::make_tape_model(tape, result.final_params, cfg.solver, cfg.backward);
      const physics::LossBreakdown loss = physics::total_loss(*model, tape, ivp, points, cfg.weights);
      rec.j_b = loss.boundary_value();
      rec.j_n = loss.physics_value();
      rec.jac_penalty = loss.penalty_value();
      rec.total = loss.total_value();
      rec.solver_iters = loss.stats.mean_iterations();
      result.forward_points += loss.stats.points;
      result.forward_iterations += loss.stats.iterations;
      result.forward_evaluations += loss.stats.evaluations;

      const ad::GradientMap g = ad::gradient(tape, loss.total, model->parameters());
      grads.clear();
      for (const ad::Var& p : model->parameters()) grads.push_back(g.value(p));
      adam.step(blocks, grads);
      result.epochs_run = epoch;

      if (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
        rec.iae = evaluate_iae(result.final_params, ivp, *reference_grid, cfg.solver);
        result.curve.records.push_back(rec);
        if (rec.iae < result.best_iae) {
          result.best_iae = rec.iae;
          result.best_epoch = epoch;
          result.best_params = result.final_params;
        }
      }
    } catch (const NumericalError& e) {
      result.ok = false;
      result.diagnostic = "epoch " + std::to_string(epoch) + ": " + e.what();
      break;
    }
  }
  if (!result.curve.empty()) result.final_iae = result.curve.records.back().iae;
  if (!std::isfinite(result.best_iae)) result.best_iae = result.final_iae;
  write_outputs(cfg, result);
  return result;
}

std::vector<double> moving_average(std::span<const double> series, std::size_t window) {
  if (window < 1) throw std::invalid_argument("moving average window must be at least 1");
  std::vector<double> out;
  out.reserve(series.size());
  for (std::size_t i = 0; i < series.size(); ++i) {
    const std::size_t first = i + 1 >= window ? i + 1 - window : 0;
    double sum = 0.0;
    for (std::size_t k = first; k <= i; ++k) sum += series[k];
    out.push_back(sum / static_cast<double>(i + 1 - first));
  }
  return out;
}

std::size_t SweepReport::successful() const {
  return static_cast<std::size_t>(std::count(failed.begin(), failed.end(), false));
}

std::vector<double> SweepReport::final_iaes() const {
  std::vector<double> out;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    if (!failed[i]) out.push_back(runs[i].final_iae);
  }
  return out;
}

void aggregate(SweepReport& report) {
  report.envelope.clear();
  report.median_run.reset();
  std::vector<std::size_t> ok;
  for (std::size_t i = 0; i < report.runs.size(); ++i) {
    if (!report.failed[i] && !report.runs[i].curve.empty()) ok.push_back(i);
  }
  if (ok.empty()) return;

  std::size_t length = std::numeric_limits<std::size_t>::max();
  for (std::size_t i : ok) length = std::min(length, report.runs[i].curve.records.size());
  for (std::size_t k = 0; k < length; ++k) {
    EnvelopeRecord env;
    env.epoch = report.runs[ok.front()].curve.records[k].epoch;
    for (std::size_t f = 0; f < std::size(kFields); ++f) {
      double sum = 0.0;
      double lo = std::numeric_limits<double>::infinity();
      double hi = -lo;
      for (std::size_t i : ok) {
        const double v = field(report.runs[i].curve.records[k], f);
        sum += v;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      field(env.mean, f) = sum / static_cast<double>(ok.size());
      field(env.min, f) = lo;
      field(env.max, f) = hi;
    }
    env.mean.epoch = env.min.epoch = env.max.epoch = env.epoch;
    report.envelope.push_back(env);
  }

  std::vector<std::size_t> order = ok;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return report.runs[x].final_iae < report.runs[y].final_iae; });
  // Lower median for even counts.
  report.median_run = order[(order.size() - 1) / 2];
}

SweepReport seed_sweep(const TrainConfig& cfg, int n_runs, const physics::IvpSpec& ivp, int jobs,
                       const std::function<std::string(std::uint64_t)>& run_dir_name) {
  if (n_runs < 1) throw ConfigError("n_runs must be at least 1");
  cfg.validate();
  const reference::Trajectory ref = reference_on_grid(ivp, cfg.reference_steps, cfg.iae_points);

  SweepReport report;
  report.runs.resize(static_cast<std::size_t>(n_runs));
  report.failed.assign(static_cast<std::size_t>(n_runs), false);
  std::atomic<int> next{0};
  std::mutex failure_mutex;
  auto worker = [&] {
    for (int i = next++; i < n_runs; i = next++) {
      TrainConfig run_cfg = cfg;
      run_cfg.seed = cfg.seed + static_cast<std::uint64_t>(i);
      if (cfg.output_dir) {
        const std::string name = run_dir_name ? run_dir_name(run_cfg.seed) : "seed-" + std::to_string(run_cfg.seed);
        run_cfg.output_dir = *cfg.output_dir / name;
      }
      TrainResult r;
      try {
        r = train(run_cfg, ivp, &ref);
      } catch (const std::exception& e) {
        r.ok = false;
        r.seed = run_cfg.seed;
        r.diagnostic = e.what();
      }
      std::lock_guard<std::mutex> lock(failure_mutex);
      report.failed[static_cast<std::size_t>(i)] = !r.ok;
      report.runs[static_cast<std::size_t>(i)] = std::move(r);
    }
  };
  const int threads = std::clamp(jobs, 1, n_runs);
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int k = 0; k < threads; ++k) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  aggregate(report);
  return report;
}

void write_aggregate_csv(std::ostream& os, const SweepReport& report) {
  os << "epoch";
  for (auto f : kFields) os << ',' << f << "_mean," << f << "_min," << f << "_max";
  os << '\n';
  for (const auto& env : report.envelope) {
    os << env.epoch;
    for (std::size_t f = 0; f < std::size(kFields); ++f) {
      os << ',' << fmt17(field(env.mean, f)) << ',' << fmt17(field(env.min, f)) << ',' << fmt17(field(env.max, f));
    }
    os << '\n';
  }
}

}  // namespace pideq::training
