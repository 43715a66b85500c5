#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "pideq/errors.hpp"
#include "pideq/training.hpp"

using namespace pideq;
using namespace pideq::training;

namespace {

namespace fs = std::filesystem;

TrainConfig quick(ModelKind kind, int epochs) {
  TrainConfig cfg;
  cfg.model = kind;
  cfg.n_z = 4;
  cfg.hidden_layers = {6, 6};
  cfg.epochs = epochs;
  cfg.collocation_n = 10;
  cfg.eval_every = 5;
  cfg.reference_steps = 2000;
  cfg.iae_points = 100;
  return cfg;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("pideq-test-" + name);
  fs::remove_all(dir);
  return dir;
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("adam examples") {
  Eigen::MatrixXd w(2, 1);
  w << 1.0, -2.0;
  std::vector<models::ParamBlock> blocks{{"w", std::span<double>(w.data(), 2), 2, 1}};
  AdamState adam(AdamConfig{}, blocks);

  const std::vector<Eigen::MatrixXd> zero{Eigen::MatrixXd::Zero(2, 1)};
  adam.step(blocks, zero);
  CHECK(w(0) == 1.0);
  CHECK(w(1) == -2.0);

  AdamState fresh(AdamConfig{}, blocks);
  Eigen::MatrixXd g(2, 1);
  g << 3.0, -0.01;
  const std::vector<Eigen::MatrixXd> grads{g};
  fresh.step(blocks, grads);
  CHECK(w(0) == doctest::Approx(1.0 - 1e-3).epsilon(1e-9));
  CHECK(w(1) == doctest::Approx(-2.0 + 1e-3).epsilon(1e-6));
  CHECK(fresh.step_count() == 1);

  std::mt19937_64 rng(4);
  for (int k = 0; k < 200; ++k) {
    const Eigen::MatrixXd before = w;
    const std::vector<Eigen::MatrixXd> r{Eigen::MatrixXd::Random(2, 1) * 100.0};
    fresh.step(blocks, r);
    CHECK((w - before).cwiseAbs().maxCoeff() <= 1e-3 * 1.0 / std::sqrt(1 - 0.999) + 1e-12);
  }

  Eigen::MatrixXd nan_grad(2, 1);
  nan_grad << NAN, 0.0;
  const std::vector<Eigen::MatrixXd> bad{nan_grad};
  try {
    fresh.step(blocks, bad);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find('w') != std::string::npos);
  }
  const std::vector<Eigen::MatrixXd> wrong{Eigen::MatrixXd::Zero(3, 1)};
  CHECK_THROWS_AS(fresh.step(blocks, wrong), ShapeError);
  CHECK_THROWS_AS(AdamConfig({0.0}).validate(), ConfigError);
}

TEST_CASE("moving average") {
  const std::vector<double> x{1, 2, 3, 4, 5};
  CHECK(moving_average(x, 1) == x);
  CHECK(moving_average(x, 2) == std::vector<double>{1, 1.5, 2.5, 3.5, 4.5});
  CHECK(moving_average(x, 100) == std::vector<double>{1, 1.5, 2, 2.5, 3});
  CHECK_THROWS(moving_average(x, 0));
  std::vector<double> inc(50);
  for (std::size_t i = 0; i < inc.size(); ++i) inc[i] = std::sqrt(static_cast<double>(i));
  const auto smooth = moving_average(inc, 7);
  for (std::size_t i = 1; i < smooth.size(); ++i) CHECK(smooth[i] >= smooth[i - 1]);
}

TEST_CASE("curve csv round trip") {
  LearningCurve c;
  c.records.push_back({5, 0.1, 0.2, 0.3, 0.4, 0.5, 2.0});
  c.records.push_back({10, 1.0 / 3.0, 2e-9, 0.0, 1e5, 0.25, 1.5});
  std::stringstream ss;
  write_curve_csv(ss, c);
  const LearningCurve back = read_curve_csv(ss);
  REQUIRE(back.records.size() == 2);
  CHECK(back.records[1].j_b == c.records[1].j_b);
  CHECK(back.column("epoch") == std::vector<double>{5, 10});
  CHECK_THROWS((void)c.column("nope"));
}

TEST_CASE("single epoch writes artefacts") {
  for (ModelKind kind : {ModelKind::Pideq, ModelKind::Pinn}) {
    TrainConfig cfg = quick(kind, 1);
    cfg.output_dir = scratch(std::string(to_string(kind)));
    const TrainResult r = train(cfg, physics::make_vdp_ivp());
    CHECK(r.ok);
    CHECK(r.epochs_run == 1);
    REQUIRE(r.curve.records.size() == 1);
    CHECK(r.curve.records[0].epoch == 1);
    CHECK(fs::exists(*cfg.output_dir / "curve.csv"));
    CHECK(fs::exists(*cfg.output_dir / "checkpoint_final.txt"));
    CHECK(fs::exists(*cfg.output_dir / "checkpoint_best.txt"));
    std::ifstream in(*cfg.output_dir / "curve.csv");
    CHECK(read_curve_csv(in).records.size() == 1);
    fs::remove_all(*cfg.output_dir);
  }
}

TEST_CASE("training is deterministic") {
  for (ModelKind kind : {ModelKind::Pideq, ModelKind::Pinn}) {
    const TrainConfig cfg = quick(kind, 20);
    const TrainResult a = train(cfg, physics::make_vdp_ivp());
    const TrainResult b = train(cfg, physics::make_vdp_ivp());
    REQUIRE(a.curve.records.size() == b.curve.records.size());
    CHECK(a.curve.records.size() == 4);
    for (std::size_t k = 0; k < a.curve.records.size(); ++k) {
      CHECK(a.curve.records[k].total == b.curve.records[k].total);
      CHECK(a.curve.records[k].iae == b.curve.records[k].iae);
    }
    TrainConfig other = cfg;
    other.seed = 1;
    CHECK(train(other, physics::make_vdp_ivp()).final_iae != a.final_iae);
  }
}

TEST_CASE("boundary loss decreases without physics") {
  TrainConfig cfg = quick(ModelKind::Pinn, 200);
  cfg.weights = {0.0, 0.0};
  cfg.eval_every = 1;
  const TrainResult r = train(cfg, physics::make_vdp_ivp());
  CHECK(r.curve.records.back().j_b < 0.5 * r.curve.records.front().j_b);
}

TEST_CASE("best checkpoint tracks the minimum iae") {
  const TrainResult r = train(quick(ModelKind::Pinn, 40), physics::make_vdp_ivp());
  double best = r.curve.records.front().iae;
  for (const auto& rec : r.curve.records) best = std::min(best, rec.iae);
  CHECK(r.best_iae == best);
  CHECK(r.final_iae == r.curve.records.back().iae);
}

TEST_CASE("seed sweep aggregation") {
  const TrainConfig cfg = quick(ModelKind::Pinn, 15);
  SweepReport report = seed_sweep(cfg, 3, physics::make_vdp_ivp(), 2);
  CHECK(report.successful() == 3);
  CHECK(report.envelope.size() == 3);
  for (const auto& env : report.envelope) {
    CHECK(env.mean.iae >= env.min.iae);
    CHECK(env.mean.iae <= env.max.iae);
  }
  REQUIRE(report.median_run.has_value());
  auto finals = report.final_iaes();
  std::sort(finals.begin(), finals.end());
  CHECK(report.runs[*report.median_run].final_iae == finals[1]);
  for (std::size_t i = 0; i < 3; ++i) CHECK(report.runs[i].seed == i);

  SweepReport one = seed_sweep(cfg, 1, physics::make_vdp_ivp());
  for (std::size_t k = 0; k < one.envelope.size(); ++k) {
    CHECK(one.envelope[k].mean.iae == one.runs[0].curve.records[k].iae);
    CHECK(one.envelope[k].min.iae == one.envelope[k].max.iae);
  }
  std::stringstream ss;
  write_aggregate_csv(ss, report);
  std::string header;
  std::getline(ss, header);
  CHECK(header.find("iae_mean") != std::string::npos);
  CHECK(header.find("iae_min") != std::string::npos);

  // Even counts take the lower median.
  SweepReport even;
  for (double v : {0.4, 0.1, 0.3, 0.2}) {
    TrainResult t;
    t.curve.records.push_back({1, 0, 0, 0, 0, v, 0});
    t.final_iae = v;
    even.runs.push_back(t);
    even.failed.push_back(false);
  }
  aggregate(even);
  CHECK(even.runs[*even.median_run].final_iae == 0.2);
}

TEST_CASE("numerical failure is recorded") {
  TrainConfig cfg = quick(ModelKind::Pideq, 5);
  cfg.solver.method = rootfind::Method::Simple;
  cfg.solver.tolerance = 1e-15;
  cfg.solver.max_iterations = 1;
  cfg.output_dir = scratch("failure");
  const TrainResult r = train(cfg, physics::make_vdp_ivp());
  CHECK_FALSE(r.ok);
  CHECK_FALSE(r.diagnostic.empty());
  CHECK(fs::exists(*cfg.output_dir / "curve.csv"));
  fs::remove_all(*cfg.output_dir);
  cfg.output_dir.reset();

  SweepReport report = seed_sweep(cfg, 2, physics::make_vdp_ivp());
  CHECK(report.successful() == 0);
  CHECK_FALSE(report.median_run.has_value());
}

TEST_CASE("config validation") {
  TrainConfig cfg = quick(ModelKind::Pinn, 1);
  cfg.reference_steps = 1001;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = quick(ModelKind::Pinn, 0);
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK(parse_model_kind("pinn") == ModelKind::Pinn);
  CHECK_THROWS_AS(parse_model_kind("mlp"), ConfigError);
}

}  // TEST_SUITE
