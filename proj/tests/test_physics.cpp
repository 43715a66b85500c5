#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pideq/errors.hpp"
#include "pideq/physics.hpp"
#include "support.hpp"

using namespace pideq;
using namespace pideq::physics;
using pideq::testing::random_pideq;
using pideq::testing::rel_error;
using pideq::testing::tight_solver;

namespace {

using Matrix = Eigen::MatrixXd;

// Hand-built batch: prediction and derivative given directly.
models::RecordedBatch fixed_batch(ad::Tape& tape, const Matrix& value, const Matrix& derivative) {
  models::RecordedBatch b{tape.leaf(value), tape.leaf(derivative), std::nullopt, {}};
  return b;
}

double oracle_physics(const Matrix& y, const Matrix& dy, const std::vector<double>& times, double mu = 1.0) {
  double acc = 0.0;
  for (Eigen::Index j = 0; j < y.cols(); ++j) {
    const Eigen::Vector2d n = vdp_dynamics(times[static_cast<std::size_t>(j)], Eigen::Vector2d(y(0, j), y(1, j)),
                                           VdpConfig{mu});
    acc += (dy.col(j) - n).squaredNorm();
  }
  return acc;
}

Matrix row(const std::vector<double>& t) {
  Matrix r(1, static_cast<Eigen::Index>(t.size()));
  for (std::size_t j = 0; j < t.size(); ++j) r(0, static_cast<Eigen::Index>(j)) = t[j];
  return r;
}

}  // namespace

TEST_SUITE("physics") {

TEST_CASE("van der pol dynamics") {
  CHECK(vdp_dynamics(0.0, Eigen::Vector2d(0, 0)).isZero());
  CHECK(vdp_dynamics(0.0, Eigen::Vector2d(0, 0.1)).isApprox(Eigen::Vector2d(0.1, 0.1)));
  CHECK(vdp_dynamics(0.0, Eigen::Vector2d(2, 1)).isApprox(Eigen::Vector2d(1, -5)));
  CHECK(vdp_dynamics(0.0, Eigen::Vector2d(2, 1), VdpConfig{0.0}).isApprox(Eigen::Vector2d(1, -2)));
  ad::Tape tape;
  Matrix s(2, 2);
  s << 0, 2, 0.1, 1;
  const Matrix v = vdp_dynamics(tape.leaf(Matrix::Zero(1, 2)), tape.leaf(s)).value();
  CHECK(v.col(0).isApprox(Eigen::Vector2d(0.1, 0.1)));
  CHECK(v.col(1).isApprox(Eigen::Vector2d(1, -5)));
}

TEST_CASE("ivp validation") {
  IvpSpec ivp = make_vdp_ivp();
  CHECK_NOTHROW(ivp.validate());
  CHECK(ivp.y0 == Eigen::Vector2d(0, 0.1));
  ivp.horizon = ivp.t0;
  CHECK_THROWS_AS(ivp.validate(), ConfigError);
  CHECK_THROWS_AS(make_vdp_ivp({}, 0.0, 2.0, Eigen::Vector3d(0, 0, 0)).validate(), ConfigError);
}

TEST_CASE("boundary loss examples") {
  const IvpSpec ivp = make_vdp_ivp();
  CHECK(boundary_loss(Eigen::Vector2d(0, 0.1), ivp) == 0.0);
  CHECK(boundary_loss(Eigen::Vector2d(1, 0.1), ivp) == doctest::Approx(1.0));
  CHECK(boundary_loss(Eigen::Vector2d(0.5, 0.1), ivp) == doctest::Approx(0.25));
  ad::Tape tape;
  CHECK(boundary_loss(tape.vector(Eigen::Vector2d(0.5, 0.1)), ivp).scalar() == doctest::Approx(0.25));
}

TEST_CASE("physics loss examples") {
  const IvpSpec ivp = make_vdp_ivp();
  const std::vector<double> times{0.0, 1.0};
  ad::Tape tape;
  const ad::Var t = tape.leaf(row(times));
  // Zero state with zero derivative is an equilibrium.
  CHECK(physics_loss(fixed_batch(tape, Matrix::Zero(2, 2), Matrix::Zero(2, 2)), t, ivp).scalar() == 0.0);

  Matrix y(2, 2), dy(2, 2);
  y << 0, 2, 0.1, 1;
  dy << 0.1, 1, 0.1, -5;
  CHECK(physics_loss(fixed_batch(tape, y, dy), t, ivp).scalar() == doctest::Approx(0.0).epsilon(1e-14));
  dy(0, 0) += 1.0;
  dy(1, 1) += 2.0;
  CHECK(physics_loss(fixed_batch(tape, y, dy), t, ivp).scalar() == doctest::Approx(5.0));

  models::RecordedBatch missing{tape.leaf(y), std::nullopt, std::nullopt, {}};
  CHECK_THROWS(physics_loss(missing, t, ivp));
}

TEST_CASE("physics loss matches a term-by-term oracle") {
  const IvpSpec ivp = make_vdp_ivp();
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::Index n = 1 + static_cast<Eigen::Index>(rng() % 8);
    const Matrix y = pideq::testing::random_matrix(2, n, rng, 2.0);
    const Matrix dy = pideq::testing::random_matrix(2, n, rng, 3.0);
    std::vector<double> times(static_cast<std::size_t>(n));
    for (double& v : times) v = uniform(rng, 0.0, 2.0);
    ad::Tape tape;
    const double ours = physics_loss(fixed_batch(tape, y, dy), tape.leaf(row(times)), ivp).scalar();
    CHECK(ours == doctest::Approx(oracle_physics(y, dy, times)).epsilon(1e-12));
  }
}

TEST_CASE("loss invariants") {
  const IvpSpec ivp = make_vdp_ivp();
  std::mt19937_64 rng(9);
  std::vector<double> points(12);
  for (double& v : points) v = uniform(rng, 0.0, 2.0);
  const models::ModelParams p = random_pideq(4, rng);

  const auto evaluate = [&](const std::vector<double>& pts, LossWeights w) {
    ad::Tape tape;
    auto model = models::make_tape_model(tape, p, tight_solver(), tight_solver());
    const LossBreakdown l = total_loss(*model, tape, ivp, pts, w);
    return std::array<double, 4>{l.total_value(), l.boundary_value(), l.physics_value(), l.penalty_value()};
  };

  const auto base = evaluate(points, LossWeights{0.0, 0.0});
  CHECK(base[0] == doctest::Approx(base[1]).epsilon(1e-14));
  for (double lambda : {0.1, 1.0, 3.5}) {
    const auto l = evaluate(points, LossWeights{lambda, 0.0});
    CHECK(l[0] == doctest::Approx(base[1] + lambda * base[2]).epsilon(1e-12));
  }
  const auto full = evaluate(points, LossWeights{0.1, 1.0});
  CHECK(full[0] == doctest::Approx(combine(LossWeights{0.1, 1.0}, full[1], full[2], full[3])).epsilon(1e-12));
  CHECK(full[1] >= 0.0);
  CHECK(full[2] >= 0.0);
  CHECK(full[3] >= 0.0);

  std::vector<double> shuffled = points;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  const auto perm = evaluate(shuffled, LossWeights{0.1, 1.0});
  CHECK(perm[0] == doctest::Approx(full[0]).epsilon(1e-12));

  // The zero network predicts the origin, which is an equilibrium.
  const std::vector<Eigen::Index> sizes{1, 3, 2};
  const models::ModelParams zero = models::PinnParams::zeros(sizes);
  ad::Tape tape;
  auto model = models::make_tape_model(tape, zero, {}, {});
  const LossBreakdown l = total_loss(*model, tape, ivp, points, LossWeights{0.1, 1.0});
  CHECK(l.physics_value() == 0.0);
  CHECK(l.penalty_value() == 0.0);
  CHECK(l.boundary_value() == doctest::Approx(0.01));
}

TEST_CASE("combine examples") {
  CHECK(combine(LossWeights{0.1, 1.0}, 1.0, 0.0, 0.0) == 1.0);
  CHECK(combine(LossWeights{0.1, 1.0}, 0.5, 2.0, 0.3) == doctest::Approx(1.0));
  CHECK_THROWS_AS(LossWeights({-1.0, 0.0}).validate(), ConfigError);
}

TEST_CASE("collocation sampling") {
  const IvpSpec ivp = make_vdp_ivp();
  const auto a = sample_collocation(ivp, 100, 3);
  CHECK(a == sample_collocation(ivp, 100, 3));
  CHECK(a != sample_collocation(ivp, 100, 4));
  CHECK(std::all_of(a.begin(), a.end(), [](double t) { return t >= 0.0 && t <= 2.0; }));
  const auto big = sample_collocation(ivp, 10000, 11);
  const double mean = std::accumulate(big.begin(), big.end(), 0.0) / 10000.0;
  const double sigma = 2.0 / std::sqrt(12.0) / 100.0;
  CHECK(std::abs(mean - 1.0) <= 4.0 * sigma);
}

TEST_CASE("total loss gradient matches finite differences") {
  const IvpSpec ivp = make_vdp_ivp();
  std::mt19937_64 rng(23);
  std::vector<double> points(6);
  for (double& v : points) v = uniform(rng, 0.0, 2.0);
  const std::vector<Eigen::Index> sizes{1, 4, 4, 2};
  for (int kind = 0; kind < 2; ++kind) {
    models::ModelParams p = kind == 0 ? models::ModelParams{random_pideq(3, rng)}
                                      : models::ModelParams{models::PinnParams::random(sizes, rng)};
    if (kind == 1) {
      for (auto& layer : std::get<models::PinnParams>(p).layers) layer.b = pideq::testing::random_matrix(layer.b.size(), 1, rng, 0.3).col(0);
    }
    const auto loss = [&](const models::ModelParams& q, std::vector<Matrix>* grads) {
      ad::Tape tape;
      auto model = models::make_tape_model(tape, q, tight_solver(), tight_solver());
      const LossBreakdown l = total_loss(*model, tape, ivp, points, LossWeights{0.1, 1.0});
      if (grads) {
        const ad::GradientMap g = ad::gradient(tape, l.total, model->parameters());
        for (const auto& v : model->parameters()) grads->push_back(g.value(v));
      }
      return l.total_value();
    };
    std::vector<Matrix> grads;
    loss(p, &grads);
    const Eigen::VectorXd theta = pideq::testing::flatten(p);
    Eigen::VectorXd ours(theta.size());
    Eigen::Index k = 0;
    for (const auto& g : grads) {
      ours.segment(k, g.size()) = g.reshaped();
      k += g.size();
    }
    const Eigen::VectorXd fd = ad::finite_difference_gradient(
        [&](const Eigen::VectorXd& th) {
          models::ModelParams q = p;
          pideq::testing::unflatten(q, th);
          return loss(q, nullptr);
        },
        theta, 1e-6);
    CHECK(rel_error(ours, fd) <= 1e-3);
  }
}

}  // TEST_SUITE
