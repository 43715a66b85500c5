#pragma once

// Shared helpers for the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "pideq/autodiff.hpp"
#include "pideq/models.hpp"
#include "pideq/random.hpp"

namespace pideq::testing {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// ||a - b|| / max(||b||, floor).
inline double rel_error(const Matrix& a, const Matrix& b, double floor = 1e-8) {
  return (a - b).norm() / std::max(b.norm(), floor);
}

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = uniform(rng, -scale, scale);
  }
  return m;
}

inline Matrix scale_spectral(Matrix m, double bound) {
  const double s = Eigen::JacobiSVD<Matrix>(m).singularValues()(0);
  if (s > bound) m *= bound / s;
  return m;
}

/// A random scalar function of a vector built from tanh-affine layers and a
/// randomly chosen head. The same recipe can be re-recorded on any tape.
struct Composition {
  std::vector<Matrix> weights;
  std::vector<Vector> biases;
  Vector head_weights;
  int head = 0;
  Eigen::Index input_dim = 0;

  static Composition random(std::mt19937_64& rng) {
    Composition c;
    c.input_dim = 1 + static_cast<Eigen::Index>(rng() % 4);
    const int depth = 1 + static_cast<int>(rng() % 3);
    Eigen::Index width = c.input_dim;
    for (int k = 0; k < depth; ++k) {
      const Eigen::Index next = 1 + static_cast<Eigen::Index>(rng() % 4);
      c.weights.push_back(random_matrix(next, width, rng));
      c.biases.push_back(random_matrix(next, 1, rng, 0.5).col(0));
      width = next;
    }
    c.head_weights = random_matrix(width, 1, rng).col(0);
    c.head = static_cast<int>(rng() % 5);
    return c;
  }

  ad::Var record(ad::Tape& tape, ad::Var x) const {
    ad::Var h = x;
    for (std::size_t k = 0; k < weights.size(); ++k) {
      h = ad::tanh(ad::matmul(tape.leaf(weights[k]), h) + tape.vector(biases[k]));
    }
    const ad::Var w = tape.vector(head_weights);
    switch (head) {
      case 0: return ad::sum(ad::hadamard(w, h));
      case 1: return ad::squared_norm(h - w) * 0.5;
      case 2: return ad::frobenius_norm(h + w) + ad::mean(h);
      case 3: return ad::sum(ad::hadamard(ad::tanh(h), h)) - ad::matmul(w, h, true);
      default: {
        const ad::Var both = ad::concat_rows({h, ad::hadamard(h, w)});
        return ad::squared_norm(ad::tanh(both)) + 0.3 * ad::sum(ad::sqrt(ad::hadamard(h, h) + 1.0));
      }
    }
  }

  [[nodiscard]] double value(const Vector& x) const {
    ad::Tape tape;
    return record(tape, tape.vector(x)).scalar();
  }

  [[nodiscard]] Vector grad(const Vector& x) const {
    ad::Tape tape;
    const ad::Var xv = tape.vector(x);
    const ad::Var out = record(tape, xv);
    return ad::gradient(tape, out, {xv}).value(xv).col(0);
  }
};

/// PIDEQ with every block random and A scaled to a spectral norm bound.
inline models::PideqParams random_pideq(Eigen::Index n_z, std::mt19937_64& rng, double a_bound = 0.8) {
  models::PideqParams p;
  p.A = scale_spectral(random_matrix(n_z, n_z, rng), a_bound);
  p.a = random_matrix(n_z, 1, rng).col(0);
  p.b = random_matrix(n_z, 1, rng, 0.5).col(0);
  p.C = random_matrix(2, n_z, rng);
  return p;
}

inline rootfind::SolverConfig tight_solver(rootfind::Method method = rootfind::Method::Simple) {
  rootfind::SolverConfig cfg;
  cfg.method = method;
  cfg.tolerance = 1e-13;
  cfg.max_iterations = 5000;
  return cfg;
}

/// Flattens every parameter block (column-major, block order).
inline Vector flatten(models::ModelParams& params) {
  std::vector<double> out;
  for (const auto& b : models::parameter_blocks(params)) out.insert(out.end(), b.data.begin(), b.data.end());
  return Eigen::Map<Vector>(out.data(), static_cast<Eigen::Index>(out.size()));
}

inline void unflatten(models::ModelParams& params, const Vector& flat) {
  Eigen::Index k = 0;
  for (auto& b : models::parameter_blocks(params)) {
    for (double& v : b.data) v = flat(k++);
  }
}

}  // namespace pideq::testing
