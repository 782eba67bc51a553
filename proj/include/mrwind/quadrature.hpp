#pragma once

#include <cmath>
#include <numbers>

#include <Eigen/Dense>

#include "mrwind/error.hpp"

namespace mrwind {

/// Gauss-Hermite rule for the weight exp(-x^2): sum_k w_k g(x_k) approximates
/// the integral of g(x) exp(-x^2) over the real line.
struct GaussHermite {
  Eigen::VectorXd nodes;
  Eigen::VectorXd weights;

  explicit GaussHermite(int order = 20) {
    if (order < 1)
      throw Error(Errc::config, "Gauss-Hermite order must be >= 1");
    // Golub-Welsch: eigen-decomposition of the Jacobi matrix.
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(order, order);
    for (int k = 1; k < order; ++k)
      J(k - 1, k) = J(k, k - 1) = std::sqrt(k / 2.0);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
    nodes = es.eigenvalues();
    weights = std::sqrt(std::numbers::pi) * es.eigenvectors().row(0).transpose().array().square();
  }

  int order() const { return static_cast<int>(nodes.size()); }

  /// E[g(Z)] for Z ~ N(mean, var).
  template <typename F> double expect(double mean, double var, F &&g) const {
    const double s = std::sqrt(2.0 * std::max(var, 0.0));
    double acc = 0.0;
    for (Eigen::Index k = 0; k < nodes.size(); ++k)
      acc += weights(k) * g(mean + s * nodes(k));
    return acc / std::sqrt(std::numbers::pi);
  }
};

} // namespace mrwind
