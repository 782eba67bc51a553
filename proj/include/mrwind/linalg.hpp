#pragma once

#include <cmath>
#include <string>

#include <Eigen/Dense>

#include "mrwind/error.hpp"

namespace mrwind {

struct JitteredCholesky {
  Eigen::LLT<Eigen::MatrixXd> llt;
  double extra_jitter = 0.0; // added on top of the input diagonal

  double log_det() const {
    return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  }
};

/// Cholesky of a symmetric matrix. On failure, retries with extra diagonal
/// jitter starting at 1e-6 of the mean diagonal, x10 per attempt, up to 1e-2.
inline JitteredCholesky robust_cholesky(const Eigen::MatrixXd &K) {
  JitteredCholesky out;
  out.llt.compute(K);
  if (out.llt.info() == Eigen::Success)
    return out;
  const double scale = std::max(std::fabs(K.diagonal().mean()), 1e-300);
  for (double rel = 1e-6; rel <= 1e-2 * (1 + 1e-9); rel *= 10.0) {
    Eigen::MatrixXd Kj = K;
    Kj.diagonal().array() += rel * scale;
    out.llt.compute(Kj);
    if (out.llt.info() == Eigen::Success) {
      out.extra_jitter = rel * scale;
      return out;
    }
  }
  throw Error(Errc::not_positive_definite,
              "matrix is not positive definite even with jitter 1e-2 * mean diagonal (" +
                  std::to_string(scale) +
                  "); check kernel precisions or remove duplicate inducing inputs");
}

/// K^-1 from its factorization.
inline Eigen::MatrixXd llt_inverse(const Eigen::LLT<Eigen::MatrixXd> &llt) {
  const auto n = llt.matrixLLT().rows();
  Eigen::MatrixXd P = llt.solve(Eigen::MatrixXd::Identity(n, n));
  return 0.5 * (P + P.transpose());
}

} // namespace mrwind
