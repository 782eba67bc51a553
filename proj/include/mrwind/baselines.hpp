#pragma once

// Reference predictors: persistence and least-squares VAR(p).

#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "mrwind/data.hpp"
#include "mrwind/error.hpp"
#include "mrwind/stdr.hpp"

namespace mrwind {

/// y(t) = y(t - 1).
inline Eigen::VectorXd persistence_forecast(const ResolutionView &view, int t) {
  if (t - 1 < view.first_step)
    throw Error(Errc::insufficient_history, "persistence needs one step of history");
  if (t > view.end_step())
    throw Error(Errc::out_of_range, "persistence target beyond the data");
  return view.speeds.col(t - 1 - view.first_step);
}

/// y(t) = c + sum_{tau=1..p} A_tau y(t - tau)
struct VarParams {
  int p = 1;
  Eigen::VectorXd c;
  std::vector<Eigen::MatrixXd> A; // A[tau - 1], kappa x kappa
};

enum class RankPolicy {
  strict,       // rank-deficient design raises singular_design
  minimum_norm, // minimum-norm least-squares solution
};

/// Regressor row [1, y(t-1)', ..., y(t-p)'] for target step t.
inline Eigen::RowVectorXd var_regressors(const ResolutionView &view, int t, int p) {
  const int k = view.clusters();
  Eigen::RowVectorXd x(1 + k * p);
  x(0) = 1.0;
  for (int lag = 1; lag <= p; ++lag)
    x.segment(1 + (lag - 1) * k, k) = view.speeds.col(t - lag - view.first_step).transpose();
  return x;
}

/// Ordinary least squares per equation on targets [first_step + p, end_step).
inline VarParams var_fit(const ResolutionView &view, int p, int end_step = -1,
                         RankPolicy policy = RankPolicy::strict) {
  if (p < 1)
    throw Error(Errc::config, "VAR lag order must be >= 1");
  if (end_step < 0)
    end_step = view.end_step();
  const int k = view.clusters();
  const int rows = end_step - view.first_step - p;
  const int cols = 1 + k * p;
  if (rows < cols)
    throw Error(Errc::singular_design,
                "VAR(" + std::to_string(p) + ") with kappa=" + std::to_string(k) + " needs more than " +
                    std::to_string(cols) + " training rows, have " + std::to_string(std::max(rows, 0)) +
                    "; lower p or kappa");

  Eigen::MatrixXd X(rows, cols), Y(rows, k);
  for (int r = 0; r < rows; ++r) {
    const int t = view.first_step + p + r;
    X.row(r) = var_regressors(view, t, p);
    Y.row(r) = view.speeds.col(t - view.first_step).transpose();
  }

  Eigen::MatrixXd B;
  if (policy == RankPolicy::strict) {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
    if (qr.rank() < cols)
      throw Error(Errc::singular_design,
                  "VAR design has rank " + std::to_string(qr.rank()) + " < " + std::to_string(cols) +
                      "; lower p or kappa");
    B = qr.solve(Y);
  } else {
    B = Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd>(X).solve(Y);
  }

  VarParams out;
  out.p = p;
  out.c = B.row(0).transpose();
  for (int lag = 1; lag <= p; ++lag)
    out.A.push_back(B.middleRows(1 + (lag - 1) * k, k).transpose());
  return out;
}

inline Eigen::VectorXd var_forecast(const VarParams &params, const ResolutionView &view, int t) {
  if (t - params.p < view.first_step)
    throw Error(Errc::insufficient_history, "VAR forecast needs p steps of history");
  if (t > view.end_step())
    throw Error(Errc::out_of_range, "VAR target beyond the data");
  Eigen::VectorXd y = params.c;
  for (int lag = 1; lag <= params.p; ++lag)
    y += params.A[static_cast<std::size_t>(lag - 1)] * view.speeds.col(t - lag - view.first_step);
  return y;
}

inline std::vector<ForecastRow> rolling_persistence(const ResolutionView &view, int test_begin,
                                                    int test_end) {
  std::vector<ForecastRow> rows;
  test_end = std::min(test_end, view.end_step());
  for (int s = test_begin; s < test_end; ++s) {
    const Eigen::VectorXd f = persistence_forecast(view, s);
    for (int i = 0; i < view.clusters(); ++i)
      rows.push_back({i, s, view.speed(i, s), f(i)});
  }
  return rows;
}

/// Refits VAR(p) on the history before each target step.
inline std::vector<ForecastRow> rolling_var(const ResolutionView &view, int p, int test_begin,
                                            int test_end, RankPolicy policy = RankPolicy::strict) {
  std::vector<ForecastRow> rows;
  test_end = std::min(test_end, view.end_step());
  for (int s = test_begin; s < test_end; ++s) {
    const VarParams vp = var_fit(view, p, s, policy);
    const Eigen::VectorXd f = var_forecast(vp, view, s);
    for (int i = 0; i < view.clusters(); ++i)
      rows.push_back({i, s, view.speed(i, s), f(i)});
  }
  return rows;
}

/// Largest p <= p_max that leaves an identifiable design for targets before
/// end_step; 0 if none.
inline int max_identifiable_lag(const ResolutionView &view, int p_max, int end_step) {
  for (int p = p_max; p >= 1; --p)
    if (end_step - view.first_step - p >= 1 + view.clusters() * p)
      return p;
  return 0;
}

inline void to_json(nlohmann::json &j, const VarParams &v) {
  nlohmann::json mats = nlohmann::json::array();
  for (const auto &a : v.A)
    mats.push_back(detail::matrix_to_json(a));
  j = {{"p", v.p}, {"c", std::vector<double>(v.c.data(), v.c.data() + v.c.size())}, {"A", mats}};
}

inline void from_json(const nlohmann::json &j, VarParams &v) {
  v.p = j.at("p").get<int>();
  const auto c = j.at("c").get<std::vector<double>>();
  v.c = Eigen::Map<const Eigen::VectorXd>(c.data(), static_cast<Eigen::Index>(c.size()));
  v.A.clear();
  for (const auto &a : j.at("A"))
    v.A.push_back(detail::matrix_from_json(a));
  if (static_cast<int>(v.A.size()) != v.p)
    throw Error(Errc::parse, "VAR coefficient count does not match p");
}

} // namespace mrwind
