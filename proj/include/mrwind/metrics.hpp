#pragma once

#include <cmath>
#include <span>
#include <string>

#include "mrwind/error.hpp"

namespace mrwind {

struct MaeResult {
  double mae = 0.0;
  double mae_pct = 0.0; // mae / mean(y_true), as a fraction
};

inline MaeResult compute_mae(std::span<const double> y_true, std::span<const double> y_pred) {
  if (y_true.size() != y_pred.size() || y_true.empty())
    throw Error(Errc::config, "compute_mae needs equal-length, non-empty inputs");
  double abs_sum = 0.0, y_sum = 0.0;
  for (std::size_t k = 0; k < y_true.size(); ++k) {
    abs_sum += std::fabs(y_true[k] - y_pred[k]);
    y_sum += y_true[k];
  }
  const double n = static_cast<double>(y_true.size());
  if (y_sum == 0.0)
    throw Error(Errc::undefined_percentage, "mean of y_true is zero; MAE percentage undefined");
  return {abs_sum / n, (abs_sum / n) / (y_sum / n)};
}

/// Fraction of truths inside [lo, hi].
inline double compute_coverage(std::span<const double> y_true, std::span<const double> lo,
                               std::span<const double> hi) {
  if (y_true.size() != lo.size() || y_true.size() != hi.size())
    throw Error(Errc::config, "compute_coverage needs equal-length inputs");
  if (y_true.empty())
    return 0.0;
  std::size_t inside = 0;
  for (std::size_t k = 0; k < y_true.size(); ++k) {
    if (lo[k] > hi[k])
      throw Error(Errc::malformed_interval, "interval " + std::to_string(k) + " has lo > hi");
    if (y_true[k] >= lo[k] && y_true[k] <= hi[k])
      ++inside;
  }
  return static_cast<double>(inside) / static_cast<double>(y_true.size());
}

} // namespace mrwind
