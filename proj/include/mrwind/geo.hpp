#pragma once

#include <cmath>
#include <numbers>
#include <span>

namespace mrwind::geo {

inline constexpr double kEarthRadiusKm = 6371.0;
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

struct LatLon {
  double lat = 0.0; // degrees
  double lon = 0.0; // degrees
};

inline constexpr double deg2rad(double d) { return d * std::numbers::pi / 180.0; }
inline constexpr double rad2deg(double r) { return r * 180.0 / std::numbers::pi; }

/// Wraps an angle into [0, 2pi).
inline double wrap_2pi(double a) {
  double w = std::fmod(a, kTwoPi);
  if (w < 0.0)
    w += kTwoPi;
  // fmod can return exactly 2pi after the shift for tiny negative inputs.
  return w >= kTwoPi ? 0.0 : w;
}

/// Smallest absolute difference between two angles, in [0, pi].
inline double circular_diff(double a, double b) {
  const double d = std::fmod(std::fabs(a - b), kTwoPi);
  return std::fmin(d, kTwoPi - d);
}

/// Great-circle distance in km.
inline double haversine_km(LatLon a, LatLon b) {
  const double p1 = deg2rad(a.lat), p2 = deg2rad(b.lat);
  const double dp = p2 - p1;
  const double dl = deg2rad(b.lon - a.lon);
  const double h = std::sin(dp / 2) * std::sin(dp / 2) +
                   std::cos(p1) * std::cos(p2) * std::sin(dl / 2) * std::sin(dl / 2);
  return 2.0 * kEarthRadiusKm * std::asin(std::fmin(1.0, std::sqrt(h)));
}

/// Initial great-circle bearing from `from` to `to`: radians clockwise from
/// north, in [0, 2pi).
inline double initial_bearing(LatLon from, LatLon to) {
  const double p1 = deg2rad(from.lat), p2 = deg2rad(to.lat);
  const double dl = deg2rad(to.lon - from.lon);
  const double y = std::sin(dl) * std::cos(p2);
  const double x = std::cos(p1) * std::sin(p2) - std::sin(p1) * std::cos(p2) * std::cos(dl);
  return wrap_2pi(std::atan2(y, x));
}

/// Circular mean of angles given in radians, result in [0, 2pi).
inline double circular_mean(std::span<const double> angles) {
  double s = 0.0, c = 0.0;
  for (double a : angles) {
    s += std::sin(a);
    c += std::cos(a);
  }
  return wrap_2pi(std::atan2(s, c));
}

} // namespace mrwind::geo
