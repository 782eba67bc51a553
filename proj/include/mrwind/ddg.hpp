#pragma once

// Graph support, directed dynamic graph (DDG) of wind directions, and the
// inter-cluster travel-time tensor.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "mrwind/data.hpp"
#include "mrwind/error.hpp"
#include "mrwind/geo.hpp"

namespace mrwind {

inline constexpr double kDefaultRadiusKm = 100.0;
inline constexpr double kDefaultThresholdRad = std::numbers::pi / 12.0;
inline constexpr double kSpeedFloor = 0.5;   // m/s
inline constexpr double kLambdaMin = 1e-6;   // aggregated steps
inline constexpr double kSecondsPerRawStep = 900.0;

/// Directed edge from upstream cluster `from` (j) to downstream `to` (i).
struct Edge {
  int from = 0;
  int to = 0;
  friend bool operator==(const Edge &, const Edge &) = default;
};

struct GraphSupport {
  int kappa = 0;
  double radius_km = kDefaultRadiusKm;
  std::vector<Edge> edges;              // sorted by (to, from)
  std::vector<std::vector<int>> in_edges; // per target: indices into edges

  /// Index of edge (j -> i), or -1.
  int find(int j, int i) const {
    for (int e : in_edges[static_cast<std::size_t>(i)])
      if (edges[static_cast<std::size_t>(e)].from == j)
        return e;
    return -1;
  }
  std::size_t size() const { return edges.size(); }
};

struct DynamicGraph {
  GraphSupport support;
  double threshold_rad = kDefaultThresholdRad;
  int first_step = 0;
  std::vector<std::vector<int>> active; // per step: sorted support-edge indices

  const std::vector<int> &active_at(int t) const {
    return active[static_cast<std::size_t>(t - first_step)];
  }
  int steps() const { return static_cast<int>(active.size()); }
};

/// lambda(e, t): travel time along support edge e for wind emitted at step t,
/// in aggregated steps. Self-influence uses kLambdaMin (zero distance).
struct TravelTimeTensor {
  int first_step = 0;
  Eigen::MatrixXd steps; // |E| x T

  double at(int edge, int t) const { return steps(edge, t - first_step); }
  static constexpr double self() { return kLambdaMin; }
};

inline GraphSupport build_support(const std::vector<geo::LatLon> &centroids, double radius_km) {
  if (!(radius_km > 0.0))
    throw Error(Errc::config, "support radius must be positive");
  GraphSupport s;
  s.kappa = static_cast<int>(centroids.size());
  s.radius_km = radius_km;
  s.in_edges.resize(centroids.size());
  const Eigen::MatrixXd d = pairwise_distances(centroids);
  for (int i = 0; i < s.kappa; ++i)
    for (int j = 0; j < s.kappa; ++j)
      if (j != i && d(j, i) > 0.0 && d(j, i) <= radius_km) {
        s.in_edges[static_cast<std::size_t>(i)].push_back(static_cast<int>(s.edges.size()));
        s.edges.push_back({j, i});
      }
  return s;
}

/// phi(j, i): initial bearing from centroid j to centroid i, for support
/// pairs. Other entries are NaN.
inline Eigen::MatrixXd cardinal_bearings(const std::vector<geo::LatLon> &centroids,
                                         const GraphSupport &support) {
  const auto n = static_cast<Eigen::Index>(centroids.size());
  Eigen::MatrixXd phi = Eigen::MatrixXd::Constant(n, n, std::numeric_limits<double>::quiet_NaN());
  for (const Edge &e : support.edges) {
    const auto &a = centroids[static_cast<std::size_t>(e.from)];
    const auto &b = centroids[static_cast<std::size_t>(e.to)];
    if (a.lat == b.lat && a.lon == b.lon)
      throw Error(Errc::degenerate_bearing, "clusters " + std::to_string(e.from) + " and " +
                                                std::to_string(e.to) + " coincide");
    phi(e.from, e.to) = geo::initial_bearing(a, b);
  }
  return phi;
}

/// Edge (j, i) is active at t iff the wind heading at the upstream cluster j
/// lies within `threshold_rad` of the bearing from j to i.
inline DynamicGraph extract_ddg(const ResolutionView &view, const Eigen::MatrixXd &bearings,
                                const GraphSupport &support,
                                double threshold_rad = kDefaultThresholdRad) {
  DynamicGraph g;
  g.support = support;
  g.threshold_rad = threshold_rad;
  g.first_step = view.first_step;
  g.active.resize(static_cast<std::size_t>(view.steps()));
  for (int c = 0; c < view.steps(); ++c) {
    auto &act = g.active[static_cast<std::size_t>(c)];
    for (std::size_t e = 0; e < support.edges.size(); ++e) {
      const Edge &ed = support.edges[e];
      if (geo::circular_diff(bearings(ed.from, ed.to), view.directions(ed.from, c)) <=
          threshold_rad)
        act.push_back(static_cast<int>(e));
    }
  }
  return g;
}

/// Travel time distance / upstream speed at emission time, in eta-aggregated
/// steps (900 s per raw unit), floored at kSpeedFloor and clamped below at
/// kLambdaMin.
inline TravelTimeTensor estimate_travel_times(const ResolutionView &view,
                                              const GraphSupport &support,
                                              const Eigen::MatrixXd &distances_km, int eta) {
  if (support.kappa != view.clusters())
    throw Error(Errc::invalid_resolution, "support and view disagree on kappa");
  TravelTimeTensor lt;
  lt.first_step = view.first_step;
  lt.steps.resize(static_cast<Eigen::Index>(support.size()), view.steps());
  const double step_seconds = static_cast<double>(eta) * kSecondsPerRawStep;
  for (std::size_t e = 0; e < support.size(); ++e) {
    const Edge &ed = support.edges[e];
    const double meters = distances_km(ed.from, ed.to) * 1000.0;
    for (int c = 0; c < view.steps(); ++c) {
      const double v = std::max(view.speeds(ed.from, c), kSpeedFloor);
      lt.steps(static_cast<Eigen::Index>(e), c) = std::max(meters / v / step_seconds, kLambdaMin);
    }
  }
  return lt;
}

// Serialization ----------------------------------------------------------------

inline void to_json(nlohmann::json &j, const GraphSupport &s) {
  nlohmann::json edges = nlohmann::json::array();
  for (const Edge &e : s.edges)
    edges.push_back({e.from, e.to});
  j = {{"kappa", s.kappa}, {"radius_km", s.radius_km}, {"edges", edges}};
}

inline void from_json(const nlohmann::json &j, GraphSupport &s) {
  s.kappa = j.at("kappa").get<int>();
  s.radius_km = j.at("radius_km").get<double>();
  s.edges.clear();
  s.in_edges.assign(static_cast<std::size_t>(s.kappa), {});
  for (const auto &e : j.at("edges")) {
    const Edge ed{e.at(0).get<int>(), e.at(1).get<int>()};
    if (ed.from < 0 || ed.to < 0 || ed.from >= s.kappa || ed.to >= s.kappa || ed.from == ed.to)
      throw Error(Errc::parse, "invalid support edge");
    s.in_edges[static_cast<std::size_t>(ed.to)].push_back(static_cast<int>(s.edges.size()));
    s.edges.push_back(ed);
  }
}

inline void to_json(nlohmann::json &j, const DynamicGraph &g) {
  j = {{"support", g.support},
       {"radius_km", g.support.radius_km},
       {"threshold_rad", g.threshold_rad},
       {"first_step", g.first_step},
       {"active", g.active}};
}

inline void from_json(const nlohmann::json &j, DynamicGraph &g) {
  g.support = j.at("support").get<GraphSupport>();
  g.threshold_rad = j.at("threshold_rad").get<double>();
  g.first_step = j.value("first_step", 0);
  g.active = j.at("active").get<std::vector<std::vector<int>>>();
}

/// Flat CSV `j,i,t,lambda_steps`.
inline void write_travel_times_csv(std::ostream &os, const TravelTimeTensor &lt,
                                   const GraphSupport &support) {
  os << "j,i,t,lambda_steps\n";
  char buf[64];
  for (std::size_t e = 0; e < support.size(); ++e)
    for (Eigen::Index c = 0; c < lt.steps.cols(); ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", lt.steps(static_cast<Eigen::Index>(e), c));
      os << support.edges[e].from << ',' << support.edges[e].to << ','
         << lt.first_step + c << ',' << buf << '\n';
    }
}

/// Reads the `j,i,t,lambda_steps` CSV back into a tensor over `support`.
inline TravelTimeTensor parse_travel_times_csv(std::string_view text, const GraphSupport &support) {
  struct Entry {
    int e, t;
    double v;
  };
  std::vector<Entry> entries;
  int t_min = std::numeric_limits<int>::max(), t_max = std::numeric_limits<int>::min();
  std::size_t pos = 0, line = 0;
  while (pos < text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos)
      nl = text.size();
    const std::string_view ln = detail::trim(text.substr(pos, nl - pos));
    pos = nl + 1;
    ++line;
    if (line == 1) {
      if (ln != "j,i,t,lambda_steps")
        throw ParseError(line, "expected header 'j,i,t,lambda_steps'");
      continue;
    }
    if (ln.empty())
      continue;
    std::string_view f[4];
    std::size_t start = 0;
    for (int k = 0; k < 4; ++k) {
      const std::size_t comma = k < 3 ? ln.find(',', start) : ln.size();
      if (comma == std::string_view::npos)
        throw ParseError(line, "expected 4 fields");
      f[k] = ln.substr(start, comma - start);
      start = comma + 1;
    }
    const int j = detail::parse_field<int>(f[0], line, "j");
    const int i = detail::parse_field<int>(f[1], line, "i");
    const int t = detail::parse_field<int>(f[2], line, "t");
    const double v = detail::parse_field<double>(f[3], line, "lambda_steps");
    if (j < 0 || i < 0 || j >= support.kappa || i >= support.kappa)
      throw ParseError(line, "cluster index out of range");
    const int e = support.find(j, i);
    if (e < 0)
      throw ParseError(line, "edge outside the graph support");
    entries.push_back({e, t, v});
    t_min = std::min(t_min, t);
    t_max = std::max(t_max, t);
  }
  TravelTimeTensor lt;
  if (entries.empty()) {
    lt.first_step = 0;
    return lt;
  }
  lt.first_step = t_min;
  lt.steps = Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(support.size()), t_max - t_min + 1,
                                       std::numeric_limits<double>::quiet_NaN());
  for (const Entry &en : entries)
    lt.steps(en.e, en.t - t_min) = en.v;
  if (!lt.steps.allFinite())
    throw Error(Errc::parse, "travel-time table has missing (edge, step) entries");
  return lt;
}

} // namespace mrwind
