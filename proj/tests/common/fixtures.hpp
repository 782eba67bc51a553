#pragma once

// Small hand-built instances shared by the unit and acceptance suites.

#include <random>
#include <vector>

#include "mrwind/mrwind.hpp"

namespace mrwind::fixtures {

/// Three centroids pairwise 30-45 km apart, so the support is complete.
inline std::vector<geo::LatLon> triangle_centroids() {
  return {{40.0, -89.0}, {40.3, -89.0}, {40.1, -88.6}};
}

inline StdrParams random_params(std::mt19937_64 &rng, int kappa, std::size_t n_edges,
                                double alpha_max = 0.3) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  StdrParams p;
  p.kappa = kappa;
  p.mu.resize(kappa);
  p.beta.resize(kappa);
  for (int i = 0; i < kappa; ++i) {
    p.mu(i) = 1.0 + 4.0 * u(rng);
    p.beta(i) = 0.2 + 0.6 * u(rng);
  }
  for (std::size_t e = 0; e < n_edges; ++e)
    p.alpha.push_back(alpha_max * u(rng));
  return p;
}

/// Random non-negative view over a random point set, with the DDG and travel
/// times derived from it by the library pipeline.
struct GraphInstance {
  std::vector<geo::LatLon> centroids;
  ResolutionView view;
  GraphSupport support;
  Eigen::MatrixXd bearings;
  DynamicGraph ddg;
  TravelTimeTensor lambda;
};

inline GraphInstance random_graph_instance(std::mt19937_64 &rng, int kappa, int steps, int eta = 1,
                                           double spread_deg = 0.4) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  GraphInstance g;
  for (int k = 0; k < kappa; ++k)
    g.centroids.push_back({40.0 + spread_deg * (2 * u(rng) - 1), -89.0 + spread_deg * (2 * u(rng) - 1)});
  g.view.kappa = kappa;
  g.view.eta = eta;
  g.view.speeds.resize(kappa, steps);
  g.view.directions.resize(kappa, steps);
  for (Eigen::Index k = 0; k < g.view.speeds.size(); ++k) {
    g.view.speeds.data()[k] = 2.0 + 10.0 * u(rng);
    g.view.directions.data()[k] = geo::kTwoPi * u(rng);
  }
  g.support = build_support(g.centroids, kDefaultRadiusKm);
  g.bearings = cardinal_bearings(g.centroids, g.support);
  // Point roughly half the headings along an out-edge so plenty of edges fire.
  for (int t = 0; t < steps; ++t)
    for (std::size_t e = 0; e < g.support.size(); ++e)
      if (u(rng) < 0.5 / kappa) {
        const Edge &ed = g.support.edges[e];
        g.view.directions(ed.from, t) =
            geo::wrap_2pi(g.bearings(ed.from, ed.to) + 0.2 * (u(rng) - 0.5));
      }
  g.ddg = extract_ddg(g.view, g.bearings, g.support);
  g.lambda = estimate_travel_times(g.view, g.support, pairwise_distances(g.centroids), eta);
  return g;
}

/// N coords drawn over a few resolutions, with kernel precisions set so the
/// gram is well conditioned but not diagonal.
struct GpInstance {
  MultiResDataset data;
  KernelParams params;
};

inline GpInstance random_gp_instance(std::mt19937_64 &rng, int N, double residual_sd = 1.0) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> g(0.0, residual_sd);
  GpInstance x;
  x.data.resolutions = {{2, 1}, {4, 2}, {8, 4}};
  x.data.K_max = 20;
  x.data.T_max = 64;
  for (int n = 0; n < N; ++n) {
    const Resolution r = x.data.resolutions[static_cast<std::size_t>(n % 3)];
    Coord c;
    c.kappa = r.kappa;
    c.eta = r.eta;
    c.cluster = static_cast<int>(u(rng) * r.kappa);
    c.step = static_cast<int>(u(rng) * 64 / r.eta);
    c.location = {40.0 + u(rng), -89.0 + u(rng)};
    x.data.coords.push_back(c);
  }
  x.data.f = Eigen::VectorXd::Zero(N);
  x.data.y.resize(N);
  for (int n = 0; n < N; ++n) {
    x.data.f(n) = 5.0 + u(rng);
    x.data.y(n) = x.data.f(n) + g(rng);
  }
  x.params = initial_kernel_params(x.data.inputs(), x.data.K_max, x.data.T_max);
  x.params.sigma_s = 0.5 + 2.0 * u(rng);
  x.params.sigma_t = 0.005 + 0.02 * u(rng);
  return x;
}

} // namespace mrwind::fixtures
