#pragma once

// Synthetic advected wind fields, a model-exact STDR simulator, and
// brute-force oracles used by the test suites.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "mrwind/data.hpp"
#include "mrwind/ddg.hpp"
#include "mrwind/error.hpp"
#include "mrwind/geo.hpp"
#include "mrwind/kernel.hpp"
#include "mrwind/stdr.hpp"
#include "mrwind/svgp.hpp"

namespace mrwind {

struct SynthConfig {
  int n_farms = 20;
  int T = 512;
  std::uint64_t seed = 0;
  double base_speed = 8.0;            // m/s
  double bump_amplitude = 2.0;        // m/s, sd of each bump's peak
  double advection_direction = 45.0;  // degrees, heading the field moves toward
  double direction_amplitude = 0.0;   // degrees, sinusoidal swing of the heading
  double direction_period = 96.0;     // raw steps
  double advection_speed = 10.0;      // m/s
  double correlation_length = 30.0;   // km
  double amplitude_persistence = 1.0; // per-step AR(1) coefficient of bump peaks
  double direction_noise = 3.0;       // degrees, per farm and step
  double noise_sd = 0.3;              // m/s, observation noise on speed
  double lat_min = 40.0, lat_max = 41.0;
  double lon_min = -90.0, lon_max = -88.7;
  std::optional<std::vector<geo::LatLon>> farm_locations; // overrides random placement

  void validate() const {
    const int n = farm_locations ? static_cast<int>(farm_locations->size()) : n_farms;
    if (n < 2)
      throw Error(Errc::config, "need at least 2 farms");
    if (T < 16)
      throw Error(Errc::config, "need T >= 16");
    if (!(correlation_length > 0.0) || base_speed < 0.0 || bump_amplitude < 0.0 ||
        advection_speed < 0.0 || noise_sd < 0.0 || direction_noise < 0.0 ||
        !(direction_period > 0.0) || !(lat_max > lat_min) || !(lon_max > lon_min) ||
        amplitude_persistence < 0.0 || amplitude_persistence > 1.0)
      throw Error(Errc::config, "synthetic scales must be positive and the box non-empty");
  }
};

struct SynthOutput {
  FarmCatalog catalog;
  std::vector<WindRecord> records; // sorted by (farm, time)
  Eigen::MatrixXd true_speed;      // farms x T, noiseless field
  nlohmann::json truth;
};

namespace detail {

/// Local tangent-plane projection in km around a reference point.
struct LocalFrame {
  geo::LatLon origin;
  double kx = 0.0, ky = 0.0;

  explicit LocalFrame(geo::LatLon o) : origin(o) {
    ky = std::numbers::pi * geo::kEarthRadiusKm / 180.0;
    kx = ky * std::cos(geo::deg2rad(o.lat));
  }
  Eigen::Vector2d to_km(geo::LatLon p) const {
    return {(p.lon - origin.lon) * kx, (p.lat - origin.lat) * ky};
  }
};

inline double wrap_periodic(double x, double period) {
  double w = std::fmod(x, period);
  if (w < -0.5 * period)
    w += period;
  else if (w >= 0.5 * period)
    w -= period;
  return w;
}

inline double wrap_degrees(double d) {
  double w = std::fmod(d, 360.0);
  if (w < 0.0)
    w += 360.0;
  return w >= 360.0 ? 0.0 : w;
}

} // namespace detail

/// Sum of Gaussian bumps on a torus enclosing the farm box with a margin of
/// four correlation lengths, translated each step by the advection velocity.
inline SynthOutput generate_wind_field(const SynthConfig &cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  SynthOutput out;
  std::vector<geo::LatLon> locs;
  if (cfg.farm_locations) {
    locs = *cfg.farm_locations;
  } else {
    for (int f = 0; f < cfg.n_farms; ++f) {
      const double lat = cfg.lat_min + (cfg.lat_max - cfg.lat_min) * unif(rng);
      const double lon = cfg.lon_min + (cfg.lon_max - cfg.lon_min) * unif(rng);
      locs.push_back({lat, lon});
    }
  }
  const auto n = static_cast<int>(locs.size());
  for (int f = 0; f < n; ++f)
    out.catalog.farms.push_back({f, locs[static_cast<std::size_t>(f)]});

  double lat_lo = locs[0].lat, lat_hi = lat_lo, lon_lo = locs[0].lon, lon_hi = lon_lo;
  for (const auto &p : locs) {
    lat_lo = std::min(lat_lo, p.lat);
    lat_hi = std::max(lat_hi, p.lat);
    lon_lo = std::min(lon_lo, p.lon);
    lon_hi = std::max(lon_hi, p.lon);
  }
  const detail::LocalFrame frame({0.5 * (lat_lo + lat_hi), 0.5 * (lon_lo + lon_hi)});
  std::vector<Eigen::Vector2d> xy;
  for (const auto &p : locs)
    xy.push_back(frame.to_km(p));
  const double ell = cfg.correlation_length;
  const Eigen::Vector2d lo = frame.to_km({lat_lo, lon_lo});
  const Eigen::Vector2d hi = frame.to_km({lat_hi, lon_hi});
  const Eigen::Vector2d period = (hi - lo).array() + 8.0 * ell;

  // One bump per ell x ell cell keeps the field covered.
  const int n_bumps =
      std::max(4, static_cast<int>(std::ceil(period.x() * period.y() / (ell * ell))));
  std::vector<Eigen::Vector2d> centres;
  std::vector<double> peaks;
  for (int b = 0; b < n_bumps; ++b) {
    centres.emplace_back(period.x() * (unif(rng) - 0.5), period.y() * (unif(rng) - 0.5));
    peaks.push_back(cfg.bump_amplitude * gauss(rng));
  }

  const double rho = cfg.amplitude_persistence;
  const double innov = std::sqrt(std::max(0.0, 1.0 - rho * rho)) * cfg.bump_amplitude;
  const double km_per_step = cfg.advection_speed * kSecondsPerRawStep / 1000.0;
  Eigen::Vector2d shift = Eigen::Vector2d::Zero();
  out.true_speed.resize(n, cfg.T);
  std::vector<double> headings(static_cast<std::size_t>(cfg.T));
  for (int t = 0; t < cfg.T; ++t) {
    const double heading =
        cfg.advection_direction +
        cfg.direction_amplitude * std::sin(2.0 * std::numbers::pi * t / cfg.direction_period);
    headings[static_cast<std::size_t>(t)] = heading;
    for (int f = 0; f < n; ++f) {
      double v = cfg.base_speed;
      const Eigen::Vector2d &p = xy[static_cast<std::size_t>(f)];
      for (int b = 0; b < n_bumps; ++b) {
        const Eigen::Vector2d c = centres[static_cast<std::size_t>(b)] + shift;
        const double dx = detail::wrap_periodic(p.x() - c.x(), period.x());
        const double dy = detail::wrap_periodic(p.y() - c.y(), period.y());
        v += peaks[static_cast<std::size_t>(b)] * std::exp(-(dx * dx + dy * dy) / (2.0 * ell * ell));
      }
      out.true_speed(f, t) = v;
    }
    const double h = geo::deg2rad(heading);
    shift += km_per_step * Eigen::Vector2d(std::sin(h), std::cos(h));
    if (rho < 1.0)
      for (double &a : peaks)
        a = rho * a + innov * gauss(rng);
  }

  out.records.reserve(static_cast<std::size_t>(n) * static_cast<std::size_t>(cfg.T));
  for (int f = 0; f < n; ++f)
    for (int t = 0; t < cfg.T; ++t) {
      WindRecord r;
      r.farm_id = f;
      r.time_index = t;
      r.speed = std::max(0.0, out.true_speed(f, t) + cfg.noise_sd * gauss(rng));
      r.direction_deg = detail::wrap_degrees(headings[static_cast<std::size_t>(t)] +
                                             cfg.direction_noise * gauss(rng));
      out.records.push_back(r);
    }

  out.truth = {{"n_farms", n},
               {"T", cfg.T},
               {"seed", cfg.seed},
               {"base_speed", cfg.base_speed},
               {"bump_amplitude", cfg.bump_amplitude},
               {"advection_direction", cfg.advection_direction},
               {"direction_amplitude", cfg.direction_amplitude},
               {"direction_period", cfg.direction_period},
               {"advection_speed", cfg.advection_speed},
               {"correlation_length", cfg.correlation_length},
               {"amplitude_persistence", cfg.amplitude_persistence},
               {"direction_noise", cfg.direction_noise},
               {"noise_sd", cfg.noise_sd},
               {"box", {cfg.lat_min, cfg.lat_max, cfg.lon_min, cfg.lon_max}},
               {"n_bumps", n_bumps},
               {"torus_km", {period.x(), period.y()}}};
  return out;
}

inline WindData to_wind_data(const SynthOutput &s) {
  WindData d;
  d.catalog = s.catalog;
  d.records = s.records;
  d.num_steps = static_cast<int>(s.true_speed.cols());
  std::ostringstream os;
  write_wind_csv(os, s.catalog, s.records);
  d.checksum = detail::fnv1a64(os.str());
  return d;
}

inline SynthConfig synth_config_from_json(const nlohmann::json &j) {
  SynthConfig c;
  c.n_farms = j.value("n_farms", c.n_farms);
  c.T = j.value("T", c.T);
  c.seed = j.value("seed", c.seed);
  c.base_speed = j.value("base_speed", c.base_speed);
  c.bump_amplitude = j.value("bump_amplitude", c.bump_amplitude);
  c.advection_direction = j.value("advection_direction", c.advection_direction);
  c.direction_amplitude = j.value("direction_amplitude", c.direction_amplitude);
  c.direction_period = j.value("direction_period", c.direction_period);
  c.advection_speed = j.value("advection_speed", c.advection_speed);
  c.correlation_length = j.value("correlation_length", c.correlation_length);
  c.amplitude_persistence = j.value("amplitude_persistence", c.amplitude_persistence);
  c.direction_noise = j.value("direction_noise", c.direction_noise);
  c.noise_sd = j.value("noise_sd", c.noise_sd);
  if (j.contains("box")) {
    const auto b = j.at("box").get<std::vector<double>>();
    if (b.size() != 4)
      throw Error(Errc::config, "box must be [lat_min, lat_max, lon_min, lon_max]");
    c.lat_min = b[0];
    c.lat_max = b[1];
    c.lon_min = b[2];
    c.lon_max = b[3];
  }
  c.validate();
  return c;
}

// Model-exact STDR simulation -------------------------------------------------------

struct StdrSimulation {
  ResolutionView view;
  std::vector<geo::LatLon> centroids;
  DynamicGraph ddg;
  TravelTimeTensor lambda;
  StdrParams truth;
};

/// Draws a series from the STDR recursion itself: y_t = f(theta*, t) + noise.
/// Each cluster's heading points along one of its support edges or at random,
/// uniformly, so every edge is active a fair share of the time. Travel times
/// are fixed by distance at a nominal speed.
inline StdrSimulation simulate_stdr(const std::vector<geo::LatLon> &centroids, const StdrParams &truth,
                                    int T, double noise_sd, std::uint64_t seed,
                                    const StdrConfig &config, double nominal_speed = 10.0) {
  const int kappa = static_cast<int>(centroids.size());
  if (truth.kappa != kappa || T <= config.memory_depth)
    throw Error(Errc::config, "simulation needs matching kappa and T > memory depth");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, geo::kTwoPi);

  StdrSimulation sim;
  sim.centroids = centroids;
  sim.truth = truth;
  const GraphSupport support = build_support(centroids, kDefaultRadiusKm);
  if (support.size() != truth.alpha.size())
    throw Error(Errc::config, "alpha must cover every support edge");
  const Eigen::MatrixXd bearings = cardinal_bearings(centroids, support);
  const Eigen::MatrixXd dist = pairwise_distances(centroids);

  ResolutionView &v = sim.view;
  v.kappa = kappa;
  v.eta = truth.eta;
  v.seed = seed;
  v.speeds = Eigen::MatrixXd::Zero(kappa, T);
  v.directions.resize(kappa, T);
  std::vector<std::vector<int>> out_edges(static_cast<std::size_t>(kappa));
  for (std::size_t e = 0; e < support.size(); ++e)
    out_edges[static_cast<std::size_t>(support.edges[e].from)].push_back(static_cast<int>(e));
  for (int t = 0; t < T; ++t)
    for (int j = 0; j < kappa; ++j) {
      const auto &outs = out_edges[static_cast<std::size_t>(j)];
      std::uniform_int_distribution<int> pick(0, static_cast<int>(outs.size()));
      const int k = pick(rng);
      if (k < static_cast<int>(outs.size())) {
        const Edge &ed = support.edges[static_cast<std::size_t>(outs[static_cast<std::size_t>(k)])];
        v.directions(j, t) = bearings(ed.from, ed.to);
      } else {
        v.directions(j, t) = unif(rng);
      }
    }
  sim.ddg = extract_ddg(v, bearings, support);
  sim.lambda.first_step = 0;
  sim.lambda.steps.resize(static_cast<Eigen::Index>(support.size()), T);
  const double step_seconds = truth.eta * kSecondsPerRawStep;
  for (std::size_t e = 0; e < support.size(); ++e) {
    const double lam = std::max(
        dist(support.edges[e].from, support.edges[e].to) * 1000.0 / nominal_speed / step_seconds,
        kLambdaMin);
    sim.lambda.steps.row(static_cast<Eigen::Index>(e)).setConstant(lam);
  }

  for (int t = 0; t < config.memory_depth; ++t)
    for (int i = 0; i < kappa; ++i)
      v.speeds(i, t) = std::max(0.0, truth.mu(i) + noise_sd * gauss(rng));
  for (int t = config.memory_depth; t < T; ++t) {
    const Eigen::VectorXd f = predict_all(truth, v, sim.ddg, sim.lambda, t, config);
    for (int i = 0; i < kappa; ++i)
      v.speeds(i, t) = f(i) + noise_sd * gauss(rng);
  }
  return sim;
}

// Oracles -----------------------------------------------------------------------------
// Naive re-implementations sharing no helpers with the code they check.

inline DynamicGraph brute_force_ddg(const ResolutionView &view, const Eigen::MatrixXd &bearings,
                                    const GraphSupport &support, double threshold) {
  DynamicGraph g;
  g.support = support;
  g.threshold_rad = threshold;
  g.first_step = view.first_step;
  const int kappa = static_cast<int>(view.speeds.rows());
  for (int c = 0; c < static_cast<int>(view.speeds.cols()); ++c) {
    std::vector<int> act;
    for (int j = 0; j < kappa; ++j)
      for (int i = 0; i < kappa; ++i) {
        int idx = -1;
        for (std::size_t e = 0; e < support.edges.size(); ++e)
          if (support.edges[e].from == j && support.edges[e].to == i)
            idx = static_cast<int>(e);
        if (idx < 0)
          continue;
        const double d = bearings(j, i) - view.directions(j, c);
        if (std::fabs(std::atan2(std::sin(d), std::cos(d))) <= threshold)
          act.push_back(idx);
      }
    std::sort(act.begin(), act.end());
    g.active.push_back(act);
  }
  return g;
}

/// Direct nested-loop evaluation of the STDR predictor.
inline double brute_force_predict(const StdrParams &params, const ResolutionView &view,
                                  const DynamicGraph &ddg, const TravelTimeTensor &lambda, int i,
                                  int t, int d, bool self_excitation = true) {
  double f = params.mu(i);
  const int kappa = static_cast<int>(view.speeds.rows());
  for (int tau = t - d; tau <= t - 1; ++tau) {
    if (tau < view.first_step)
      continue;
    const int col = tau - view.first_step;
    for (int j = 0; j < kappa; ++j) {
      double alpha = 0.0, lam = 0.0;
      if (j == i) {
        if (!self_excitation)
          continue;
        alpha = 1.0;
        lam = 1e-6;
      } else {
        int idx = -1;
        for (std::size_t e = 0; e < ddg.support.edges.size(); ++e)
          if (ddg.support.edges[e].from == j && ddg.support.edges[e].to == i)
            idx = static_cast<int>(e);
        if (idx < 0)
          continue;
        const auto &act = ddg.active[static_cast<std::size_t>(tau - ddg.first_step)];
        if (std::find(act.begin(), act.end(), idx) == act.end())
          continue;
        alpha = params.alpha[static_cast<std::size_t>(idx)];
        lam = lambda.steps(idx, tau - lambda.first_step);
      }
      const double s = static_cast<double>(t - tau);
      if (s - lam < 0.0)
        continue;
      const double b = params.beta(j);
      f += alpha * b * std::exp(-b * (s - lam)) * view.speeds(j, col);
    }
  }
  return f;
}

struct MonteCarloEstimate {
  double value = 0.0;
  double std_error = 0.0;
};

/// Sample average of log q(u) - log p(u) under q = N(m, L L^T), p = N(0, Kzz).
inline MonteCarloEstimate mc_kl_estimate(const SvgpState &state, const Eigen::MatrixXd &Kzz,
                                         long n_samples, std::uint64_t seed) {
  const Eigen::Index M = state.m.size();
  Eigen::LDLT<Eigen::MatrixXd> ldlt(Kzz);
  const Eigen::MatrixXd Kinv = ldlt.solve(Eigen::MatrixXd::Identity(M, M));
  double logdet_k = 0.0;
  for (Eigen::Index k = 0; k < M; ++k)
    logdet_k += std::log(ldlt.vectorD()(k));
  double logdet_l = 0.0;
  for (Eigen::Index k = 0; k < M; ++k)
    logdet_l += std::log(std::fabs(state.L(k, k)));

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::VectorXd xi(M), u(M);
  double sum = 0.0, sum2 = 0.0;
  for (long s = 0; s < n_samples; ++s) {
    for (Eigen::Index k = 0; k < M; ++k)
      xi(k) = gauss(rng);
    u = state.m + state.L * xi;
    // log q - log p; the 2 pi terms cancel.
    const double lq = -0.5 * xi.squaredNorm() - logdet_l;
    const double lp = -0.5 * u.dot(Kinv * u) - 0.5 * logdet_k;
    const double x = lq - lp;
    sum += x;
    sum2 += x * x;
  }
  const double n = static_cast<double>(n_samples);
  MonteCarloEstimate est;
  est.value = sum / n;
  est.std_error = std::sqrt(std::max(0.0, sum2 / n - est.value * est.value) / n);
  return est;
}

/// Analytic E[log N(r | eps, s2)] for eps ~ N(mu, v).
inline double expected_log_lik_closed_form(double y, double f, double c, double mu, double v,
                                           double noise_var) {
  const double d = y - f - c - mu;
  return -0.5 * std::log(2.0 * std::numbers::pi * noise_var) - (d * d + v) / (2.0 * noise_var);
}

/// Joint draw of a latent GP at X and noisy observations: returns (latent, observed).
inline std::pair<Eigen::VectorXd, Eigen::VectorXd>
sample_gp(const KernelInputs &X, const KernelParams &p, double noise_var, double jitter,
          std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const Eigen::MatrixXd K = gram(X, p, jitter);
  const JitteredCholesky ch = robust_cholesky(K);
  Eigen::VectorXd z(X.rows()), e(X.rows());
  for (Eigen::Index k = 0; k < X.rows(); ++k)
    z(k) = gauss(rng);
  for (Eigen::Index k = 0; k < X.rows(); ++k)
    e(k) = gauss(rng);
  Eigen::VectorXd latent = ch.llt.matrixL() * z;
  Eigen::VectorXd obs = latent + std::sqrt(noise_var) * e;
  return {latent, obs};
}

} // namespace mrwind
