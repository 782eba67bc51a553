#pragma once

// Spatio-temporal delayed regressive (STDR) predictor: delayed, exponentially
// decaying upstream triggering over a directed dynamic graph, fitted by
// projected stochastic gradient on an overestimation-penalized squared loss.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "mrwind/data.hpp"
#include "mrwind/ddg.hpp"
#include "mrwind/error.hpp"

namespace mrwind {

/// theta = {mu, alpha, beta} for one resolution. alpha is indexed like the
/// support edges; the self weight alpha_ii is fixed at 1 and not stored.
struct StdrParams {
  int kappa = 0;
  int eta = 1;
  Eigen::VectorXd mu;
  Eigen::VectorXd beta;
  std::vector<double> alpha;

  /// 2 kappa + |E|.
  std::size_t size() const { return static_cast<std::size_t>(2 * kappa) + alpha.size(); }

  Eigen::VectorXd pack() const {
    Eigen::VectorXd v(static_cast<Eigen::Index>(size()));
    v.head(kappa) = mu;
    v.segment(kappa, kappa) = beta;
    for (std::size_t e = 0; e < alpha.size(); ++e)
      v(2 * kappa + static_cast<Eigen::Index>(e)) = alpha[e];
    return v;
  }
  void unpack(const Eigen::VectorXd &v) {
    mu = v.head(kappa);
    beta = v.segment(kappa, kappa);
    for (std::size_t e = 0; e < alpha.size(); ++e)
      alpha[e] = v(2 * kappa + static_cast<Eigen::Index>(e));
  }
};

enum class StdrOptimizer { sgd, adam };

struct StdrConfig {
  int memory_depth = 6;
  double delta = 0.8;
  double learning_rate = 1e-2;
  int epochs = 200;
  int batch = 32; // time steps per minibatch; 0 = all
  std::uint64_t seed = 0;
  StdrOptimizer optimizer = StdrOptimizer::adam;
  bool self_excitation = true;
  int forecast_epochs = 5; // warm-started epochs per rolling step
  int train_window = 0;    // rolling fit history cap in steps; 0 = all
};

struct StdrFitResult {
  StdrParams params;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> loss_trace; // full-range loss after each epoch
};

/// Half-open range of absolute target steps whose loss terms are used.
struct StepRange {
  int begin = 0;
  int end = 0;
  int size() const { return std::max(0, end - begin); }
};

struct ForecastRow {
  int i = 0;
  int t = 0;
  double y_true = 0.0;
  double f_pred = 0.0;
};

/// g = alpha * beta * exp(-beta (elapsed - lambda)) * y * 1{elapsed >= lambda}
inline double trigger_value(double elapsed, double alpha, double beta, double lambda, double y) {
  if (elapsed < lambda)
    return 0.0;
  return alpha * beta * std::exp(-beta * (elapsed - lambda)) * y;
}

/// Triggering effect of cluster j at step tau on cluster i at step t. j == i
/// is the self term with alpha_ii = 1.
inline double trigger(int t, int tau, int i, int j, const StdrParams &params,
                      const DynamicGraph &ddg, const TravelTimeTensor &lambda,
                      const ResolutionView &view) {
  const double y = view.speed(j, tau);
  if (j == i)
    return trigger_value(t - tau, 1.0, params.beta(j), TravelTimeTensor::self(), y);
  const int e = ddg.support.find(j, i);
  if (e < 0)
    return 0.0;
  return trigger_value(t - tau, params.alpha[static_cast<std::size_t>(e)], params.beta(j),
                       lambda.at(e, tau), y);
}

namespace detail {

inline void require_history(const ResolutionView &view, int t, int depth) {
  if (t - depth < view.first_step)
    throw Error(Errc::insufficient_history,
                "prediction at t=" + std::to_string(t) + " needs " + std::to_string(depth) +
                    " steps of history; view starts at " + std::to_string(view.first_step));
  if (t > view.end_step())
    throw Error(Errc::out_of_range, "prediction step " + std::to_string(t) + " is beyond the data");
}

/// Visits every active triggering term feeding step t:
/// fn(target i, source j, edge index or -1 for self, elapsed - lambda, y_jtau).
template <typename Fn>
void for_each_term(const ResolutionView &view, const DynamicGraph &ddg,
                   const TravelTimeTensor &lambda, int t, int depth, bool self_excitation, Fn &&fn) {
  const int kappa = view.clusters();
  for (int tau = t - depth; tau < t; ++tau) {
    const double elapsed = t - tau;
    if (self_excitation && elapsed >= TravelTimeTensor::self())
      for (int j = 0; j < kappa; ++j)
        fn(j, j, -1, elapsed - TravelTimeTensor::self(), view.speed(j, tau));
    for (int e : ddg.active_at(tau)) {
      const Edge &ed = ddg.support.edges[static_cast<std::size_t>(e)];
      const double lam = lambda.at(e, tau);
      if (elapsed >= lam)
        fn(ed.to, ed.from, e, elapsed - lam, view.speed(ed.from, tau));
    }
  }
}

} // namespace detail

/// f(i, t) for every cluster i.
inline Eigen::VectorXd predict_all(const StdrParams &params, const ResolutionView &view,
                                   const DynamicGraph &ddg, const TravelTimeTensor &lambda, int t,
                                   const StdrConfig &config) {
  detail::require_history(view, t, config.memory_depth);
  Eigen::VectorXd f = params.mu;
  detail::for_each_term(view, ddg, lambda, t, config.memory_depth, config.self_excitation,
                        [&](int i, int j, int e, double lag, double y) {
                          const double a = e < 0 ? 1.0 : params.alpha[static_cast<std::size_t>(e)];
                          const double b = params.beta(j);
                          f(i) += a * b * std::exp(-b * lag) * y;
                        });
  return f;
}

inline double predict(const StdrParams &params, const ResolutionView &view, const DynamicGraph &ddg,
                      const TravelTimeTensor &lambda, int i, int t, const StdrConfig &config) {
  return predict_all(params, view, ddg, lambda, t, config)(i);
}

/// Default loss range: every step with a full memory window.
inline StepRange full_range(const ResolutionView &view, const StdrConfig &config) {
  return {view.first_step + config.memory_depth, view.end_step()};
}

/// Penalized squared loss: sum over cells of (1 + delta 1{y <= f}) (y - f)^2.
inline double loss(const StdrParams &params, const ResolutionView &view, const DynamicGraph &ddg,
                   const TravelTimeTensor &lambda, const StdrConfig &config, StepRange range) {
  double total = 0.0;
  for (int t = range.begin; t < range.end; ++t) {
    const Eigen::VectorXd f = predict_all(params, view, ddg, lambda, t, config);
    for (int i = 0; i < view.clusters(); ++i) {
      const double y = view.speed(i, t);
      const double r = y - f(i);
      total += (1.0 + (y <= f(i) ? config.delta : 0.0)) * r * r;
    }
  }
  return total;
}

inline double loss(const StdrParams &params, const ResolutionView &view, const DynamicGraph &ddg,
                   const TravelTimeTensor &lambda, const StdrConfig &config) {
  return loss(params, view, ddg, lambda, config, full_range(view, config));
}

/// Analytic gradient of the loss over the given target steps, packed as
/// [mu, beta, alpha]. The overestimation indicator is held constant.
inline Eigen::VectorXd loss_gradient(const StdrParams &params, const ResolutionView &view,
                                     const DynamicGraph &ddg, const TravelTimeTensor &lambda,
                                     const StdrConfig &config, const std::vector<int> &steps,
                                     double *loss_out = nullptr) {
  const int kappa = view.clusters();
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(params.size()));
  Eigen::VectorXd dldf(kappa);
  double total = 0.0;
  for (int t : steps) {
    const Eigen::VectorXd f = predict_all(params, view, ddg, lambda, t, config);
    for (int i = 0; i < kappa; ++i) {
      const double y = view.speed(i, t);
      const double w = 1.0 + (y <= f(i) ? config.delta : 0.0);
      const double r = y - f(i);
      total += w * r * r;
      dldf(i) = -2.0 * w * r;
    }
    grad.head(kappa) += dldf;
    detail::for_each_term(view, ddg, lambda, t, config.memory_depth, config.self_excitation,
                          [&](int i, int j, int e, double lag, double y) {
                            const double a = e < 0 ? 1.0 : params.alpha[static_cast<std::size_t>(e)];
                            const double b = params.beta(j);
                            const double ex = std::exp(-b * lag) * y;
                            grad(kappa + j) += dldf(i) * a * (1.0 - b * lag) * ex;
                            if (e >= 0)
                              grad(2 * kappa + e) += dldf(i) * b * ex;
                          });
  }
  if (loss_out)
    *loss_out = total;
  return grad;
}

inline Eigen::VectorXd loss_gradient(const StdrParams &params, const ResolutionView &view,
                                     const DynamicGraph &ddg, const TravelTimeTensor &lambda,
                                     const StdrConfig &config, StepRange range) {
  std::vector<int> steps(static_cast<std::size_t>(range.size()));
  std::iota(steps.begin(), steps.end(), range.begin);
  return loss_gradient(params, view, ddg, lambda, config, steps);
}

/// mu = per-cluster mean over the range, alpha = 0.1, beta = 1.
inline StdrParams initial_params(const ResolutionView &view, const GraphSupport &support,
                                 StepRange range) {
  StdrParams p;
  p.kappa = view.clusters();
  p.eta = view.eta;
  p.mu = Eigen::VectorXd::Zero(p.kappa);
  if (range.size() > 0)
    p.mu = view.speeds.middleCols(range.begin - view.first_step, range.size()).rowwise().mean();
  p.beta = Eigen::VectorXd::Ones(p.kappa);
  p.alpha.assign(support.size(), 0.1);
  return p;
}

/// Projected stochastic gradient fit. Each step follows the mean gradient
/// over a minibatch of target steps, then clamps to the non-negative orthant.
/// Returns the lowest-loss iterate seen at epoch boundaries.
inline StdrFitResult fit(const ResolutionView &view, const DynamicGraph &ddg,
                         const TravelTimeTensor &lambda, const StdrConfig &config,
                         const std::optional<StdrParams> &warm_start = std::nullopt,
                         std::optional<StepRange> range_opt = std::nullopt,
                         std::optional<int> epochs_opt = std::nullopt) {
  const StepRange range = range_opt.value_or(full_range(view, config));
  if (config.memory_depth < 1)
    throw Error(Errc::config, "memory depth must be >= 1");
  if (config.delta < 0.0)
    throw Error(Errc::config, "delta must be >= 0");
  if (range.size() < 1 || range.begin - config.memory_depth < view.first_step)
    throw Error(Errc::insufficient_history, "fit needs at least memory_depth + 1 steps");

  StdrParams params = warm_start ? *warm_start : initial_params(view, ddg.support, range);
  if (params.kappa != view.clusters() || params.alpha.size() != ddg.support.size())
    throw Error(Errc::config, "warm start does not match the resolution");

  StdrFitResult out;
  out.initial_loss = loss(params, view, ddg, lambda, config, range);
  if (!std::isfinite(out.initial_loss))
    throw DivergedError(0, "STDR fit");

  Eigen::VectorXd theta = params.pack();
  Eigen::VectorXd best = theta;
  double best_loss = out.initial_loss;

  const auto n = theta.size();
  Eigen::VectorXd m1 = Eigen::VectorXd::Zero(n), m2 = Eigen::VectorXd::Zero(n);
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  long step_count = 0;

  std::vector<int> order(static_cast<std::size_t>(range.size()));
  std::iota(order.begin(), order.end(), range.begin);
  std::mt19937_64 rng(config.seed);
  const int batch = config.batch > 0 ? std::min(config.batch, range.size()) : range.size();
  const int kappa = view.clusters();
  const int epochs = epochs_opt.value_or(config.epochs);

  std::vector<int> chunk;
  for (int epoch = 1; epoch <= epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (int b0 = 0; b0 < range.size(); b0 += batch) {
      const int b1i = std::min(range.size(), b0 + batch);
      chunk.assign(order.begin() + b0, order.begin() + b1i);
      params.unpack(theta);
      Eigen::VectorXd g = loss_gradient(params, view, ddg, lambda, config, chunk);
      g /= static_cast<double>(chunk.size() * static_cast<std::size_t>(kappa));
      if (config.optimizer == StdrOptimizer::adam) {
        ++step_count;
        m1 = b1 * m1 + (1.0 - b1) * g;
        m2 = b2 * m2 + (1.0 - b2) * g.cwiseProduct(g);
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_count));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_count));
        theta.array() -= config.learning_rate * (m1.array() / c1) /
                         ((m2.array() / c2).sqrt() + eps);
      } else {
        theta -= config.learning_rate * g;
      }
      theta = theta.cwiseMax(0.0);
    }
    params.unpack(theta);
    const double l = loss(params, view, ddg, lambda, config, range);
    if (!std::isfinite(l))
      throw DivergedError(epoch, "STDR fit");
    out.loss_trace.push_back(l);
    if (l < best_loss) {
      best_loss = l;
      best = theta;
    }
  }
  params.unpack(best);
  out.params = params;
  out.final_loss = best_loss;
  return out;
}

/// One-step-ahead rolling forecast over target steps [test_begin, test_end).
/// Each target s is predicted from a fit on steps strictly before s,
/// warm-started from the previous target's fit (or from `initial`).
inline std::vector<ForecastRow> rolling_forecast(const ResolutionView &view, const DynamicGraph &ddg,
                                                 const TravelTimeTensor &lambda,
                                                 const StdrConfig &config, int test_begin,
                                                 int test_end,
                                                 const std::optional<StdrParams> &initial = std::nullopt,
                                                 StdrParams *last_params = nullptr) {
  const int min_begin = view.first_step + config.memory_depth + 1;
  if (test_begin < min_begin)
    throw Error(Errc::insufficient_history,
                "rolling forecast must start at step >= " + std::to_string(min_begin));
  test_end = std::min(test_end, view.end_step());
  std::vector<ForecastRow> rows;
  std::optional<StdrParams> warm = initial;
  for (int s = test_begin; s < test_end; ++s) {
    StepRange range{view.first_step + config.memory_depth, s};
    if (config.train_window > 0)
      range.begin = std::max(range.begin, s - config.train_window);
    StdrConfig step_cfg = config;
    step_cfg.seed = config.seed + static_cast<std::uint64_t>(s);
    const int epochs = warm ? config.forecast_epochs : config.epochs;
    auto res = fit(view, ddg, lambda, step_cfg, warm, range, epochs);
    warm = res.params;
    const Eigen::VectorXd f = predict_all(res.params, view, ddg, lambda, s, config);
    for (int i = 0; i < view.clusters(); ++i)
      rows.push_back({i, s, view.speed(i, s), f(i)});
  }
  if (last_params && warm)
    *last_params = *warm;
  return rows;
}

// Serialization ----------------------------------------------------------------

inline constexpr const char *kForecastCsvHeader = "i,t,y_true,f_pred";

inline void write_forecast_csv(std::ostream &os, const std::vector<ForecastRow> &rows) {
  os << kForecastCsvHeader << '\n';
  char buf[128];
  for (const ForecastRow &r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%d,%.17g,%.17g\n", r.i, r.t, r.y_true, r.f_pred);
    os << buf;
  }
}

inline std::vector<ForecastRow> parse_forecast_csv(std::string_view text) {
  std::vector<ForecastRow> rows;
  std::size_t pos = 0, line = 0;
  while (pos < text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos)
      nl = text.size();
    const std::string_view ln = detail::trim(text.substr(pos, nl - pos));
    pos = nl + 1;
    ++line;
    if (line == 1) {
      if (ln != kForecastCsvHeader)
        throw ParseError(line, "expected header '" + std::string(kForecastCsvHeader) + "'");
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
    if (start <= ln.size())
      throw ParseError(line, "expected 4 fields");
    rows.push_back({detail::parse_field<int>(f[0], line, "i"),
                    detail::parse_field<int>(f[1], line, "t"),
                    detail::parse_field<double>(f[2], line, "y_true"),
                    detail::parse_field<double>(f[3], line, "f_pred")});
  }
  return rows;
}

inline nlohmann::json config_to_json(const StdrConfig &c) {
  return {{"memory_depth", c.memory_depth},
          {"delta", c.delta},
          {"learning_rate", c.learning_rate},
          {"epochs", c.epochs},
          {"batch", c.batch},
          {"seed", c.seed},
          {"optimizer", c.optimizer == StdrOptimizer::adam ? "adam" : "sgd"},
          {"self_excitation", c.self_excitation},
          {"forecast_epochs", c.forecast_epochs},
          {"train_window", c.train_window}};
}

inline StdrConfig config_from_json(const nlohmann::json &j) {
  StdrConfig c;
  c.memory_depth = j.value("memory_depth", c.memory_depth);
  c.delta = j.value("delta", c.delta);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.epochs = j.value("epochs", c.epochs);
  c.batch = j.value("batch", c.batch);
  c.seed = j.value("seed", c.seed);
  const std::string opt = j.value("optimizer", std::string("adam"));
  if (opt != "adam" && opt != "sgd")
    throw Error(Errc::config, "unknown STDR optimizer '" + opt + "'");
  c.optimizer = opt == "adam" ? StdrOptimizer::adam : StdrOptimizer::sgd;
  c.self_excitation = j.value("self_excitation", c.self_excitation);
  c.forecast_epochs = j.value("forecast_epochs", c.forecast_epochs);
  c.train_window = j.value("train_window", c.train_window);
  return c;
}

inline nlohmann::json stdr_params_to_json(const StdrParams &p, const GraphSupport &support,
                                          const StdrConfig &config, double final_loss) {
  nlohmann::json alpha = nlohmann::json::array();
  for (std::size_t e = 0; e < p.alpha.size(); ++e)
    alpha.push_back({{"j", support.edges[e].from}, {"i", support.edges[e].to}, {"value", p.alpha[e]}});
  return {{"kappa", p.kappa},
          {"eta", p.eta},
          {"mu", std::vector<double>(p.mu.data(), p.mu.data() + p.mu.size())},
          {"alpha", alpha},
          {"beta", std::vector<double>(p.beta.data(), p.beta.data() + p.beta.size())},
          {"config", config_to_json(config)},
          {"final_loss", final_loss}};
}

inline StdrParams stdr_params_from_json(const nlohmann::json &j, const GraphSupport &support) {
  StdrParams p;
  p.kappa = j.at("kappa").get<int>();
  p.eta = j.at("eta").get<int>();
  const auto mu = j.at("mu").get<std::vector<double>>();
  const auto beta = j.at("beta").get<std::vector<double>>();
  if (static_cast<int>(mu.size()) != p.kappa || static_cast<int>(beta.size()) != p.kappa)
    throw Error(Errc::parse, "STDR parameter vectors do not match kappa");
  p.mu = Eigen::Map<const Eigen::VectorXd>(mu.data(), p.kappa);
  p.beta = Eigen::Map<const Eigen::VectorXd>(beta.data(), p.kappa);
  p.alpha.assign(support.size(), 0.0);
  for (const auto &a : j.at("alpha")) {
    const int e = support.find(a.at("j").get<int>(), a.at("i").get<int>());
    if (e < 0)
      throw Error(Errc::parse, "alpha entry outside the graph support");
    p.alpha[static_cast<std::size_t>(e)] = a.at("value").get<double>();
  }
  return p;
}

} // namespace mrwind
