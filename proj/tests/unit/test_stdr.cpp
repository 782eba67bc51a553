#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "fixtures.hpp"

using namespace mrwind;
using mrwind::fixtures::random_graph_instance;
using mrwind::fixtures::random_params;

namespace {

// Two clusters with the single edge 0 -> 1, active at every step, lambda
// pinned at kLambdaMin.
struct EdgeInstance {
  ResolutionView view;
  DynamicGraph ddg;
  TravelTimeTensor lambda;
};

EdgeInstance single_edge(const Eigen::MatrixXd &speeds) {
  EdgeInstance x;
  x.view.kappa = 2;
  x.view.speeds = speeds;
  x.view.directions = Eigen::MatrixXd::Zero(2, speeds.cols());
  x.ddg.support.kappa = 2;
  x.ddg.support.edges = {{0, 1}};
  x.ddg.support.in_edges = {{}, {0}};
  x.ddg.active.assign(static_cast<std::size_t>(speeds.cols()), std::vector<int>{0});
  x.lambda.steps = Eigen::MatrixXd::Constant(1, speeds.cols(), kLambdaMin);
  return x;
}

StdrParams params2(double mu0, double mu1, double beta, double alpha) {
  StdrParams p;
  p.kappa = 2;
  p.mu = Eigen::Vector2d(mu0, mu1);
  p.beta = Eigen::Vector2d::Constant(beta);
  p.alpha = {alpha};
  return p;
}

} // namespace

TEST(Trigger, CausalityGateAndZeroWeight) {
  EXPECT_EQ(trigger_value(1.0, 1.0, 1.0, 1.5, 3.0), 0.0);
  EXPECT_EQ(trigger_value(4.0, 0.0, 1.0, 1.0, 3.0), 0.0);
}

TEST(Trigger, HandEvaluation) {
  // 2 exp(-1)
  EXPECT_NEAR(trigger_value(1.0, 1.0, 1.0, 0.0, 2.0), 0.7357588823428847, 1e-15);
}

TEST(Predict, BackgroundOnly) {
  auto x = single_edge(Eigen::MatrixXd::Zero(2, 4));
  x.ddg.active.assign(4, {});
  StdrConfig cfg;
  cfg.memory_depth = 3;
  EXPECT_DOUBLE_EQ(predict(params2(2.5, 1.5, 0.7, 0.4), x.view, x.ddg, x.lambda, 1, 3, cfg), 1.5);
}

TEST(Predict, SingleActiveEdge) {
  Eigen::MatrixXd y(2, 2);
  y << 2.0, 0.0, 0.0, 0.0;
  const auto x = single_edge(y);
  StdrConfig cfg;
  cfg.memory_depth = 1;
  const double f = predict(params2(0.0, 1.0, 1.0, 1.0), x.view, x.ddg, x.lambda, 1, 1, cfg);
  EXPECT_NEAR(f, 1.73576, 1e-5);
  EXPECT_NEAR(f, 1.0 + 2.0 * std::exp(-(1.0 - kLambdaMin)), 1e-14);
}

TEST(Predict, MatchesBruteForce) {
  std::mt19937_64 rng(41);
  StdrConfig cfg;
  cfg.memory_depth = 5;
  for (int rep = 0; rep < 10; ++rep) {
    const auto g = random_graph_instance(rng, 6, 30);
    const auto p = random_params(rng, 6, g.support.size(), 1.0);
    for (int t = cfg.memory_depth; t <= 30; ++t)
      for (int i = 0; i < 6; ++i)
        EXPECT_NEAR(predict(p, g.view, g.ddg, g.lambda, i, t, cfg),
                    brute_force_predict(p, g.view, g.ddg, g.lambda, i, t, cfg.memory_depth), 1e-12);
  }
}

TEST(Predict, NonNegativeAndLinearInHistory) {
  std::mt19937_64 rng(43);
  StdrConfig cfg;
  for (int rep = 0; rep < 10; ++rep) {
    auto g = random_graph_instance(rng, 4, 20);
    const auto p = random_params(rng, 4, g.support.size(), 1.0);
    const int t = 12;
    const Eigen::VectorXd f = predict_all(p, g.view, g.ddg, g.lambda, t, cfg);
    EXPECT_TRUE((f.array() >= p.mu.array()).all());
    // Double the history while keeping the graph and travel times fixed.
    g.view.speeds *= 2.0;
    const Eigen::VectorXd f2 = predict_all(p, g.view, g.ddg, g.lambda, t, cfg);
    EXPECT_LT(((f2 - p.mu) - 2.0 * (f - p.mu)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Predict, InsufficientHistory) {
  const auto x = single_edge(Eigen::MatrixXd::Ones(2, 10));
  StdrConfig cfg;
  cfg.memory_depth = 6;
  try {
    predict(params2(1, 1, 1, 1), x.view, x.ddg, x.lambda, 0, 5, cfg);
    FAIL();
  } catch (const Error &e) {
    EXPECT_EQ(e.code(), Errc::insufficient_history);
  }
}

TEST(Loss, HandValues) {
  // One target cell: y(1, 1) with the self term off and no history signal.
  StdrConfig cfg;
  cfg.memory_depth = 1;
  cfg.self_excitation = false;
  cfg.delta = 0.8;
  Eigen::MatrixXd y(2, 2);
  y << 0, 0, 0, 3;
  auto x = single_edge(y);
  const StepRange r{1, 2};
  // Only cluster 1 contributes: pin cluster 0's prediction to its truth.
  EXPECT_NEAR(loss(params2(0.0, 4.0, 1.0, 0.0), x.view, x.ddg, x.lambda, cfg, r), 1.8, 1e-15);
  x.view.speeds(1, 1) = 4.0;
  EXPECT_NEAR(loss(params2(0.0, 3.0, 1.0, 0.0), x.view, x.ddg, x.lambda, cfg, r), 1.0, 1e-15);
  EXPECT_EQ(loss(params2(0.0, 4.0, 1.0, 0.0), x.view, x.ddg, x.lambda, cfg, r), 0.0);
}

TEST(Gradient, SingleCellMuPartial) {
  StdrConfig cfg;
  cfg.memory_depth = 1;
  cfg.self_excitation = false;
  Eigen::MatrixXd y(2, 2);
  y << 0, 0, 0, 3;
  const auto x = single_edge(y);
  const auto g = loss_gradient(params2(0.0, 4.0, 1.0, 0.0), x.view, x.ddg, x.lambda, cfg, StepRange{1, 2});
  EXPECT_NEAR(g(1), -2.0 * (1.0 + 0.8) * (3.0 - 4.0), 1e-14);
  EXPECT_EQ(g(0), 0.0);
}

TEST(Gradient, ZeroAtPerfectFit) {
  std::mt19937_64 rng(47);
  StdrConfig cfg;
  cfg.memory_depth = 4;
  const auto truth = random_params(rng, 3, 6);
  const auto sim = simulate_stdr(mrwind::fixtures::triangle_centroids(), truth, 60, 0.0, 1, cfg);
  const auto g = loss_gradient(truth, sim.view, sim.ddg, sim.lambda, cfg, full_range(sim.view, cfg));
  EXPECT_LT(g.cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT(loss(truth, sim.view, sim.ddg, sim.lambda, cfg), 1e-20);
}

TEST(Gradient, MatchesCentralDifferences) {
  std::mt19937_64 rng(53);
  for (double delta : {0.0, 0.8}) {
    for (int rep = 0; rep < 5; ++rep) {
      StdrConfig cfg;
      cfg.memory_depth = 4;
      cfg.delta = delta;
      const auto truth = random_params(rng, 3, 6);
      const auto sim = simulate_stdr(mrwind::fixtures::triangle_centroids(), truth, 40, 0.5,
                                     static_cast<std::uint64_t>(rep), cfg);
      auto p = random_params(rng, 3, 6);
      const StepRange r = full_range(sim.view, cfg);
      const Eigen::VectorXd g = loss_gradient(p, sim.view, sim.ddg, sim.lambda, cfg, r);
      const Eigen::VectorXd theta = p.pack();
      constexpr double h = 1e-5;
      for (Eigen::Index k = 0; k < theta.size(); ++k) {
        Eigen::VectorXd tp = theta, tm = theta;
        tp(k) += h;
        tm(k) -= h;
        StdrParams pp = p, pm = p;
        pp.unpack(tp);
        pm.unpack(tm);
        const double fd = (loss(pp, sim.view, sim.ddg, sim.lambda, cfg, r) -
                           loss(pm, sim.view, sim.ddg, sim.lambda, cfg, r)) / (2 * h);
        EXPECT_LE(std::fabs(fd - g(k)), 1e-4 * std::max(1.0, std::fabs(g(k)))) << "k=" << k;
      }
    }
  }
}

TEST(Fit, ConstantSeriesRecoversLevel) {
  auto x = single_edge(Eigen::MatrixXd::Constant(2, 80, 6.5));
  x.ddg.active.assign(80, {});
  StdrConfig cfg;
  cfg.memory_depth = 3;
  cfg.delta = 0.0;
  cfg.self_excitation = false;
  cfg.learning_rate = 0.05;
  cfg.epochs = 400;
  cfg.batch = 0;
  const auto res = fit(x.view, x.ddg, x.lambda, cfg, params2(0.0, 0.0, 1.0, 0.1));
  EXPECT_NEAR(res.params.mu(0), 6.5, 1e-2);
  EXPECT_NEAR(res.params.mu(1), 6.5, 1e-2);
  EXPECT_LE(res.final_loss, res.initial_loss);
}

TEST(Fit, PerfectWarmStartIsFixedPoint) {
  std::mt19937_64 rng(59);
  StdrConfig cfg;
  cfg.memory_depth = 4;
  cfg.epochs = 20;
  const auto truth = random_params(rng, 3, 6);
  const auto sim = simulate_stdr(mrwind::fixtures::triangle_centroids(), truth, 80, 0.0, 2, cfg);
  const auto res = fit(sim.view, sim.ddg, sim.lambda, cfg, truth);
  EXPECT_LT((res.params.pack() - truth.pack()).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Fit, ParametersStayNonNegativeAndLossImproves) {
  std::mt19937_64 rng(61);
  StdrConfig cfg;
  cfg.memory_depth = 4;
  cfg.epochs = 30;
  const auto truth = random_params(rng, 3, 6);
  const auto sim = simulate_stdr(mrwind::fixtures::triangle_centroids(), truth, 120, 0.3, 3, cfg);
  const auto res = fit(sim.view, sim.ddg, sim.lambda, cfg);
  EXPECT_TRUE((res.params.pack().array() >= 0.0).all());
  EXPECT_LE(res.final_loss, res.initial_loss);
  EXPECT_EQ(res.loss_trace.size(), 30u);
}

TEST(Fit, Deterministic) {
  std::mt19937_64 rng(67);
  StdrConfig cfg;
  cfg.memory_depth = 3;
  cfg.epochs = 10;
  cfg.batch = 7;
  const auto truth = random_params(rng, 3, 6);
  const auto sim = simulate_stdr(mrwind::fixtures::triangle_centroids(), truth, 60, 0.3, 4, cfg);
  const auto a = fit(sim.view, sim.ddg, sim.lambda, cfg);
  const auto b = fit(sim.view, sim.ddg, sim.lambda, cfg);
  EXPECT_EQ(a.params.pack(), b.params.pack());
  EXPECT_EQ(a.loss_trace, b.loss_trace);
}

TEST(Fit, DivergenceNamesEpoch) {
  auto x = single_edge(Eigen::MatrixXd::Constant(2, 20, 5.0));
  StdrConfig cfg;
  cfg.memory_depth = 2;
  cfg.optimizer = StdrOptimizer::sgd;
  cfg.learning_rate = 1e200;
  cfg.epochs = 3;
  try {
    fit(x.view, x.ddg, x.lambda, cfg, params2(0, 0, 1, 0.1));
    FAIL() << "expected divergence";
  } catch (const DivergedError &e) {
    EXPECT_EQ(e.code(), Errc::diverged);
    EXPECT_EQ(e.epoch(), 1);
    EXPECT_NE(std::string(e.what()).find("epoch 1"), std::string::npos);
  }
}

TEST(Rolling, StrictlyCausal) {
  std::mt19937_64 rng(71);
  StdrConfig cfg;
  cfg.memory_depth = 3;
  cfg.epochs = 5;
  cfg.forecast_epochs = 2;
  const auto truth = random_params(rng, 3, 6);
  auto sim = simulate_stdr(mrwind::fixtures::triangle_centroids(), truth, 40, 0.3, 5, cfg);
  const auto a = rolling_forecast(sim.view, sim.ddg, sim.lambda, cfg, 30, 33);
  // Perturb the target step and everything after it.
  sim.view.speeds.rightCols(10).array() += 3.0;
  const auto b = rolling_forecast(sim.view, sim.ddg, sim.lambda, cfg, 30, 31);
  for (std::size_t k = 0; k < b.size(); ++k) {
    EXPECT_EQ(a[k].f_pred, b[k].f_pred);
    EXPECT_EQ(a[k].t, 30);
  }
  EXPECT_EQ(a.size(), 9u);
}

TEST(Rolling, RejectsEarlyStart) {
  const auto x = single_edge(Eigen::MatrixXd::Ones(2, 10));
  StdrConfig cfg;
  cfg.memory_depth = 3;
  EXPECT_THROW(rolling_forecast(x.view, x.ddg, x.lambda, cfg, 3, 6), Error);
}

TEST(Serialization, ParamsAndForecastRoundTrip) {
  std::mt19937_64 rng(73);
  const auto c = mrwind::fixtures::triangle_centroids();
  const auto support = build_support(c, kDefaultRadiusKm);
  auto p = random_params(rng, 3, support.size());
  p.eta = 4;
  StdrConfig cfg;
  const nlohmann::json j = stdr_params_to_json(p, support, cfg, 1.25);
  const auto q = stdr_params_from_json(nlohmann::json::parse(j.dump()), support);
  EXPECT_EQ(q.pack(), p.pack());
  EXPECT_EQ(q.eta, 4);
  EXPECT_EQ(config_from_json(config_to_json(cfg)).memory_depth, cfg.memory_depth);

  std::vector<ForecastRow> rows = {{0, 7, 1.0 / 3.0, 2.5}, {2, 8, 0.1, 1e-17}};
  std::ostringstream os;
  write_forecast_csv(os, rows);
  const auto back = parse_forecast_csv(os.str());
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].y_true, rows[0].y_true);
  EXPECT_EQ(back[1].f_pred, rows[1].f_pred);
  EXPECT_EQ(back[1].i, 2);
}
