#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "fixtures.hpp"

using namespace mrwind;
using mrwind::fixtures::random_gp_instance;

namespace {

constexpr double kLog2Pi = 1.8378770664093453; // log(2 pi)

SvgpState state_at(const KernelInputs &Z, const KernelParams &p, double noise_var) {
  SvgpState st;
  st.Z = Z;
  st.jitter = default_jitter(Z, p);
  st.noise_var = noise_var;
  st.m = Eigen::VectorXd::Zero(Z.rows());
  st.L = robust_cholesky(gram(Z, p, st.jitter)).llt.matrixL();
  return st;
}

SvgpState random_state(std::mt19937_64 &rng, const KernelInputs &Z, const KernelParams &p) {
  std::normal_distribution<double> g(0.0, 1.0);
  SvgpState st = state_at(Z, p, 0.3);
  for (Eigen::Index k = 0; k < st.m.size(); ++k)
    st.m(k) = g(rng);
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(Z.rows(), Z.rows());
  for (Eigen::Index a = 0; a < L.rows(); ++a) {
    for (Eigen::Index b = 0; b < a; ++b)
      L(a, b) = 0.3 * g(rng);
    L(a, a) = 0.5 + std::fabs(g(rng));
  }
  st.L = L;
  return st;
}

KernelInputs first_rows(const KernelInputs &X, Eigen::Index n) { return X.topRows(n); }

} // namespace

// Exact GP -------------------------------------------------------------------------

TEST(ExactGp, ScalarLogMarginal) {
  std::mt19937_64 rng(103);
  auto x = random_gp_instance(rng, 1);
  x.data.y = x.data.f;
  const double k = kernel_eval(x.data.coords[0], x.data.coords[0], x.params);
  EXPECT_NEAR(exact_log_marginal(x.data, x.params, 0.25, 0.0), -0.5 * std::log(k + 0.25) - 0.5 * kLog2Pi,
              1e-13);
}

TEST(ExactGp, PermutationInvariant) {
  std::mt19937_64 rng(107);
  const auto x = random_gp_instance(rng, 25);
  std::vector<int> idx(25);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  const double a = exact_log_marginal(x.data, x.params, 0.2, 1e-8);
  const double b = exact_log_marginal(x.data.subset(idx), x.params, 0.2, 1e-8);
  EXPECT_NEAR(a, b, 1e-10 * std::fabs(a));
}

TEST(ExactGp, MatchesDirectSolve) {
  std::mt19937_64 rng(109);
  const auto x = random_gp_instance(rng, 10);
  Eigen::MatrixXd K = gram(x.data.inputs(), x.params);
  K.diagonal().array() += 0.3;
  const Eigen::VectorXd r = x.data.y - x.data.f;
  const Eigen::FullPivLU<Eigen::MatrixXd> lu(K);
  const double direct = -0.5 * r.dot(lu.solve(r)) - 0.5 * std::log(lu.determinant()) - 5.0 * kLog2Pi;
  EXPECT_NEAR(exact_log_marginal(x.data, x.params, 0.3, 0.0), direct, 1e-10);
}

TEST(ExactGp, BiasShiftsResiduals) {
  std::mt19937_64 rng(113);
  auto x = random_gp_instance(rng, 12);
  const double before = exact_log_marginal(x.data, x.params, 0.3, 0.0);
  x.data.c = Eigen::VectorXd::Constant(12, 0.7);
  x.data.y.array() += 0.7;
  EXPECT_NEAR(exact_log_marginal(x.data, x.params, 0.3, 0.0), before, 1e-12);
}

TEST(ExactGp, InterpolationAndPriorReversion) {
  std::mt19937_64 rng(127);
  const auto x = random_gp_instance(rng, 15);
  const KernelInputs X = x.data.inputs();
  const auto post = exact_posterior(x.data, x.params, 1e-9, 0.0, first_rows(X, 3));
  for (int k = 0; k < 3; ++k)
    EXPECT_NEAR(post.mean(k), x.data.y(k) - x.data.f(k), 1e-4);

  KernelInputs far = first_rows(X, 2);
  far.col(kTime).array() += 1e6;
  const auto pf = exact_posterior(x.data, x.params, 0.1, 0.0, far);
  EXPECT_LT((pf.cov - gram(far, x.params)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT(pf.mean.cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ExactGp, ConditioningReducesVariance) {
  std::mt19937_64 rng(131);
  for (int rep = 0; rep < 10; ++rep) {
    const auto x = random_gp_instance(rng, 20);
    const auto y = random_gp_instance(rng, 8);
    const KernelInputs Xs = y.data.inputs();
    const auto post = exact_posterior(x.data, x.params, 0.2, 0.0, Xs);
    const Eigen::VectorXd prior = gram_diag(Xs, x.params);
    EXPECT_TRUE((post.cov.diagonal().array() <= prior.array() + 1e-12).all());
  }
}

// KL --------------------------------------------------------------------------------

TEST(Kl, ZeroAtPrior) {
  std::mt19937_64 rng(137);
  const auto x = random_gp_instance(rng, 6);
  const KernelInputs Z = x.data.inputs();
  const SvgpState st = state_at(Z, x.params, 1.0);
  EXPECT_NEAR(kl_qu_pu(st, gram(Z, x.params, st.jitter)), 0.0, 1e-9);
}

TEST(Kl, ScalarExample) {
  SvgpState st;
  st.Z = KernelInputs::Zero(1, 5);
  st.m = Eigen::VectorXd::Constant(1, 2.0);
  st.L = Eigen::MatrixXd::Ones(1, 1);
  EXPECT_NEAR(kl_qu_pu(st, Eigen::MatrixXd::Ones(1, 1)), 2.0, 1e-15);
}

TEST(Kl, PositiveAwayFromPrior) {
  std::mt19937_64 rng(139);
  const auto x = random_gp_instance(rng, 5);
  const KernelInputs Z = x.data.inputs();
  const SvgpState base = state_at(Z, x.params, 1.0);
  const Eigen::MatrixXd K = gram(Z, x.params, base.jitter);
  for (int rep = 0; rep < 20; ++rep) {
    SvgpState st = base;
    st.m(rep % 5) += 1e-2;
    st.L(rep % 5, rep % 5) *= 1.01;
    EXPECT_GT(kl_qu_pu(st, K), 0.0);
    EXPECT_GE(kl_qu_pu(random_state(rng, Z, x.params), K), 0.0);
  }
}

TEST(Kl, NonPositiveDefinitePriorRejected) {
  SvgpState st;
  st.Z = KernelInputs::Zero(1, 5);
  st.m = Eigen::VectorXd::Zero(1);
  st.L = Eigen::MatrixXd::Ones(1, 1);
  EXPECT_THROW(kl_qu_pu(st, -Eigen::MatrixXd::Ones(1, 1)), Error);
}

TEST(Kl, MonteCarloAgreement) {
  std::mt19937_64 rng(149);
  const auto x = random_gp_instance(rng, 3);
  const KernelInputs Z = x.data.inputs();
  const SvgpState st = random_state(rng, Z, x.params);
  const Eigen::MatrixXd K = gram(Z, x.params, st.jitter);
  const double kl = kl_qu_pu(st, K);
  const auto mc = mc_kl_estimate(st, K, 200000, 7);
  EXPECT_LE(std::fabs(mc.value - kl), std::max(0.02 * kl, 3 * mc.std_error));
  const auto zero = mc_kl_estimate(state_at(Z, x.params, 1.0), K, 100000, 8);
  EXPECT_LE(std::fabs(zero.value), 3 * zero.std_error + 1e-12);
}

// q(eps) -----------------------------------------------------------------------------

TEST(QEps, InducingAtBatchReproducesMean) {
  std::mt19937_64 rng(151);
  const auto x = random_gp_instance(rng, 8);
  const KernelInputs X = x.data.inputs();
  SvgpState st = state_at(X, x.params, 1.0);
  std::normal_distribution<double> g;
  for (Eigen::Index k = 0; k < 8; ++k)
    st.m(k) = g(rng);
  const auto q = q_eps_marginal(X, st, x.params);
  EXPECT_LT((q.mean - st.m).cwiseAbs().maxCoeff(), 1e-8);
  // S = K_ZZ leaves the prior variance (plus the nugget) in place.
  EXPECT_LT((q.var - gram_diag(X, x.params, st.jitter)).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(QEps, FarPointRevertsToPrior) {
  std::mt19937_64 rng(157);
  const auto x = random_gp_instance(rng, 6);
  const KernelInputs Z = x.data.inputs();
  const SvgpState st = random_state(rng, Z, x.params);
  KernelInputs far = first_rows(Z, 1);
  far(0, kTime) += 1e6;
  const auto q = q_eps_marginal(far, st, x.params);
  EXPECT_NEAR(q.mean(0), 0.0, 1e-12);
  EXPECT_NEAR(q.var(0), kernel_eval(far.row(0), far.row(0), x.params) + st.jitter, 1e-12);
}

TEST(QEps, VariancesPositive) {
  std::mt19937_64 rng(163);
  for (int rep = 0; rep < 10; ++rep) {
    const auto x = random_gp_instance(rng, 30);
    const KernelInputs X = x.data.inputs();
    const SvgpState st = random_state(rng, first_rows(X, 10), x.params);
    EXPECT_TRUE((q_eps_marginal(X, st, x.params).var.array() > 0.0).all());
  }
}

// Expected log-likelihood -------------------------------------------------------------

TEST(ExpectedLogLik, DegenerateQ) {
  const double r = 0.6, s2 = 0.3;
  EXPECT_NEAR(expected_log_lik(5.4, 4.8, 0.1, 0.1, 0.0, s2),
              -0.5 * std::log(2 * std::numbers::pi * s2) - (r - 0.1 - 0.1) * (r - 0.1 - 0.1) / (2 * s2),
              1e-14);
}

TEST(ExpectedLogLik, ClosedFormAndConvergence) {
  std::mt19937_64 rng(167);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int rep = 0; rep < 200; ++rep) {
    const double y = 10 * u(rng), f = 10 * u(rng), c = u(rng) - 0.5, mu = 2 * u(rng) - 1;
    const double v = 2 * u(rng), s2 = 0.05 + u(rng);
    const double closed = expected_log_lik_closed_form(y, f, c, mu, v, s2);
    EXPECT_NEAR(expected_log_lik(y, f, c, mu, v, s2, 20), closed, 1e-10 * std::max(1.0, std::fabs(closed)));
    EXPECT_LT(std::fabs(expected_log_lik(y, f, c, mu, v, s2, 5) - expected_log_lik(y, f, c, mu, v, s2, 20)),
              1e-8);
  }
}

TEST(ExpectedLogLik, DerivativesMatchFiniteDifferences) {
  const GaussHermite gh(20);
  const double r = 0.8, m = 0.3, v = 0.4, s2 = 0.5, h = 1e-6;
  const auto t = expected_log_lik_terms(r, m, v, s2, gh);
  auto val = [&](double mm, double vv, double ss) { return expected_log_lik_terms(r, mm, vv, ss, gh).value; };
  EXPECT_NEAR(t.d_mean, (val(m + h, v, s2) - val(m - h, v, s2)) / (2 * h), 1e-8);
  EXPECT_NEAR(t.d_var, (val(m, v + h, s2) - val(m, v - h, s2)) / (2 * h), 1e-8);
  EXPECT_NEAR(t.d_noise, (val(m, v, s2 + h) - val(m, v, s2 - h)) / (2 * h), 1e-8);
}

// ELBO -------------------------------------------------------------------------------

TEST(Elbo, BoundedByExactMarginal) {
  std::mt19937_64 rng(173);
  for (int rep = 0; rep < 10; ++rep) {
    const auto x = random_gp_instance(rng, 30);
    const KernelInputs X = x.data.inputs();
    const SvgpState st = random_state(rng, first_rows(X, 8), x.params);
    const double e = elbo(x.data, st, x.params);
    const double ex = exact_log_marginal(x.data, x.params, st.noise_var, st.jitter);
    EXPECT_LE(e, ex + 1e-6 * std::fabs(ex));
  }
}

TEST(Elbo, TightAtExactPosterior) {
  std::mt19937_64 rng(179);
  const auto x = random_gp_instance(rng, 30);
  const KernelInputs X = x.data.inputs();
  SvgpState st = state_at(X, x.params, 0.3);
  set_exact_q(st, x.data, x.params);
  const double ex = exact_log_marginal(x.data, x.params, st.noise_var, st.jitter);
  const double e = elbo(x.data, st, x.params);
  EXPECT_LE(e, ex + 1e-6 * std::fabs(ex));
  EXPECT_LT(ex - e, 1e-3);
}

TEST(Elbo, HugeNoiseLeavesOnlyKl) {
  std::mt19937_64 rng(181);
  auto x = random_gp_instance(rng, 20);
  const KernelInputs X = x.data.inputs();
  SvgpState st = random_state(rng, first_rows(X, 5), x.params);
  st.noise_var = 1e14;
  const double kl = kl_qu_pu(st, gram(st.Z, x.params, st.jitter));
  const double e1 = elbo(x.data, st, x.params);
  x.data.y.array() += 3.0;
  const double e2 = elbo(x.data, st, x.params);
  EXPECT_NEAR(e1, e2, 1e-9);
  EXPECT_NEAR(e1 + kl, -10.0 * std::log(2 * std::numbers::pi * 1e14), 1e-6);
}

TEST(Elbo, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(191);
  const auto x = random_gp_instance(rng, 25);
  const KernelInputs X = x.data.inputs();
  KernelInputs Z = first_rows(X, 6);
  Z.col(kTime).array() += 0.37; // keep Z off the data so cross-gram nuggets stay inactive
  const SvgpState st = random_state(rng, Z, x.params);
  const double scale = 1.7;
  const auto ev = elbo_with_gradients(x.data, st, x.params, scale);
  const double h = 1e-6;
  auto at = [&](const SvgpState &s, const KernelParams &p) { return elbo(x.data, s, p, scale); };
  for (int k = 0; k < KernelParams::kLearnable; ++k) {
    auto lp = x.params.log_values(), lm = lp;
    lp(k) += h;
    lm(k) -= h;
    KernelParams pp = x.params, pm = x.params;
    pp.set_log_values(lp);
    pm.set_log_values(lm);
    const double fd = (at(st, pp) - at(st, pm)) / (2 * h);
    EXPECT_NEAR(ev.d_log_params(k), fd, 1e-4 * std::max(1.0, std::fabs(fd))) << "param " << k;
  }
  {
    SvgpState sp = st, sm = st;
    sp.noise_var *= std::exp(h);
    sm.noise_var *= std::exp(-h);
    const double fd = (at(sp, x.params) - at(sm, x.params)) / (2 * h);
    EXPECT_NEAR(ev.d_log_noise, fd, 1e-4 * std::max(1.0, std::fabs(fd)));
  }
  for (Eigen::Index b = 0; b < Z.rows(); ++b)
    for (int c = 0; c < 5; ++c) {
      SvgpState sp = st, sm = st;
      const double step = c == kTime || c >= kKappa ? 1e-4 : 1e-6;
      sp.Z(b, c) += step;
      sm.Z(b, c) -= step;
      const double fd = (at(sp, x.params) - at(sm, x.params)) / (2 * step);
      EXPECT_NEAR(ev.d_Z(b, c), fd, 1e-4 * std::max(1.0, std::fabs(fd))) << "Z(" << b << "," << c << ")";
    }
}

TEST(Elbo, FullNaturalStepReachesOptimum) {
  std::mt19937_64 rng(193);
  const auto x = random_gp_instance(rng, 40);
  const KernelInputs X = x.data.inputs();
  SvgpState st = random_state(rng, first_rows(X, 10), x.params);
  SequentialPosterior seq(st, x.params);
  seq.add(X, x.data.residuals());
  const SvgpState opt = seq.state();
  natural_gradient_step(st, elbo_with_gradients(x.data, st, x.params), 1.0);
  EXPECT_LT((st.m - opt.m).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LT((st.S() - opt.S()).cwiseAbs().maxCoeff(), 1e-6);
  // The optimum is a stationary point of the ELBO in q.
  const double e = elbo(x.data, opt, x.params);
  SvgpState nudged = opt;
  nudged.m(0) += 1e-3;
  EXPECT_LT(elbo(x.data, nudged, x.params), e);
}

TEST(Elbo, SequentialPosteriorMatchesExactWhenZIsX) {
  std::mt19937_64 rng(197);
  const auto x = random_gp_instance(rng, 20);
  const KernelInputs X = x.data.inputs();
  SvgpState st = state_at(X, x.params, 0.25);
  SequentialPosterior seq(st, x.params);
  // Feed observations in two chunks.
  seq.add(X.topRows(7), x.data.residuals().head(7));
  seq.add(X.bottomRows(13), x.data.residuals().tail(13));
  EXPECT_EQ(seq.count(), 20);
  set_exact_q(st, x.data, x.params);
  const SvgpState s2 = seq.state();
  EXPECT_LT((s2.m - st.m).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LT((s2.S() - st.S()).cwiseAbs().maxCoeff(), 1e-6);
}

// Training ---------------------------------------------------------------------------

TEST(FitSvgp, SmoothedTraceNonDecreasing) {
  std::mt19937_64 rng(199);
  const auto x = random_gp_instance(rng, 200, 0.8);
  SvgpConfig cfg;
  cfg.inducing = 20;
  cfg.batch = 200;
  cfg.iters = 300;
  cfg.seed = 3;
  const auto fit = fit_svgp(x.data, cfg);
  ASSERT_EQ(fit.elbo_trace.size(), 300u);
  constexpr int w = 50;
  double prev = -std::numeric_limits<double>::infinity();
  for (std::size_t s = 0; s + w <= fit.elbo_trace.size(); s += w) {
    double mean = 0;
    for (std::size_t k = s; k < s + w; ++k)
      mean += fit.elbo_trace[k] / w;
    EXPECT_GE(mean, prev - 1e-3);
    prev = mean;
  }
}

TEST(FitSvgp, ZeroResidualsShrinkNoise) {
  std::mt19937_64 rng(211);
  auto x = random_gp_instance(rng, 60);
  x.data.y = x.data.f;
  SvgpConfig cfg;
  cfg.inducing = 60; // M < N leaves Nystrom variance the noise would absorb
  cfg.batch = 60;
  cfg.iters = 600;
  cfg.lr = 0.05;
  cfg.natgrad_step = 1.0;
  cfg.init_noise_var = 1.0;
  cfg.learn_hyper = false;
  cfg.learn_inducing = false;
  const auto fit = fit_svgp(x.data, cfg);
  EXPECT_LT(fit.state.noise_var, 1e-2);
  const auto pm = predict_marginals(x.data.inputs(), fit.state, fit.params);
  EXPECT_LT(pm.mean.cwiseAbs().maxCoeff(), 1e-2);
}

TEST(FitSvgp, DeterministicAndMinibatched) {
  std::mt19937_64 rng(223);
  const auto x = random_gp_instance(rng, 80);
  SvgpConfig cfg;
  cfg.inducing = 10;
  cfg.batch = 16;
  cfg.iters = 30;
  cfg.seed = 9;
  const auto a = fit_svgp(x.data, cfg), b = fit_svgp(x.data, cfg);
  EXPECT_EQ(a.elbo_trace, b.elbo_trace);
  EXPECT_EQ(a.state.m, b.state.m);
  cfg.seed = 10;
  EXPECT_NE(fit_svgp(x.data, cfg).elbo_trace, a.elbo_trace);
}

TEST(FitSvgp, RejectsTooManyInducingPoints) {
  std::mt19937_64 rng(227);
  const auto x = random_gp_instance(rng, 5);
  SvgpConfig cfg;
  cfg.inducing = 6;
  EXPECT_THROW(fit_svgp(x.data, cfg), Error);
}

// Prediction -------------------------------------------------------------------------

TEST(Predict, ReproducesInducingPosterior) {
  std::mt19937_64 rng(229);
  const auto x = random_gp_instance(rng, 8);
  const KernelInputs Z = x.data.inputs();
  const SvgpState st = random_state(rng, Z, x.params);
  const auto g = predict_posterior(Z, st, x.params);
  EXPECT_LT((g.mean - st.m).cwiseAbs().maxCoeff(), 1e-7);
  EXPECT_LT((g.cov - st.S()).cwiseAbs().maxCoeff(), 1e-6);
  const auto d = predict_marginals(Z, st, x.params);
  EXPECT_LT((d.var - g.cov.diagonal()).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Predict, FarPointsRevertToPrior) {
  std::mt19937_64 rng(233);
  const auto x = random_gp_instance(rng, 8);
  const KernelInputs Z = x.data.inputs();
  const SvgpState st = random_state(rng, Z, x.params);
  KernelInputs far = first_rows(Z, 3);
  far.col(kTime).array() += 1e6;
  const auto g = predict_posterior(far, st, x.params);
  EXPECT_LT(g.mean.cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((g.cov - gram(far, x.params, st.jitter)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Predict, MatchesExactPosteriorAtOptimum) {
  std::mt19937_64 rng(239);
  const auto x = random_gp_instance(rng, 30);
  const KernelInputs X = x.data.inputs();
  const auto y = random_gp_instance(rng, 6);
  const KernelInputs Xs = y.data.inputs();
  SvgpState st = state_at(X, x.params, 0.2);
  set_exact_q(st, x.data, x.params);
  const auto sparse = predict_posterior(Xs, st, x.params);
  const auto exact = exact_posterior(x.data, x.params, st.noise_var, st.jitter, Xs);
  EXPECT_LT((sparse.mean - exact.mean).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LT((sparse.cov - exact.cov).cwiseAbs().maxCoeff(), 1e-6);
}

// Correction -------------------------------------------------------------------------

TEST(Bias, HandValues) {
  MultiResDataset d;
  d.resolutions = {{1, 1}};
  for (int t = 0; t < 3; ++t)
    d.coords.push_back({0, t, 1, 1, {40, -89}});
  d.f = Eigen::Vector3d(5, 5, 5);
  d.y = d.f;
  EXPECT_EQ(estimate_cluster_bias(d).at(1, 0), 0.0);
  d.y = Eigen::Vector3d(6, 6, 9);
  EXPECT_DOUBLE_EQ(estimate_cluster_bias(d).at(1, 0), 2.0);
  d.y.array() += 1.25;
  EXPECT_DOUBLE_EQ(estimate_cluster_bias(d).at(1, 0), 3.25);
}

TEST(Bias, EmptyClusterRejected) {
  MultiResDataset d;
  d.resolutions = {{2, 1}};
  d.coords.push_back({0, 0, 2, 1, {40, -89}});
  d.y = d.f = Eigen::VectorXd::Zero(1);
  try {
    estimate_cluster_bias(d);
    FAIL();
  } catch (const Error &e) {
    EXPECT_EQ(e.code(), Errc::empty_cluster);
  }
}

TEST(Correct, IdentityAndWidthScaling) {
  const Eigen::VectorXd f = Eigen::Vector3d(1.0, 2.0, 3.0);
  Marginals post{Eigen::VectorXd::Zero(3), Eigen::Vector3d(0.1, 0.2, 0.3)};
  const auto out = correct_predictions(f, Eigen::VectorXd::Zero(3), post, 0.05);
  for (int k = 0; k < 3; ++k) {
    const auto &o = out[static_cast<std::size_t>(k)];
    EXPECT_DOUBLE_EQ(o.mean, f(k));
    const double w1 = o.intervals[0].hi - o.intervals[0].lo, w2 = o.intervals[1].hi - o.intervals[1].lo;
    EXPECT_NEAR(w2, 2 * w1, 1e-14);
    EXPECT_NEAR(w1, 2 * std::sqrt(post.var(k) + 0.05), 1e-14);
  }
  post.mean = Eigen::Vector3d(0.5, -0.5, 0.0);
  const auto shifted = correct_predictions(f, Eigen::Vector3d(1, 1, 1), post, 0.05);
  EXPECT_DOUBLE_EQ(shifted[0].mean, 2.5);
  EXPECT_DOUBLE_EQ(shifted[1].mean, 2.5);
}

TEST(Serialization, StateRoundTripAndCsvHeader) {
  std::mt19937_64 rng(241);
  const auto x = random_gp_instance(rng, 4);
  SvgpState st = random_state(rng, x.data.inputs(), x.params);
  st.seed = 77;
  const nlohmann::json j = st;
  const auto back = nlohmann::json::parse(j.dump()).get<SvgpState>();
  EXPECT_EQ(back.Z, st.Z);
  EXPECT_EQ(back.m, st.m);
  EXPECT_EQ(back.L, st.L);
  EXPECT_EQ(back.noise_var, st.noise_var);
  EXPECT_EQ(back.seed, 77u);

  std::ostringstream os;
  const CorrectedRow row{20, 4, 3, 11, 7.0, 6.5, 6.9, {6.0, 7.8}, {5.1, 8.7}};
  write_corrected_csv(os, std::span<const CorrectedRow>(&row, 1));
  EXPECT_EQ(os.str(), "kappa,eta,i,t,y_true,f_stdr,f_corrected,ci1_lo,ci1_hi,ci2_lo,ci2_hi\n"
                      "20,4,3,11,7,6.5,6.9000000000000004,6,7.7999999999999998,5.0999999999999996,"
                      "8.6999999999999993\n");
}
