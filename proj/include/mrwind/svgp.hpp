#pragma once

// Multi-resolution kriging: sparse variational GP over STDR residuals, with an
// exact-GP path for small problems.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "mrwind/error.hpp"
#include "mrwind/kernel.hpp"
#include "mrwind/linalg.hpp"
#include "mrwind/quadrature.hpp"

namespace mrwind {

struct Resolution {
  int kappa = 1;
  int eta = 1;
  friend auto operator<=>(const Resolution &, const Resolution &) = default;
};

struct MultiResDataset {
  std::vector<Coord> coords;
  Eigen::VectorXd y; // truths
  Eigen::VectorXd f; // deterministic predictions
  Eigen::VectorXd c; // cluster bias per sample; empty means zero
  std::vector<Resolution> resolutions;
  double K_max = 1.0; // farm count
  double T_max = 1.0; // raw horizon

  std::size_t size() const { return coords.size(); }
  KernelInputs inputs() const { return to_inputs(coords); }

  Eigen::VectorXd residuals() const {
    Eigen::VectorXd r = y - f;
    if (c.size() != 0)
      r -= c;
    return r;
  }

  void validate() const {
    const auto n = static_cast<Eigen::Index>(coords.size());
    if (y.size() != n || f.size() != n || (c.size() != 0 && c.size() != n))
      throw Error(Errc::config, "dataset arrays disagree in length");
    if (!resolutions.empty())
      for (const Coord &x : coords)
        if (std::find(resolutions.begin(), resolutions.end(), Resolution{x.kappa, x.eta}) ==
            resolutions.end())
          throw Error(Errc::invalid_resolution, "coord resolution (" + std::to_string(x.kappa) +
                                                    "," + std::to_string(x.eta) +
                                                    ") is not registered");
  }

  MultiResDataset subset(std::span<const int> idx) const {
    MultiResDataset out;
    out.resolutions = resolutions;
    out.K_max = K_max;
    out.T_max = T_max;
    const auto n = static_cast<Eigen::Index>(idx.size());
    out.y.resize(n);
    out.f.resize(n);
    if (c.size() != 0)
      out.c.resize(n);
    for (Eigen::Index k = 0; k < n; ++k) {
      const int s = idx[static_cast<std::size_t>(k)];
      out.coords.push_back(coords[static_cast<std::size_t>(s)]);
      out.y(k) = y(s);
      out.f(k) = f(s);
      if (c.size() != 0)
        out.c(k) = c(s);
    }
    return out;
  }
};

struct SvgpState {
  KernelInputs Z;      // M inducing inputs
  Eigen::VectorXd m;   // q(u) mean
  Eigen::MatrixXd L;   // q(u) covariance factor, S = L L^T
  double noise_var = 1.0;
  double jitter = 1e-6;
  std::uint64_t seed = 0;

  Eigen::Index M() const { return Z.rows(); }
  Eigen::MatrixXd S() const { return L * L.transpose(); }

  void validate() const {
    if (M() < 1 || m.size() != M() || L.rows() != M() || L.cols() != M())
      throw Error(Errc::config, "inconsistent variational state dimensions");
    if ((L.diagonal().array() <= 0.0).any())
      throw Error(Errc::not_positive_definite, "variational factor needs a positive diagonal");
    if (!(noise_var > 0.0))
      throw Error(Errc::config, "noise variance must be positive");
  }
};

struct Gaussian {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

struct Marginals {
  Eigen::VectorXd mean;
  Eigen::VectorXd var;
};

// Exact GP ------------------------------------------------------------------------

namespace detail {

inline Eigen::LLT<Eigen::MatrixXd> exact_factor(const KernelInputs &X, const KernelParams &p,
                                                double noise_var, double jitter) {
  Eigen::MatrixXd K = gram(X, p, jitter);
  K.diagonal().array() += noise_var;
  Eigen::LLT<Eigen::MatrixXd> llt(K);
  if (llt.info() != Eigen::Success)
    throw Error(Errc::not_positive_definite,
                "K_XX + noise is not positive definite; raise the jitter or the noise variance");
  return llt;
}

} // namespace detail

/// log N(y - f - c | 0, K_XX + noise_var I), K_XX carrying the nugget jitter.
inline double exact_log_marginal(const MultiResDataset &data, const KernelParams &p,
                                 double noise_var, double jitter) {
  data.validate();
  const KernelInputs X = data.inputs();
  const auto llt = detail::exact_factor(X, p, noise_var, jitter);
  const Eigen::VectorXd r = data.residuals();
  const Eigen::VectorXd w = llt.matrixL().solve(r);
  const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  return -0.5 * w.squaredNorm() - 0.5 * logdet -
         0.5 * static_cast<double>(r.size()) * std::log(2.0 * std::numbers::pi);
}

/// Posterior of the latent residual process at X* given the dataset.
inline Gaussian exact_posterior(const MultiResDataset &data, const KernelParams &p, double noise_var,
                                double jitter, const KernelInputs &Xs) {
  data.validate();
  const KernelInputs X = data.inputs();
  const auto llt = detail::exact_factor(X, p, noise_var, jitter);
  const Eigen::MatrixXd Ksx = gram(Xs, X, p, jitter);
  Gaussian g;
  g.mean = Ksx * llt.solve(data.residuals());
  const Eigen::MatrixXd W = llt.matrixL().solve(Ksx.transpose());
  g.cov = gram(Xs, p, jitter) - W.transpose() * W;
  g.cov = 0.5 * (g.cov + g.cov.transpose()).eval();
  return g;
}

// Variational pieces ------------------------------------------------------------

/// K_ZZ with its factorization and inverse. Any escalated jitter is folded into Kzz.
struct InducingPrior {
  Eigen::MatrixXd Kzz;
  JitteredCholesky chol;
  Eigen::MatrixXd P; // Kzz^-1

  InducingPrior(const KernelInputs &Z, const KernelParams &p, double jitter)
      : Kzz(gram(Z, p, jitter)), chol(robust_cholesky(Kzz)) {
    Kzz.diagonal().array() += chol.extra_jitter;
    P = llt_inverse(chol.llt);
  }
};

namespace detail {

inline double kl_from_factor(const Eigen::VectorXd &m, const Eigen::MatrixXd &L,
                             const Eigen::LLT<Eigen::MatrixXd> &Kllt) {
  const auto Lk = Kllt.matrixL();
  const double logdet_k = 2.0 * Kllt.matrixLLT().diagonal().array().log().sum();
  const double logdet_s = 2.0 * L.diagonal().array().abs().log().sum();
  const double trace = Lk.solve(L).squaredNorm();
  const double maha = Lk.solve(m).squaredNorm();
  return 0.5 * (logdet_k - logdet_s - static_cast<double>(m.size()) + trace + maha);
}

} // namespace detail

/// KL(q(u) || p(u)) for q = N(m, L L^T), p = N(0, Kzz).
inline double kl_qu_pu(const SvgpState &state, const Eigen::MatrixXd &Kzz) {
  Eigen::LLT<Eigen::MatrixXd> llt(Kzz);
  if (llt.info() != Eigen::Success)
    throw Error(Errc::not_positive_definite, "K_ZZ is not positive definite");
  return std::max(0.0, detail::kl_from_factor(state.m, state.L, llt));
}

/// Per-point mean A m and variance k(x,x) + a^T (S - Kzz) a of q(eps).
inline Marginals q_eps_marginal(const KernelInputs &X, const SvgpState &state,
                                const KernelParams &p) {
  const InducingPrior prior(state.Z, p, state.jitter);
  const Eigen::MatrixXd Kxz = gram(X, state.Z, p, state.jitter);
  const Eigen::MatrixXd A = Kxz * prior.P;
  Marginals q;
  q.mean = A * state.m;
  const Eigen::MatrixXd AL = A * state.L;
  q.var = gram_diag(X, p, state.jitter) + AL.rowwise().squaredNorm() -
          (A.array() * Kxz.array()).rowwise().sum().matrix();
  return q;
}

struct EllTerms {
  double value = 0.0;
  double d_mean = 0.0;  // d/d q_mean
  double d_var = 0.0;   // d/d q_var
  double d_noise = 0.0; // d/d noise_var
};

/// E_q[log N(r | eps, noise_var)] for eps ~ N(q_mean, q_var) and its
/// derivatives, all by Gauss-Hermite quadrature.
inline EllTerms expected_log_lik_terms(double r, double q_mean, double q_var, double noise_var,
                                       const GaussHermite &gh) {
  const double log_norm = -0.5 * std::log(2.0 * std::numbers::pi * noise_var);
  EllTerms t;
  double e1 = 0.0, e2 = 0.0; // E[(r - eps)], E[(r - eps)^2]
  const double s = std::sqrt(2.0 * std::max(q_var, 0.0));
  for (Eigen::Index k = 0; k < gh.nodes.size(); ++k) {
    const double d = r - (q_mean + s * gh.nodes(k));
    e1 += gh.weights(k) * d;
    e2 += gh.weights(k) * d * d;
  }
  const double norm = std::sqrt(std::numbers::pi);
  e1 /= norm;
  e2 /= norm;
  t.value = log_norm - e2 / (2.0 * noise_var);
  t.d_mean = e1 / noise_var;
  t.d_var = -0.5 / noise_var;
  t.d_noise = -0.5 / noise_var + e2 / (2.0 * noise_var * noise_var);
  return t;
}

inline double expected_log_lik(double y, double f, double c, double q_mean, double q_var,
                               double noise_var, int quad_order = 20) {
  if (!(noise_var > 0.0))
    throw Error(Errc::config, "noise variance must be positive");
  const GaussHermite gh(quad_order);
  return expected_log_lik_terms(y - f - c, q_mean, q_var, noise_var, gh).value;
}

struct ElboEval {
  double elbo = 0.0;
  double ell = 0.0; // scaled expected log-likelihood sum
  double kl = 0.0;
  // Gradients of the ELBO, filled on request.
  KernelParamGrad d_log_params = KernelParamGrad::Zero();
  double d_log_noise = 0.0;
  Eigen::MatrixXd d_Z;
  // Natural-parameter targets of q(u) implied by this batch.
  Eigen::MatrixXd target_precision;
  Eigen::VectorXd target_linear;
};

namespace detail {

inline ElboEval evaluate_elbo(const KernelInputs &X, const Eigen::VectorXd &r,
                              const SvgpState &st, const KernelParams &p, double scale,
                              const GaussHermite &gh, const InducingPrior &prior, bool gradients) {
  const Eigen::Index B = X.rows(), M = st.M();
  const Eigen::MatrixXd Kxz = gram(X, st.Z, p, st.jitter);
  const Eigen::MatrixXd A = Kxz * prior.P;
  const Eigen::MatrixXd S = st.S();
  const Eigen::MatrixXd AS = A * S;
  const Eigen::VectorXd mu = A * st.m;
  const Eigen::VectorXd v = gram_diag(X, p, st.jitter) + (AS.array() * A.array()).rowwise().sum().matrix() -
                            (A.array() * Kxz.array()).rowwise().sum().matrix();

  ElboEval out;
  Eigen::VectorXd g_mu(B), g_v(B), g_noise(B);
  for (Eigen::Index n = 0; n < B; ++n) {
    const EllTerms t = expected_log_lik_terms(r(n), mu(n), v(n), st.noise_var, gh);
    out.ell += t.value;
    g_mu(n) = t.d_mean;
    g_v(n) = t.d_var;
    g_noise(n) = t.d_noise;
  }
  out.ell *= scale;
  out.kl = std::max(0.0, kl_from_factor(st.m, st.L, prior.chol.llt));
  out.elbo = out.ell - out.kl;
  if (!gradients)
    return out;

  const Eigen::MatrixXd AtGv = A.transpose() * g_v.asDiagonal();
  out.target_precision = prior.P - 2.0 * scale * (AtGv * A);
  out.target_precision = 0.5 * (out.target_precision + out.target_precision.transpose()).eval();
  out.target_linear = scale * (A.transpose() * (g_mu - 2.0 * g_v.cwiseProduct(mu)));

  // dELBO/dA, then through A = Kxz P.
  const Eigen::MatrixXd G_A =
      scale * (g_mu * st.m.transpose() + 2.0 * g_v.asDiagonal() * (AS - Kxz));
  const Eigen::MatrixXd G_A_P = G_A * prior.P;
  const Eigen::MatrixXd &G_Kxz = G_A_P;
  const Eigen::MatrixXd Pm = prior.P * st.m;
  const Eigen::MatrixXd G_Kzz = -scale * (AtGv * A) - A.transpose() * G_A_P -
                                0.5 * (prior.P - prior.P * S * prior.P - Pm * Pm.transpose());
  const Eigen::VectorXd G_kxx = scale * g_v;

  out.d_log_noise = scale * st.noise_var * g_noise.sum();
  out.d_Z = Eigen::MatrixXd::Zero(M, 5);
  KernelParamGrad dl;
  KernelInput dz;
  for (Eigen::Index a = 0; a < B; ++a) {
    for (Eigen::Index b = 0; b < M; ++b) {
      kernel_with_grad(X.row(a), st.Z.row(b), p, &dl, &dz);
      out.d_log_params += G_Kxz(a, b) * dl;
      out.d_Z.row(b) += G_Kxz(a, b) * dz;
    }
    kernel_with_grad(X.row(a), X.row(a), p, &dl, nullptr);
    out.d_log_params += G_kxx(a) * dl;
  }
  for (Eigen::Index a = 0; a < M; ++a)
    for (Eigen::Index b = 0; b < M; ++b) {
      kernel_with_grad(st.Z.row(a), st.Z.row(b), p, &dl, &dz);
      out.d_log_params += G_Kzz(a, b) * dl;
      out.d_Z.row(b) += (G_Kzz(a, b) + G_Kzz(b, a)) * dz;
    }
  return out;
}

} // namespace detail

/// scale * sum of expected log-likelihoods over the batch minus KL.
inline double elbo(const MultiResDataset &batch, const SvgpState &state, const KernelParams &p,
                   double scale = 1.0, int quad_order = 20) {
  if (batch.size() == 0)
    throw Error(Errc::config, "ELBO needs a non-empty batch");
  const InducingPrior prior(state.Z, p, state.jitter);
  const GaussHermite gh(quad_order);
  return detail::evaluate_elbo(batch.inputs(), batch.residuals(), state, p, scale, gh, prior, false)
      .elbo;
}

/// Gradient-carrying ELBO evaluation, exposed for checks.
inline ElboEval elbo_with_gradients(const MultiResDataset &batch, const SvgpState &state,
                                    const KernelParams &p, double scale = 1.0,
                                    int quad_order = 20) {
  const InducingPrior prior(state.Z, p, state.jitter);
  const GaussHermite gh(quad_order);
  return detail::evaluate_elbo(batch.inputs(), batch.residuals(), state, p, scale, gh, prior, true);
}

/// One natural-gradient step of size rho on q(u) toward the batch targets.
/// rho = 1 with the full batch lands on the optimal Gaussian q.
inline void natural_gradient_step(SvgpState &st, const ElboEval &eval, double rho) {
  const Eigen::MatrixXd Linv = st.L.triangularView<Eigen::Lower>().solve(
      Eigen::MatrixXd::Identity(st.M(), st.M()));
  const Eigen::MatrixXd Sinv = Linv.transpose() * Linv;
  Eigen::MatrixXd precision = (1.0 - rho) * Sinv + rho * eval.target_precision;
  precision = 0.5 * (precision + precision.transpose()).eval();
  const Eigen::VectorXd linear = (1.0 - rho) * (Sinv * st.m) + rho * eval.target_linear;
  const JitteredCholesky pc = robust_cholesky(precision);
  Eigen::MatrixXd S = llt_inverse(pc.llt);
  st.m = pc.llt.solve(linear);
  const JitteredCholesky sc = robust_cholesky(S);
  st.L = sc.llt.matrixL();
}

/// q(u) at the exact-GP posterior of u = eps(Z), for a Gaussian likelihood.
inline void set_exact_q(SvgpState &st, const MultiResDataset &data, const KernelParams &p) {
  const Gaussian post = exact_posterior(data, p, st.noise_var, st.jitter, st.Z);
  st.m = post.mean;
  st.L = robust_cholesky(post.cov).llt.matrixL();
}

// Training ------------------------------------------------------------------------

struct SvgpConfig {
  int inducing = 100;
  int batch = 1000;
  int iters = 1000;
  double lr = 1e-2;           // Adam step on log-precisions, log-noise and Z
  double natgrad_step = 0.1;  // rho
  int quad_order = 20;
  std::uint64_t seed = 0;
  bool learn_hyper = true;
  bool learn_noise = true;
  bool learn_inducing = true;
  std::optional<double> init_noise_var;
  std::optional<KernelParams> init_params;
  std::optional<KernelInputs> init_inducing;
};

struct SvgpFit {
  SvgpState state;
  KernelParams params;
  std::vector<double> elbo_trace;
};

namespace detail {

struct Adam {
  Eigen::VectorXd m1, m2;
  double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  int t = 0;

  explicit Adam(Eigen::Index n) : m1(Eigen::VectorXd::Zero(n)), m2(Eigen::VectorXd::Zero(n)) {}

  /// Ascent step on x given gradient g.
  void ascend(Eigen::VectorXd &x, const Eigen::VectorXd &g, double lr) {
    ++t;
    m1 = b1 * m1 + (1 - b1) * g;
    m2 = b2 * m2 + (1 - b2) * g.cwiseAbs2();
    const double c1 = 1 - std::pow(b1, t), c2 = 1 - std::pow(b2, t);
    x.array() += lr * (m1.array() / c1) / ((m2.array() / c2).sqrt() + eps);
  }
};

inline constexpr double kMinLogNoise = -23.0; // ~1e-10

} // namespace detail

inline SvgpFit fit_svgp(const MultiResDataset &data, const SvgpConfig &cfg) {
  data.validate();
  const auto N = static_cast<Eigen::Index>(data.size());
  if (N == 0)
    throw Error(Errc::config, "empty training set");
  if (cfg.iters < 0 || cfg.batch < 1 || cfg.quad_order < 1)
    throw Error(Errc::config, "invalid SVGP settings");
  const KernelInputs X = data.inputs();
  const Eigen::VectorXd r = data.residuals();
  std::mt19937_64 rng(cfg.seed);

  SvgpFit fit;
  fit.params = cfg.init_params ? *cfg.init_params : initial_kernel_params(X, data.K_max, data.T_max);
  if (!fit.params.valid())
    throw Error(Errc::config, "initial kernel precisions must be positive");
  SvgpState &st = fit.state;
  st.seed = cfg.seed;

  if (cfg.init_inducing) {
    st.Z = *cfg.init_inducing;
  } else {
    if (cfg.inducing < 1 || cfg.inducing > N)
      throw Error(Errc::config, "need 1 <= M <= N inducing points");
    std::vector<int> idx(static_cast<std::size_t>(N));
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    st.Z.resize(cfg.inducing, 5);
    for (int k = 0; k < cfg.inducing; ++k)
      st.Z.row(k) = X.row(idx[static_cast<std::size_t>(k)]);
  }
  if (st.Z.rows() < 1)
    throw Error(Errc::config, "need at least one inducing point");
  st.jitter = default_jitter(st.Z, fit.params);

  const double mean_r = r.mean();
  const double var_r = (r.array() - mean_r).square().mean();
  st.noise_var = cfg.init_noise_var ? *cfg.init_noise_var : std::max(0.1 * var_r, 1e-6);
  if (!(st.noise_var > 0.0))
    throw Error(Errc::config, "initial noise variance must be positive");
  {
    const InducingPrior prior(st.Z, fit.params, st.jitter);
    st.m = Eigen::VectorXd::Zero(st.M());
    st.L = prior.chol.llt.matrixL();
  }

  const Eigen::Index M = st.M();
  const Eigen::Index n_hyper = KernelParams::kLearnable;
  Eigen::VectorXd theta(n_hyper + 1 + M * 5);
  detail::Adam adam(theta.size());

  const Eigen::Index B = std::min<Eigen::Index>(cfg.batch, N);
  const double scale = static_cast<double>(N) / static_cast<double>(B);
  const bool full_batch = B == N;
  std::vector<int> order(static_cast<std::size_t>(N));
  std::iota(order.begin(), order.end(), 0);
  const GaussHermite gh(cfg.quad_order);
  KernelInputs Xb = X;
  Eigen::VectorXd rb = r;

  fit.elbo_trace.reserve(static_cast<std::size_t>(cfg.iters));
  for (int it = 0; it < cfg.iters; ++it) {
    if (!full_batch) {
      // Partial Fisher-Yates: the first B entries form a uniform sample.
      for (Eigen::Index k = 0; k < B; ++k) {
        std::uniform_int_distribution<Eigen::Index> pick(k, N - 1);
        std::swap(order[static_cast<std::size_t>(k)], order[static_cast<std::size_t>(pick(rng))]);
      }
      Xb.resize(B, 5);
      rb.resize(B);
      for (Eigen::Index k = 0; k < B; ++k) {
        Xb.row(k) = X.row(order[static_cast<std::size_t>(k)]);
        rb(k) = r(order[static_cast<std::size_t>(k)]);
      }
    }
    const InducingPrior prior(st.Z, fit.params, st.jitter);
    const ElboEval ev = detail::evaluate_elbo(Xb, rb, st, fit.params, scale, gh, prior, true);
    if (!std::isfinite(ev.elbo))
      throw DivergedError(it, "ELBO became non-finite");
    fit.elbo_trace.push_back(ev.elbo);

    natural_gradient_step(st, ev, cfg.natgrad_step);

    theta.head(n_hyper) = fit.params.log_values();
    theta(n_hyper) = std::log(st.noise_var);
    for (Eigen::Index b = 0; b < M; ++b)
      theta.segment(n_hyper + 1 + b * 5, 5) = st.Z.row(b).transpose();
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(theta.size());
    if (cfg.learn_hyper)
      grad.head(n_hyper) = ev.d_log_params;
    if (cfg.learn_noise)
      grad(n_hyper) = ev.d_log_noise;
    if (cfg.learn_inducing)
      for (Eigen::Index b = 0; b < M; ++b)
        grad.segment(n_hyper + 1 + b * 5, 5) = ev.d_Z.row(b).transpose();
    if (!grad.allFinite())
      throw DivergedError(it, "non-finite ELBO gradient");
    if (!cfg.learn_hyper && !cfg.learn_noise && !cfg.learn_inducing)
      continue;
    adam.ascend(theta, grad, cfg.lr);
    fit.params.set_log_values(theta.head(n_hyper));
    st.noise_var = std::exp(std::max(theta(n_hyper), detail::kMinLogNoise));
    for (Eigen::Index b = 0; b < M; ++b)
      st.Z.row(b) = theta.segment(n_hyper + 1 + b * 5, 5).transpose();
  }
  return fit;
}

// Prediction ----------------------------------------------------------------------

/// Posterior of eps at X*: mean A* m, covariance A* S A*^T + K** - A* K_Z*.
inline Gaussian predict_posterior(const KernelInputs &Xs, const SvgpState &st,
                                  const KernelParams &p) {
  const InducingPrior prior(st.Z, p, st.jitter);
  const Eigen::MatrixXd Ksz = gram(Xs, st.Z, p, st.jitter);
  const Eigen::MatrixXd A = Ksz * prior.P;
  const Eigen::MatrixXd AL = A * st.L;
  Gaussian g;
  g.mean = A * st.m;
  g.cov = AL * AL.transpose() + gram(Xs, p, st.jitter) - A * Ksz.transpose();
  g.cov = 0.5 * (g.cov + g.cov.transpose()).eval();
  return g;
}

/// Diagonal of predict_posterior without forming the full covariance.
inline Marginals predict_marginals(const KernelInputs &Xs, const SvgpState &st,
                                   const KernelParams &p) {
  return q_eps_marginal(Xs, st, p);
}

/// Exact optimal q(u) for a Gaussian likelihood, accumulated one observation
/// at a time through the sufficient statistics sum k k^T and sum k r.
class SequentialPosterior {
public:
  SequentialPosterior(const SvgpState &st, const KernelParams &p)
      : state_(st), params_(p), prior_(st.Z, p, st.jitter),
        kk_(Eigen::MatrixXd::Zero(st.M(), st.M())), kr_(Eigen::VectorXd::Zero(st.M())) {}

  void add(const KernelInputs &X, const Eigen::VectorXd &r) {
    const Eigen::MatrixXd Kzx = gram(X, state_.Z, params_, state_.jitter).transpose();
    kk_.noalias() += Kzx * Kzx.transpose();
    kr_.noalias() += Kzx * r;
    count_ += X.rows();
  }

  Eigen::Index count() const { return count_; }

  /// State with q set to the optimum given everything added so far:
  /// S = Kzz Sigma^-1 Kzz, m = Kzz Sigma^-1 sum(k r) / noise, Sigma = Kzz + sum(k k^T) / noise.
  SvgpState state() const {
    SvgpState out = state_;
    const double s2 = state_.noise_var;
    Eigen::MatrixXd Sigma = prior_.Kzz + kk_ / s2;
    Sigma = 0.5 * (Sigma + Sigma.transpose()).eval();
    const JitteredCholesky sc = robust_cholesky(Sigma);
    out.m = prior_.Kzz * sc.llt.solve(kr_ / s2);
    const Eigen::MatrixXd W = sc.llt.matrixL().solve(prior_.Kzz);
    Eigen::MatrixXd S = W.transpose() * W;
    S = 0.5 * (S + S.transpose()).eval();
    out.L = robust_cholesky(S).llt.matrixL();
    return out;
  }

private:
  SvgpState state_;
  KernelParams params_;
  InducingPrior prior_;
  Eigen::MatrixXd kk_;
  Eigen::VectorXd kr_;
  Eigen::Index count_ = 0;
};

// Correction ----------------------------------------------------------------------

struct ClusterBias {
  std::map<std::pair<int, int>, double> values; // (kappa, cluster) -> c

  double at(int kappa, int cluster) const {
    const auto it = values.find({kappa, cluster});
    if (it == values.end())
      throw Error(Errc::empty_cluster, "no bias for cluster " + std::to_string(cluster) +
                                           " at kappa " + std::to_string(kappa));
    return it->second;
  }

  /// Bias vector aligned with the dataset coords.
  Eigen::VectorXd gather(const std::vector<Coord> &coords) const {
    Eigen::VectorXd c(static_cast<Eigen::Index>(coords.size()));
    for (std::size_t n = 0; n < coords.size(); ++n)
      c(static_cast<Eigen::Index>(n)) = at(coords[n].kappa, coords[n].cluster);
    return c;
  }
};

/// Signed mean residual y - f per (kappa, cluster). Every cluster 0..kappa-1 of
/// each kappa present in `data` must have at least one sample.
inline ClusterBias estimate_cluster_bias(const MultiResDataset &data) {
  data.validate();
  std::map<std::pair<int, int>, std::pair<double, int>> acc;
  std::map<int, bool> kappas;
  for (std::size_t n = 0; n < data.size(); ++n) {
    const Coord &x = data.coords[n];
    auto &a = acc[{x.kappa, x.cluster}];
    a.first += data.y(static_cast<Eigen::Index>(n)) - data.f(static_cast<Eigen::Index>(n));
    ++a.second;
    kappas[x.kappa] = true;
  }
  for (const Resolution &res : data.resolutions)
    kappas[res.kappa] = true;
  ClusterBias bias;
  for (const auto &[kappa, _] : kappas)
    for (int i = 0; i < kappa; ++i) {
      const auto it = acc.find({kappa, i});
      if (it == acc.end())
        throw Error(Errc::empty_cluster, "cluster " + std::to_string(i) + " at kappa " +
                                             std::to_string(kappa) + " has no residuals");
      bias.values[{kappa, i}] = it->second.first / it->second.second;
    }
  return bias;
}

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

struct CorrectedPrediction {
  double mean = 0.0;
  std::vector<Interval> intervals; // one per z level
};

/// f* + c + posterior mean, with half-widths z * sqrt(var + noise_var).
inline std::vector<CorrectedPrediction>
correct_predictions(const Eigen::VectorXd &f_star, const Eigen::VectorXd &bias,
                    const Marginals &posterior, double noise_var,
                    std::span<const double> z_levels = std::span<const double>()) {
  static constexpr double kDefaultLevels[] = {1.0, 2.0};
  if (z_levels.empty())
    z_levels = kDefaultLevels;
  const Eigen::Index n = f_star.size();
  if (posterior.mean.size() != n || posterior.var.size() != n || (bias.size() != 0 && bias.size() != n))
    throw Error(Errc::config, "posterior and predictions cover different coords");
  std::vector<CorrectedPrediction> out(static_cast<std::size_t>(n));
  for (Eigen::Index k = 0; k < n; ++k) {
    auto &o = out[static_cast<std::size_t>(k)];
    o.mean = f_star(k) + (bias.size() ? bias(k) : 0.0) + posterior.mean(k);
    const double sd = std::sqrt(std::max(posterior.var(k), 0.0) + noise_var);
    for (double z : z_levels)
      o.intervals.push_back({o.mean - z * sd, o.mean + z * sd});
  }
  return out;
}

// Serialization -------------------------------------------------------------------

inline void to_json(nlohmann::json &j, const SvgpState &st) {
  nlohmann::json Z = nlohmann::json::array();
  for (Eigen::Index b = 0; b < st.M(); ++b)
    Z.push_back({{"lat", st.Z(b, kLat)},
                 {"lon", st.Z(b, kLon)},
                 {"time", st.Z(b, kTime)},
                 {"kappa", st.Z(b, kKappa)},
                 {"eta", st.Z(b, kEta)}});
  std::vector<double> L(static_cast<std::size_t>(st.M() * st.M()));
  for (Eigen::Index a = 0; a < st.M(); ++a)
    for (Eigen::Index b = 0; b < st.M(); ++b)
      L[static_cast<std::size_t>(a * st.M() + b)] = st.L(a, b);
  j = {{"M", st.M()},
       {"Z", Z},
       {"m", std::vector<double>(st.m.data(), st.m.data() + st.m.size())},
       {"L", L},
       {"noise_var", st.noise_var},
       {"jitter", st.jitter},
       {"seed", st.seed}};
}

inline void from_json(const nlohmann::json &j, SvgpState &st) {
  const auto M = j.at("M").get<Eigen::Index>();
  const auto &Z = j.at("Z");
  const auto m = j.at("m").get<std::vector<double>>();
  const auto L = j.at("L").get<std::vector<double>>();
  if (M < 1 || static_cast<Eigen::Index>(Z.size()) != M || static_cast<Eigen::Index>(m.size()) != M ||
      static_cast<Eigen::Index>(L.size()) != M * M)
    throw Error(Errc::parse, "variational state dimensions disagree");
  st.Z.resize(M, 5);
  for (Eigen::Index b = 0; b < M; ++b) {
    const auto &z = Z[static_cast<std::size_t>(b)];
    st.Z.row(b) << z.at("lat").get<double>(), z.at("lon").get<double>(), z.at("time").get<double>(),
        z.at("kappa").get<double>(), z.at("eta").get<double>();
  }
  st.m = Eigen::Map<const Eigen::VectorXd>(m.data(), M);
  st.L.resize(M, M);
  for (Eigen::Index a = 0; a < M; ++a)
    for (Eigen::Index b = 0; b < M; ++b)
      st.L(a, b) = L[static_cast<std::size_t>(a * M + b)];
  st.noise_var = j.at("noise_var").get<double>();
  st.jitter = j.at("jitter").get<double>();
  st.seed = j.at("seed").get<std::uint64_t>();
  st.validate();
}

struct CorrectedRow {
  int kappa = 0, eta = 0, i = 0, t = 0;
  double y_true = 0.0, f_stdr = 0.0, f_corrected = 0.0;
  Interval ci1, ci2;
};

inline constexpr const char *kCorrectedCsvHeader =
    "kappa,eta,i,t,y_true,f_stdr,f_corrected,ci1_lo,ci1_hi,ci2_lo,ci2_hi";

inline void write_corrected_csv(std::ostream &os, std::span<const CorrectedRow> rows) {
  os << kCorrectedCsvHeader << '\n';
  char buf[512];
  for (const CorrectedRow &r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%d,%d,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                  r.kappa, r.eta, r.i, r.t, r.y_true, r.f_stdr, r.f_corrected, r.ci1.lo, r.ci1.hi,
                  r.ci2.lo, r.ci2.hi);
    os << buf;
  }
}

} // namespace mrwind
