#pragma once

// Separable space x time x spatial-resolution x temporal-resolution kernel.

#include <array>
#include <cmath>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "mrwind/error.hpp"
#include "mrwind/geo.hpp"

namespace mrwind {

/// Kernel input rows: (lat, lon, recorded time, kappa, eta). Inducing inputs
/// use the same layout with every column relaxed to the reals.
using KernelInputs = Eigen::Matrix<double, Eigen::Dynamic, 5, Eigen::RowMajor>;
using KernelInput = Eigen::Matrix<double, 1, 5>;

enum KernelFeature : int { kLat = 0, kLon = 1, kTime = 2, kKappa = 3, kEta = 4 };

/// x = (i, t, kappa, eta) resolved against the cluster centroid of i.
struct Coord {
  int cluster = 0;
  int step = 0;
  int kappa = 1;
  int eta = 1;
  geo::LatLon location;

  /// Recorded time t * eta in raw units.
  double recorded_time() const { return static_cast<double>(step) * eta; }

  KernelInput input() const {
    KernelInput x;
    x << location.lat, location.lon, recorded_time(), static_cast<double>(kappa),
        static_cast<double>(eta);
    return x;
  }
};

inline KernelInputs to_inputs(const std::vector<Coord> &coords) {
  KernelInputs X(static_cast<Eigen::Index>(coords.size()), 5);
  for (std::size_t n = 0; n < coords.size(); ++n)
    X.row(static_cast<Eigen::Index>(n)) = coords[n].input();
  return X;
}

struct KernelParams {
  static constexpr int kLearnable = 6;

  double sigma_s = 1.0;  // spatial precision, 1/deg^2
  double sigma_t = 1e-2; // temporal precision, 1/raw-unit^2
  double sigma_k0 = 1e-2;
  double sigma_k1 = 1e-4;
  double sigma_e0 = 1e-2;
  double sigma_e1 = 1e-4;
  double K_max = 1.0; // farm count K
  double T_max = 1.0; // raw horizon T

  Eigen::Matrix<double, kLearnable, 1> log_values() const {
    Eigen::Matrix<double, kLearnable, 1> v;
    v << std::log(sigma_s), std::log(sigma_t), std::log(sigma_k0), std::log(sigma_k1),
        std::log(sigma_e0), std::log(sigma_e1);
    return v;
  }
  void set_log_values(const Eigen::Matrix<double, kLearnable, 1> &v) {
    sigma_s = std::exp(v(0));
    sigma_t = std::exp(v(1));
    sigma_k0 = std::exp(v(2));
    sigma_k1 = std::exp(v(3));
    sigma_e0 = std::exp(v(4));
    sigma_e1 = std::exp(v(5));
  }
  bool valid() const {
    for (double s : {sigma_s, sigma_t, sigma_k0, sigma_k1, sigma_e0, sigma_e1})
      if (!(s > 0.0) || !std::isfinite(s))
        return false;
    return true;
  }
};

using KernelParamGrad = Eigen::Matrix<double, KernelParams::kLearnable, 1>;

/// Resolution correlation exp(-s0 (a - b)^2) + exp(-s1 (a - M)^2) + exp(-s1 (b - M)^2).
inline double resolution_correlation(double a, double b, double s0, double s1, double max) {
  return std::exp(-s0 * (a - b) * (a - b)) + std::exp(-s1 * (a - max) * (a - max)) +
         std::exp(-s1 * (b - max) * (b - max));
}

template <typename A, typename B>
double kernel_eval(const Eigen::MatrixBase<A> &x, const Eigen::MatrixBase<B> &z,
                   const KernelParams &p) {
  const double dlat = x(kLat) - z(kLat), dlon = x(kLon) - z(kLon), dt = x(kTime) - z(kTime);
  const double u = std::exp(-p.sigma_s * (dlat * dlat + dlon * dlon) - p.sigma_t * dt * dt);
  return u * resolution_correlation(x(kKappa), z(kKappa), p.sigma_k0, p.sigma_k1, p.K_max) *
         resolution_correlation(x(kEta), z(kEta), p.sigma_e0, p.sigma_e1, p.T_max);
}

inline double kernel_eval(const Coord &a, const Coord &b, const KernelParams &p) {
  return kernel_eval(a.input(), b.input(), p);
}

/// Kernel value plus, optionally, its gradient with respect to the log of the
/// six learnable precisions and with respect to the second argument z.
template <typename A, typename B>
double kernel_with_grad(const Eigen::MatrixBase<A> &x, const Eigen::MatrixBase<B> &z,
                        const KernelParams &p, KernelParamGrad *dlog, KernelInput *dz) {
  const double dlat = x(kLat) - z(kLat), dlon = x(kLon) - z(kLon), dt = x(kTime) - z(kTime);
  const double ds2 = dlat * dlat + dlon * dlon;
  const double u = std::exp(-p.sigma_s * ds2 - p.sigma_t * dt * dt);

  const double ka = x(kKappa), kb = z(kKappa);
  const double k0 = std::exp(-p.sigma_k0 * (ka - kb) * (ka - kb));
  const double k1a = std::exp(-p.sigma_k1 * (ka - p.K_max) * (ka - p.K_max));
  const double k1b = std::exp(-p.sigma_k1 * (kb - p.K_max) * (kb - p.K_max));
  const double nu_s = k0 + k1a + k1b;

  const double ea = x(kEta), eb = z(kEta);
  const double e0 = std::exp(-p.sigma_e0 * (ea - eb) * (ea - eb));
  const double e1a = std::exp(-p.sigma_e1 * (ea - p.T_max) * (ea - p.T_max));
  const double e1b = std::exp(-p.sigma_e1 * (eb - p.T_max) * (eb - p.T_max));
  const double nu_t = e0 + e1a + e1b;

  const double k = u * nu_s * nu_t;
  if (dlog) {
    (*dlog)(0) = -p.sigma_s * ds2 * k;
    (*dlog)(1) = -p.sigma_t * dt * dt * k;
    (*dlog)(2) = u * nu_t * (-p.sigma_k0 * (ka - kb) * (ka - kb) * k0);
    (*dlog)(3) = u * nu_t *
                 (-p.sigma_k1 * ((ka - p.K_max) * (ka - p.K_max) * k1a +
                                 (kb - p.K_max) * (kb - p.K_max) * k1b));
    (*dlog)(4) = u * nu_s * (-p.sigma_e0 * (ea - eb) * (ea - eb) * e0);
    (*dlog)(5) = u * nu_s *
                 (-p.sigma_e1 * ((ea - p.T_max) * (ea - p.T_max) * e1a +
                                 (eb - p.T_max) * (eb - p.T_max) * e1b));
  }
  if (dz) {
    (*dz)(kLat) = 2.0 * p.sigma_s * dlat * k;
    (*dz)(kLon) = 2.0 * p.sigma_s * dlon * k;
    (*dz)(kTime) = 2.0 * p.sigma_t * dt * k;
    (*dz)(kKappa) = u * nu_t *
                    (2.0 * p.sigma_k0 * (ka - kb) * k0 - 2.0 * p.sigma_k1 * (kb - p.K_max) * k1b);
    (*dz)(kEta) = u * nu_s *
                  (2.0 * p.sigma_e0 * (ea - eb) * e0 - 2.0 * p.sigma_e1 * (eb - p.T_max) * e1b);
  }
  return k;
}

/// Pairwise kernel matrix. `jitter` is added wherever two inputs coincide
/// exactly (a nugget), so a self-gram gets jitter * I and cross-grams stay
/// consistent with it.
inline Eigen::MatrixXd gram(const KernelInputs &X, const KernelInputs &Xp, const KernelParams &p,
                            double jitter = 0.0) {
  Eigen::MatrixXd K(X.rows(), Xp.rows());
  for (Eigen::Index a = 0; a < X.rows(); ++a)
    for (Eigen::Index b = 0; b < Xp.rows(); ++b) {
      K(a, b) = kernel_eval(X.row(a), Xp.row(b), p);
      if (jitter != 0.0 && X.row(a) == Xp.row(b))
        K(a, b) += jitter;
    }
  return K;
}

/// Symmetric self-gram plus jitter * I.
inline Eigen::MatrixXd gram(const KernelInputs &X, const KernelParams &p, double jitter = 0.0) {
  const Eigen::Index n = X.rows();
  Eigen::MatrixXd K(n, n);
  for (Eigen::Index a = 0; a < n; ++a) {
    K(a, a) = kernel_eval(X.row(a), X.row(a), p) + jitter;
    for (Eigen::Index b = a + 1; b < n; ++b) {
      double v = kernel_eval(X.row(a), X.row(b), p);
      if (jitter != 0.0 && X.row(a) == X.row(b))
        v += jitter;
      K(a, b) = K(b, a) = v;
    }
  }
  return K;
}

inline Eigen::VectorXd gram_diag(const KernelInputs &X, const KernelParams &p, double jitter = 0.0) {
  Eigen::VectorXd d(X.rows());
  for (Eigen::Index a = 0; a < X.rows(); ++a)
    d(a) = kernel_eval(X.row(a), X.row(a), p) + jitter;
  return d;
}

/// 1e-6 times the mean prior variance over X.
inline double default_jitter(const KernelInputs &X, const KernelParams &p) {
  if (X.rows() == 0)
    return 1e-6;
  return 1e-6 * gram_diag(X, p).mean();
}

/// Data-scaled starting precisions.
inline KernelParams initial_kernel_params(const KernelInputs &X, double K_max, double T_max) {
  KernelParams p;
  p.K_max = K_max;
  p.T_max = T_max;
  auto var = [&](int col) {
    const double mean = X.col(col).mean();
    return (X.col(col).array() - mean).square().mean();
  };
  const double ls = std::max(0.5 * std::sqrt(var(kLat) + var(kLon)), 1e-3);
  const double lt = X.rows() > 0 ? std::max(2.0 * X.col(kEta).mean(), 1.0) : 1.0;
  const double lk = std::max(std::sqrt(var(kKappa)), 1.0);
  const double le = std::max(std::sqrt(var(kEta)), 1.0);
  p.sigma_s = 1.0 / (2.0 * ls * ls);
  p.sigma_t = 1.0 / (2.0 * lt * lt);
  p.sigma_k0 = 1.0 / (2.0 * lk * lk);
  p.sigma_k1 = 1.0 / (2.0 * std::max(K_max / 2.0, 1.0) * std::max(K_max / 2.0, 1.0));
  p.sigma_e0 = 1.0 / (2.0 * le * le);
  p.sigma_e1 = 1.0 / (2.0 * std::max(T_max / 2.0, 1.0) * std::max(T_max / 2.0, 1.0));
  return p;
}

inline void to_json(nlohmann::json &j, const KernelParams &p) {
  j = {{"sigma_s", p.sigma_s},   {"sigma_t", p.sigma_t},   {"sigma_k0", p.sigma_k0},
       {"sigma_k1", p.sigma_k1}, {"sigma_e0", p.sigma_e0}, {"sigma_e1", p.sigma_e1},
       {"K_max", p.K_max},       {"T_max", p.T_max}};
}

inline void from_json(const nlohmann::json &j, KernelParams &p) {
  p.sigma_s = j.at("sigma_s").get<double>();
  p.sigma_t = j.at("sigma_t").get<double>();
  p.sigma_k0 = j.at("sigma_k0").get<double>();
  p.sigma_k1 = j.at("sigma_k1").get<double>();
  p.sigma_e0 = j.at("sigma_e0").get<double>();
  p.sigma_e1 = j.at("sigma_e1").get<double>();
  p.K_max = j.at("K_max").get<double>();
  p.T_max = j.at("T_max").get<double>();
  if (!p.valid())
    throw Error(Errc::parse, "kernel precisions must be positive and finite");
}

} // namespace mrwind
