#pragma once

#include <Eigen/Dense>
#include <variant>

#include "prevmap/errors.hpp"

namespace prevmap {

/// Matern covariance with smoothness fixed at nu = 1:
///   k(d) = sigma2 * u * K1(u),  u = sqrt(2) d / rho,  k(0) = sigma2.
struct MaternKernel {
  double rho = 1.0;
  double sigma2 = 1.0;

  void validate() const {
    if (!(rho > 0) || !(sigma2 > 0))
      throw ValidationError("Matern kernel requires rho > 0 and sigma2 > 0");
  }
  double operator()(double d) const;
  /// d k(d) / d log(rho) = sigma2 * u^2 * K0(u); zero at d = 0.
  double d_dlogrho(double d) const;
};

/// Squared exponential with fixed unit variance: k(d) = exp(-d^2/(2 kappa^2)).
struct SquaredExpKernel {
  double kappa = 1.0;

  void validate() const {
    if (!(kappa > 0)) throw ValidationError("kernel scale kappa must be > 0");
  }
  double operator()(double d) const;
  /// d k(d) / d log(kappa) = k(d) * d^2 / kappa^2.
  double d_dlogkappa(double d) const;
};

using Kernel = std::variant<MaternKernel, SquaredExpKernel>;

inline double kernel_value(const Kernel& k, double d) {
  return std::visit([d](const auto& kk) { return kk(d); }, k);
}

/// Relative diagonal jitter applied to every Gram matrix (scaled by the
/// kernel's marginal variance) so Cholesky factorizations stay stable.
constexpr double kGramJitter = 1e-8;

/// Gram matrix over row-vector locations with jitter on the diagonal.
template <typename K>
Eigen::MatrixXd gram_matrix(const K& kernel, const Eigen::MatrixXd& locations,
                            double jitter) {
  const Eigen::Index n = locations.rows();
  Eigen::MatrixXd g(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    g(i, i) = kernel(0.0) + jitter;
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double d = (locations.row(i) - locations.row(j)).norm();
      g(i, j) = g(j, i) = kernel(d);
    }
  }
  return g;
}

/// Cross-covariances between prediction points and training locations. When a
/// prediction point coincides exactly with a training location the jitter is
/// included, which makes the conditional mean interpolate the fitted values.
template <typename K>
Eigen::MatrixXd cross_gram(const K& kernel, const Eigen::MatrixXd& points,
                           const Eigen::MatrixXd& locations, double jitter) {
  Eigen::MatrixXd g(points.rows(), locations.rows());
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    for (Eigen::Index j = 0; j < locations.rows(); ++j) {
      const double d = (points.row(i) - locations.row(j)).norm();
      g(i, j) = kernel(d) + (d == 0.0 ? jitter : 0.0);
    }
  return g;
}

}  // namespace prevmap
