#include "prevmap/kernels.hpp"

#include <cmath>

#include "prevmap/bessel.hpp"

namespace prevmap {

double MaternKernel::operator()(double d) const {
  if (std::isnan(d) || std::isinf(d) || d < 0)
    throw DomainError("Matern kernel requires a finite distance >= 0");
  if (d == 0.0) return sigma2;  // analytic limit of u*K1(u) as u -> 0 is 1
  const double u = std::sqrt(2.0) * d / rho;
  const double uk1 = u * bessel_k1(u);
  return sigma2 * (std::isfinite(uk1) ? uk1 : 0.0);
}

double MaternKernel::d_dlogrho(double d) const {
  if (d == 0.0) return 0.0;
  const double u = std::sqrt(2.0) * d / rho;
  const double v = u * u * bessel_k0(u);
  return sigma2 * (std::isfinite(v) ? v : 0.0);
}

double SquaredExpKernel::operator()(double d) const {
  if (std::isnan(d) || std::isinf(d) || d < 0)
    throw DomainError("squared exponential kernel requires a finite distance >= 0");
  const double z = d / kappa;
  return std::exp(-0.5 * z * z);
}

double SquaredExpKernel::d_dlogkappa(double d) const {
  const double z = d / kappa;
  return operator()(d) * z * z;
}

}  // namespace prevmap
