#include "prevmap/bessel.hpp"

#include <cmath>
#include <limits>

#include "prevmap/errors.hpp"

namespace prevmap {

namespace {

constexpr long double kEuler = 0.57721566490153286060651209008240243L;
constexpr long double kPi = 3.14159265358979323846264338327950288L;

// Ascending series for K0 and K1 (Abramowitz & Stegun 9.6.10-9.6.13).
// Converges for all x; cancellation only becomes a problem well above the
// x = 2 handover point.
K0K1 series_k0k1(long double x) {
  const long double q = 0.25L * x * x;
  const long double lg = std::log(0.5L * x);

  long double t = 1.0L, i0 = 1.0L, s0 = 0.0L, hk = 0.0L;
  for (int k = 1; k < 200; ++k) {
    t *= q / (static_cast<long double>(k) * k);
    hk += 1.0L / k;
    i0 += t;
    s0 += t * hk;
    if (t < 1e-20L * i0) break;
  }
  const long double k0 = -(lg + kEuler) * i0 + s0;

  long double s = 1.0L, i1s = 1.0L;
  long double hk1 = 1.0L;  // H_{k+1}
  long double acc = -2.0L * kEuler + 1.0L;  // k = 0 term of psi(k+1)+psi(k+2)
  hk = 0.0L;
  for (int k = 1; k < 200; ++k) {
    s *= q / (static_cast<long double>(k) * (k + 1));
    hk += 1.0L / k;
    hk1 += 1.0L / (k + 1);
    i1s += s;
    acc += s * (-2.0L * kEuler + hk + hk1);
    if (s < 1e-20L * i1s) break;
  }
  const long double i1 = 0.5L * x * i1s;
  const long double k1 = 1.0L / x + lg * i1 - 0.25L * x * acc;
  return {static_cast<double>(k0), static_cast<double>(k1)};
}

// Steed/Thompson-Barnett CF2 evaluation of K_mu, K_{mu+1} at mu = 0.
K0K1 cf2_k0k1(long double x) {
  const long double eps = 1e-19L;
  const long double a1 = 0.25L;
  long double b = 2.0L * (1.0L + x);
  long double d = 1.0L / b;
  long double h = d, delh = d;
  long double q1 = 0.0L, q2 = 1.0L;
  long double q = a1, c = a1, a = -a1;
  long double s = 1.0L + q * delh;
  for (int i = 2; i < 20000; ++i) {
    a -= 2 * (i - 1);
    c = -a * c / i;
    const long double qnew = (q1 - b * q2) / a;
    q1 = q2;
    q2 = qnew;
    q += c * qnew;
    b += 2.0L;
    d = 1.0L / (b + a * d);
    delh = (b * d - 1.0L) * delh;
    h += delh;
    const long double dels = q * delh;
    s += dels;
    if (std::abs(dels / s) < eps) break;
  }
  h = a1 * h;
  const long double k0 = std::sqrt(kPi / (2.0L * x)) * std::exp(-x) / s;
  const long double k1 = k0 * (x + 0.5L - h) / x;
  return {static_cast<double>(k0), static_cast<double>(k1)};
}

}  // namespace

K0K1 bessel_k0k1(double x) {
  if (std::isnan(x) || x < 0)
    throw DomainError("bessel K defined for x >= 0 only");
  if (x == 0) {
    const double inf = std::numeric_limits<double>::infinity();
    return {inf, inf};
  }
  return x < 2.0 ? series_k0k1(x) : cf2_k0k1(x);
}

double bessel_k0(double x) { return bessel_k0k1(x).k0; }
double bessel_k1(double x) { return bessel_k0k1(x).k1; }

}  // namespace prevmap
