#pragma once

namespace prevmap {

/// Modified Bessel functions of the second kind, orders 0 and 1.
/// Ascending series below x = 2, Thompson-Barnett continued fraction above;
/// the continued fraction holds full double accuracy through the midrange
/// where the large-x asymptotic series bottoms out.
struct K0K1 {
  double k0;
  double k1;
};

K0K1 bessel_k0k1(double x);
double bessel_k0(double x);
double bessel_k1(double x);

}  // namespace prevmap
