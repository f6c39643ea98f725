#pragma once

#include <cmath>
#include <numbers>

namespace raymap::detail {

// Past this point I_0 and I_1 are evaluated through the large-argument expansion,
// which is accurate to double precision here and never overflows.
inline constexpr double kBesselAsymptoticFrom = 400.0;

// sum_n (-1)^n a_n(nu) / k^n, a_n(nu) = prod_{m=1..n} (4 nu^2 - (2m-1)^2) / (n! 8^n)
inline double bessel_i_asymptotic_series(int nu, double k) {
  const double mu = 4.0 * nu * nu;
  double term = 1.0;
  double sum = 1.0;
  for (int n = 1; n <= 12; ++n) {
    const double odd = 2.0 * n - 1.0;
    term *= -(mu - odd * odd) / (n * 8.0 * k);
    sum += term;
    if (std::abs(term) < 1e-17 * std::abs(sum)) break;
  }
  return sum;
}

/// log I_0(k) for k >= 0.
inline double log_bessel_i0(double k) {
  if (k < kBesselAsymptoticFrom) return std::log(std::cyl_bessel_i(0.0, k));
  return k - 0.5 * std::log(2.0 * std::numbers::pi * k) +
         std::log(bessel_i_asymptotic_series(0, k));
}

/// A(k) = I_1(k) / I_0(k) = d/dk log I_0(k).
inline double bessel_ratio(double k) {
  if (k < 1e-12) return 0.5 * k;
  if (k < kBesselAsymptoticFrom) return std::cyl_bessel_i(1.0, k) / std::cyl_bessel_i(0.0, k);
  return bessel_i_asymptotic_series(1, k) / bessel_i_asymptotic_series(0, k);
}

/// dA/dk = 1 - A/k - A^2.
inline double bessel_ratio_derivative(double k) {
  if (k < 1e-6) return 0.5 - 3.0 * k * k / 16.0;
  const double a = bessel_ratio(k);
  return 1.0 - a / k - a * a;
}

}  // namespace raymap::detail
