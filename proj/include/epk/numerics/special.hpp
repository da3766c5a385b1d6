#pragma once

#include <cmath>
#include <numbers>

#include "epk/error.hpp"

namespace epk {

/// Error function. std::erf is accurate to a few ulp, well inside the 1e-7 budget the
/// persistence oracles need, and odd-symmetric.
inline double erf(double x) { return std::erf(x); }

/// Inverse error function on (-1, 1): Winitzki seed followed by Newton steps on erf
/// (or erfc near the tails, where 1 - |p| carries the information). |erf(erf_inv(p)) - p| is
/// at rounding level across [-0.999, 0.999].
inline double erf_inv(double p) {
  if (!(std::abs(p) < 1.0)) throw DomainError("erf_inv: argument must satisfy |p| < 1");
  if (p == 0.0) return 0.0;
  const double sign = p < 0 ? -1.0 : 1.0;
  const double q = std::abs(p);
  constexpr double a = 0.147;
  const double ln = std::log1p(-q * q);
  const double t = 2.0 / (std::numbers::pi * a) + 0.5 * ln;
  double x = std::sqrt(std::sqrt(t * t - ln / a) - t);
  const double scale = 2.0 / std::sqrt(std::numbers::pi);
  for (int it = 0; it < 4; ++it) {
    const double deriv = scale * std::exp(-x * x);
    const double resid = q < 0.5 ? std::erf(x) - q : (1.0 - q) - std::erfc(x);
    const double step = resid / deriv;
    // Halley correction: erf'' = -2x·erf'.
    x -= step / (1.0 + x * step);
  }
  return sign * x;
}

/// Standard normal CDF.
inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

/// Standard normal quantile on (0, 1): Acklam's rational approximation refined by one Halley
/// step against erfc.
inline double normal_quantile(double u) {
  if (!(u > 0.0 && u < 1.0)) throw DomainError("normal_quantile: argument must lie in (0, 1)");
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                 1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                 6.680131188771972e+01,  -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                 -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                 3.754408661907416e+00};
  constexpr double plow = 0.02425;
  double x;
  if (u < plow) {
    const double q = std::sqrt(-2 * std::log(u));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  } else if (u <= 1 - plow) {
    const double q = u - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
  } else {
    const double q = std::sqrt(-2 * std::log1p(-u));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  }
  const double e = normal_cdf(x) - u;
  const double g = e * std::sqrt(2 * std::numbers::pi) * std::exp(0.5 * x * x);
  return x - g / (1 + 0.5 * x * g);
}

}  // namespace epk
