#pragma once

#include <cmath>

namespace epk {

using std::exp;
using std::log;

/// Forward-mode dual number v + d·ε with ε² = 0.
struct Dual {
  double v = 0.0;
  double d = 0.0;

  constexpr Dual() = default;
  constexpr Dual(double value, double tangent = 0.0) : v(value), d(tangent) {}

  constexpr Dual& operator+=(const Dual& o) { v += o.v, d += o.d; return *this; }
  constexpr Dual& operator-=(const Dual& o) { v -= o.v, d -= o.d; return *this; }
  constexpr Dual& operator*=(const Dual& o) { d = d * o.v + v * o.d, v *= o.v; return *this; }
};

constexpr Dual operator+(Dual a, const Dual& b) { return a += b; }
constexpr Dual operator-(Dual a, const Dual& b) { return a -= b; }
constexpr Dual operator*(Dual a, const Dual& b) { return a *= b; }
constexpr Dual operator-(const Dual& a) { return {-a.v, -a.d}; }
constexpr Dual operator/(const Dual& a, const Dual& b) { return {a.v / b.v, (a.d * b.v - a.v * b.d) / (b.v * b.v)}; }

inline Dual exp(const Dual& a) {
  const double e = std::exp(a.v);
  return {e, e * a.d};
}
inline Dual log(const Dual& a) { return {std::log(a.v), a.d / a.v}; }

/// Value part, for branch decisions (ReLU masks, argmax) that must not depend on the tangent.
constexpr double primal(double x) { return x; }
constexpr double primal(const Dual& x) { return x.v; }

constexpr double tangent(const Dual& x) { return x.d; }

}  // namespace epk
