#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "epk/error.hpp"

namespace epk {

/// Wedge in ℝⁿ bounded by k sheets. With no angles it is the orthant {x_i > 0, i ≤ k}; with
/// k−1 angles θ it is {x_1 > 0, x_i > x_1·tan θ_{i−1} for 2 ≤ i ≤ k}.
struct WedgeSpec {
  std::size_t dim = 2;
  std::size_t sheets = 1;
  std::vector<double> angles;

  void validate() const {
    if (sheets == 0 || sheets > dim) throw InvalidInput("WedgeSpec: need 1 <= k <= n");
    if (!angles.empty()) {
      if (angles.size() != sheets - 1) throw InvalidInput("WedgeSpec: need k-1 angles");
      for (double a : angles)
        if (!(a > 0.0 && a < std::numbers::pi / 2)) throw InvalidInput("WedgeSpec: angles must lie in (0, pi/2)");
    }
  }
};

enum class WedgeLabel { outside = 0, inside = 1 };

/// Exact membership. Boundary points are outside: every inequality is strict.
inline WedgeLabel wedge_classify(const WedgeSpec& spec, std::span<const double> x) {
  if (x.size() != spec.dim) throw InvalidInput("wedge_classify: point dimension differs from wedge");
  if (spec.angles.empty()) {
    for (std::size_t i = 0; i < spec.sheets; ++i)
      if (!(x[i] > 0.0)) return WedgeLabel::outside;
    return WedgeLabel::inside;
  }
  if (!(x[0] > 0.0)) return WedgeLabel::outside;
  for (std::size_t i = 1; i < spec.sheets; ++i)
    if (!(x[i] > x[0] * std::tan(spec.angles[i - 1]))) return WedgeLabel::outside;
  return WedgeLabel::inside;
}

}  // namespace epk
