#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "epk/error.hpp"
#include "epk/geometry/classifier.hpp"
#include "epk/numerics/linalg.hpp"
#include "epk/numerics/rng.hpp"

namespace epk {

/// A point on the decision boundary between class_a (the x_a side) and class_b.
struct BoundaryPoint {
  Vector x;
  std::size_t class_a = 0;
  std::size_t class_b = 0;
  double t = 0.0;    ///< position on the segment, x = (1−t)·x_a + t·x_b
  double gap = 0.0;  ///< |score_a − score_b| at x
  bool third_class = false;  ///< class_b is not the class of the far endpoint
  Vector direction;  ///< unit vector from x_a to x_b
  std::size_t iterations = 0;
};

namespace detail {

inline Vector segment_point(std::span<const double> a, std::span<const double> b, double t) {
  Vector x(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) x[i] = (1.0 - t) * a[i] + t * b[i];
  return x;
}

}  // namespace detail

/// Bisection on the segment until the class changes between two adjacent representable
/// positions, then returns whichever side has the smaller score gap between the tying classes.
inline BoundaryPoint boundary_bisect(const Classifier& clf, std::span<const double> x_a, std::span<const double> x_b,
                                     std::size_t max_iter = 200) {
  if (x_a.size() != x_b.size() || x_a.size() != clf.dim()) throw InvalidInput("boundary_bisect: dimension mismatch");
  const std::size_t ca = clf.classify(x_a), cb = clf.classify(x_b);
  if (ca == cb) throw InvalidInput("boundary_bisect: endpoints share a class");
  BoundaryPoint bp;
  double lo = 0.0, hi = 1.0;
  while (bp.iterations < max_iter) {
    const double mid = 0.5 * (lo + hi);
    if (!(mid > lo && mid < hi)) break;
    ++bp.iterations;
    if (clf.classify(detail::segment_point(x_a, x_b, mid)) == ca) lo = mid;
    else hi = mid;
  }
  const Vector xl = detail::segment_point(x_a, x_b, lo), xh = detail::segment_point(x_a, x_b, hi);
  const std::size_t ch = clf.classify(xh);
  auto gap = [&](const Vector& x) {
    const Vector s = clf.scores(x);
    return std::abs(s[ca] - s[ch]);
  };
  const double gl = gap(xl), gh = gap(xh);
  bp.class_a = ca;
  bp.class_b = ch;
  bp.third_class = ch != cb;
  if (gl <= gh) bp.x = xl, bp.t = lo, bp.gap = gl;
  else bp.x = xh, bp.t = hi, bp.gap = gh;
  bp.direction.resize(x_a.size());
  double n = 0.0;
  for (std::size_t i = 0; i < x_a.size(); ++i) n += (x_b[i] - x_a[i]) * (x_b[i] - x_a[i]);
  n = std::sqrt(n);
  for (std::size_t i = 0; i < x_a.size(); ++i) bp.direction[i] = (x_b[i] - x_a[i]) / n;
  return bp;
}

/// Returns a point classified differently from `from_class`, starting at x.
using PairAttack = std::function<Vector(std::span<const double> x, std::size_t from_class)>;

/// The crossing's own attack: walk along its direction (forward from class_a, backward
/// otherwise) with doubling steps until the class changes.
inline PairAttack segment_pair_attack(const Classifier& clf, const BoundaryPoint& bp, double first_step) {
  return [&clf, dir = bp.direction, ca = bp.class_a, first_step](std::span<const double> x, std::size_t from) {
    const double sgn = from == ca ? 1.0 : -1.0;
    double h = first_step;
    Vector y(x.size());
    for (int k = 0; k < 80; ++k, h *= 2.0) {
      for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] + sgn * h * dir[i];
      if (clf.classify(y) != from) return y;
    }
    return Vector{};
  };
}

struct NormalOptions {
  std::size_t n_samples = 5000;
  double sigma = 1e-6;
};

struct NormalEstimate {
  Vector normal;                 ///< unit, oriented from class_a toward class_b
  Vector singular_values;        ///< of the centred, σ-scaled boundary projections
  bool low_confidence = false;   ///< two smallest singular values within 1e-12 (relative), or too few samples
  std::size_t used = 0;
  std::size_t failed = 0;        ///< samples whose paired attack found no crossing
};

/// Gaussian samples around the boundary point are paired with an opposite-side point by the
/// attack, re-bisected onto the boundary, centred and decomposed; the normal is the right
/// singular vector of the smallest singular value.
inline NormalEstimate boundary_normal(const Classifier& clf, const BoundaryPoint& bp, const PairAttack& attack,
                                      const NormalOptions& opt, Rng& rng) {
  const std::size_t d = bp.x.size();
  if (opt.n_samples < 2 || !(opt.sigma > 0.0)) throw InvalidInput("boundary_normal: bad options");
  const Matrix z = standard_normal_matrix(rng, opt.n_samples, d);
  Matrix proj(opt.n_samples, d);
  std::vector<char> ok(opt.n_samples, 0);
  parallel_for(opt.n_samples, [&](std::size_t r) {
    Vector xs(d);
    for (std::size_t j = 0; j < d; ++j) xs[j] = bp.x[j] + opt.sigma * z(r, j);
    const std::size_t c = clf.classify(xs);
    const Vector partner = attack(xs, c);
    if (partner.empty()) return;
    const BoundaryPoint p = boundary_bisect(clf, xs, partner);
    std::copy(p.x.begin(), p.x.end(), proj.row(r).begin());
    ok[r] = 1;
  });
  NormalEstimate est;
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < ok.size(); ++r)
    if (ok[r]) rows.push_back(r);
  est.used = rows.size();
  est.failed = opt.n_samples - rows.size();
  if (rows.size() < 2) throw NumericalError("boundary_normal: no sample could be projected onto the boundary");
  Matrix pts(rows.size(), d);
  Vector mean(d, 0.0);
  for (std::size_t i = 0; i < rows.size(); ++i) axpy(1.0, proj.row(rows[i]), mean);
  for (double& m : mean) m /= static_cast<double>(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) pts(i, j) = (proj(rows[i], j) - mean[j]) / opt.sigma;
  const SvdResult s = svd(pts);
  est.singular_values = s.s;
  est.normal.assign(d, 0.0);
  if (s.Vt.rows() < d) {  // fewer samples than dimensions: the null space is not identified
    est.low_confidence = true;
    return est;
  }
  const auto v = s.Vt.row(d - 1);
  est.normal.assign(v.begin(), v.end());
  if (d >= 2 && s.s[d - 2] - s.s[d - 1] < 1e-12 * std::max(s.s[0], 1e-300)) est.low_confidence = true;
  if (dot(est.normal, bp.direction) < 0.0)
    for (double& e : est.normal) e = -e;
  const double nn = norm2(est.normal);
  for (double& e : est.normal) e /= nn;
  return est;
}

/// Angle between each direction and the boundary plane, π/2 − ∠(direction, normal) folded into
/// [0, π/2]: π/2 for a direction along the normal, 0 for one inside the boundary.
inline std::vector<double> crossing_angles(std::span<const double> normal, const std::vector<Vector>& directions) {
  const double nn = norm2(normal);
  if (!(nn > 0.0)) throw InvalidInput("crossing_angles: zero normal");
  std::vector<double> out;
  out.reserve(directions.size());
  for (const Vector& dir : directions) {
    if (dir.size() != normal.size()) throw InvalidInput("crossing_angles: dimension mismatch");
    const double dn = norm2(dir);
    if (!(dn > 0.0)) throw InvalidInput("crossing_angles: zero direction");
    const double along = dot(dir, normal) / nn;
    double perp2 = 0.0;
    for (std::size_t i = 0; i < dir.size(); ++i) {
      const double r = dir[i] - along * normal[i] / nn;
      perp2 += r * r;
    }
    out.push_back(std::atan2(std::abs(along), std::sqrt(perp2)));
  }
  return out;
}

struct BoundaryCrossing {
  BoundaryPoint point;
  NormalEstimate normal;
  std::vector<double> angles;  ///< for the supplied directions
};

/// Full crossing analysis of the segment x_a → x_b: locate, estimate the normal with the
/// segment's own pairing attack, and measure the supplied directions (the segment itself when
/// none are given).
inline BoundaryCrossing analyze_crossing(const Classifier& clf, std::span<const double> x_a, std::span<const double> x_b,
                                         std::vector<Vector> directions, const NormalOptions& opt, Rng& rng) {
  BoundaryCrossing c;
  c.point = boundary_bisect(clf, x_a, x_b);
  c.normal = boundary_normal(clf, c.point, segment_pair_attack(clf, c.point, 4.0 * opt.sigma), opt, rng);
  if (directions.empty()) directions.push_back(c.point.direction);
  if (!c.normal.low_confidence) c.angles = crossing_angles(c.normal.normal, directions);
  return c;
}

inline void write_angles_csv(const std::string& path, const std::vector<double>& angles) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInput("write_angles_csv: cannot open " + path);
  out.precision(17);
  out << "direction_id,angle_rad\n";
  for (std::size_t i = 0; i < angles.size(); ++i) out << i << ',' << angles[i] << '\n';
}

}  // namespace epk
