#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "epk/attack/attacks.hpp"
#include "epk/geometry/boundary.hpp"
#include "epk/geometry/persistence.hpp"
#include "epk/train/train.hpp"

using namespace epk;

namespace {

Vector orthant_point(std::size_t dim, std::size_t k, double d) {
  Vector x(dim, 0.0);
  for (std::size_t i = 0; i < k; ++i) x[i] = d;
  return x;
}

// σ solving (½(1+erf(d/√2σ)))^k = γ by bisection on the stability formula, independent of erf_inv
double oracle_by_bisection(std::size_t k, double d, double gamma) {
  double lo = 1e-6, hi = 1e6;
  for (int i = 0; i < 200; ++i) {
    const double mid = std::sqrt(lo * hi);
    if (wedge_stability_oracle(k, d, mid) >= gamma) lo = mid;
    else hi = mid;
  }
  return std::sqrt(lo * hi);
}

Vector random_unit(Rng& rng, std::size_t d) {
  Vector v(d);
  for (double& e : v) e = rng.normal();
  const double n = norm2(v);
  for (double& e : v) e /= n;
  return v;
}

double angle_between(const Vector& a, const Vector& b) {
  const double c = std::clamp(dot(a, b) / (norm2(a) * norm2(b)), -1.0, 1.0);
  return std::acos(c);
}

}  // namespace

TEST(Stability, ZeroSigmaIsFullyStable) {
  WedgeClassifier clf(WedgeSpec{3, 2, {}});
  Rng rng(1);
  const auto e = stability(clf, orthant_point(3, 2, 0.3), 0.0, 100, rng);
  EXPECT_EQ(e.gamma_hat, 1.0);
  EXPECT_EQ(e.matches, 100u);
}

TEST(Stability, GammaHatIsMatchFraction) {
  WedgeClassifier clf(WedgeSpec{2, 1, {}});
  Rng rng(2);
  const auto e = stability(clf, orthant_point(2, 1, 0.2), 1.0, 777, rng);
  EXPECT_EQ(e.gamma_hat, static_cast<double>(e.matches) / 777.0);
  EXPECT_EQ(e.n_samples, 777u);
  EXPECT_EQ(e.reference_class, 1u);
}

TEST(Stability, HalfSpaceMatchesClosedForm) {
  const Vector n{0.6, 0.8, 0.0};
  const LinearClassifier clf = LinearClassifier::half_space(n, 0.0);
  const Vector x{0.6, 0.8, 0.0};  // distance 1 on the positive side
  Rng rng(3);
  const auto e = stability(clf, x, 1.0, 10000, rng);
  const double expect = 0.5 * (1 + std::erf(1 / std::sqrt(2.0)));
  EXPECT_NEAR(expect, 0.8413, 1e-4);
  EXPECT_LE(std::abs(e.gamma_hat - expect), 3 * std::sqrt(expect * (1 - expect) / 1e4));
}

TEST(Stability, OrthantProductLawAcrossGrid) {
  Rng rng(4);
  for (std::size_t k : {1u, 2u, 3u})
    for (double d : {0.5, 1.0, 2.0})
      for (double sigma : {0.5, 1.0, 2.0}) {
        WedgeClassifier clf(WedgeSpec{5, k, {}});
        const auto e = stability(clf, orthant_point(5, k, d), sigma, 10000, rng);
        const double p = wedge_stability_oracle(k, d, sigma);
        const double se = std::sqrt(p * (1 - p) / 1e4);
        EXPECT_LE(std::abs(e.gamma_hat - p), 3 * se) << "k=" << k << " d=" << d << " sigma=" << sigma;
      }
  EXPECT_NEAR(wedge_stability_oracle(2, 1, 1), 0.8413447460685429 * 0.8413447460685429, 1e-12);
}

TEST(Stability, LatinHypercubeIsUnbiased) {
  WedgeClassifier clf(WedgeSpec{4, 3, {}});
  Rng rng(5);
  const auto e = stability(clf, orthant_point(4, 3, 1.0), 1.0, 10000, rng, Sampling::latin_hypercube);
  const double p = wedge_stability_oracle(3, 1.0, 1.0);
  EXPECT_LE(std::abs(e.gamma_hat - p), 3 * std::sqrt(p * (1 - p) / 1e4));
}

TEST(WedgeOracle, KnownValues) {
  EXPECT_NEAR(wedge_persistence_oracle(1, 1, 0.7), 1.907, 1e-3);
  EXPECT_NEAR(wedge_persistence_oracle(3, 1, 0.7), 0.822, 1e-3);
  for (std::size_t k : {1u, 2u, 3u, 5u})
    EXPECT_NEAR(wedge_persistence_oracle(k, 1, 0.7), oracle_by_bisection(k, 1, 0.7), 1e-9);
}

TEST(WedgeOracle, ScalesLinearlyAndDecreasesWithSheets) {
  const double base = wedge_persistence_oracle(2, 1, 0.7);
  for (double d : {0.25, 0.5, 2.0, 7.0}) EXPECT_NEAR(wedge_persistence_oracle(2, d, 0.7), d * base, 1e-12 * d);
  EXPECT_LT(wedge_persistence_oracle(5, 1, 0.7), wedge_persistence_oracle(1, 1, 0.7));
  for (std::size_t k = 1; k < 6; ++k) EXPECT_LT(wedge_persistence_oracle(k + 1, 1, 0.7), wedge_persistence_oracle(k, 1, 0.7));
}

TEST(WedgeOracle, UnboundedWhenRootNotAboveHalf) {
  EXPECT_TRUE(std::isinf(wedge_persistence_oracle(1, 1, 0.5)));
  EXPECT_TRUE(std::isinf(wedge_persistence_oracle(2, 1, 0.25)));
  EXPECT_THROW(wedge_persistence_oracle(1, 1, 1.0), InvalidInput);
}

TEST(Persistence, HalfSpaceGammaPoint7) {
  WedgeClassifier clf(WedgeSpec{3, 1, {}});
  PersistenceOptions o;
  o.n = 10000;
  o.sampling = Sampling::latin_hypercube;
  Rng rng(6);
  const auto r = persistence_bracket(clf, orthant_point(3, 1, 1.0), o, rng);
  EXPECT_TRUE(r.converged);
  EXPECT_NEAR(r.sigma_star, 1.91, 0.02 * 1.91);
}

TEST(Persistence, OrthantThreeSheets) {
  WedgeClassifier clf(WedgeSpec{3, 3, {}});
  PersistenceOptions o;
  o.n = 10000;
  o.sampling = Sampling::latin_hypercube;
  Rng rng(7);
  const auto r = persistence_bracket(clf, orthant_point(3, 3, 1.0), o, rng);
  EXPECT_NEAR(r.sigma_star, wedge_persistence_oracle(3, 1, 0.7), 0.02 * 0.822);
}

TEST(Persistence, MatchesOracleAcrossGrid) {
  Rng rng(8);
  for (std::size_t k : {1u, 2u, 3u})
    for (double d : {0.5, 1.0, 2.0}) {
      WedgeClassifier clf(WedgeSpec{6, k, {}});
      PersistenceOptions o;
      o.n = 10000;
      o.sampling = Sampling::latin_hypercube;
      const auto r = persistence_bracket(clf, orthant_point(6, k, d), o, rng);
      const double ref = wedge_persistence_oracle(k, d, 0.7);
      EXPECT_LE(std::abs(r.sigma_star - ref) / ref, 0.02) << "k=" << k << " d=" << d;
    }
}

TEST(Persistence, ConvergedMeansWithinPrecision) {
  Rng rng(9);
  for (int trial = 0; trial < 12; ++trial) {
    const std::size_t k = 1 + trial % 3;
    WedgeClassifier clf(WedgeSpec{4, k, {}});
    PersistenceOptions o;
    o.n = 400 + 100 * trial;
    o.gamma = 0.55 + 0.03 * trial;
    o.precision = 0.02;
    const auto r = persistence_bracket(clf, orthant_point(4, k, 0.3 + 0.2 * trial), o, rng);
    if (r.converged) { EXPECT_LE(std::abs(r.gamma_hat - o.gamma), o.precision); }
    ASSERT_FALSE(r.trace.empty());
    bool seen = false;
    for (const auto& [s, g] : r.trace) seen |= s == r.sigma_star && g == r.gamma_hat;
    EXPECT_TRUE(seen || r.unbounded());
  }
}

TEST(Persistence, HalfSpaceAtHalfIsUnbounded) {
  WedgeClassifier clf(WedgeSpec{2, 1, {}});
  PersistenceOptions o;
  o.gamma = 0.5;
  Rng rng(10);
  const auto r = persistence_bracket(clf, orthant_point(2, 1, 1.0), o, rng);
  EXPECT_TRUE(r.unbounded());
  EXPECT_FALSE(r.converged);
}

TEST(Persistence, RangeFinderHalvesForSmallScales) {
  WedgeClassifier clf(WedgeSpec{2, 1, {}});
  PersistenceOptions o;
  o.n = 5000;
  o.sampling = Sampling::latin_hypercube;
  Rng rng(11);
  const auto r = persistence_bracket(clf, orthant_point(2, 1, 1e-3), o, rng);
  EXPECT_NEAR(r.sigma_star, wedge_persistence_oracle(1, 1e-3, 0.7), 0.03 * wedge_persistence_oracle(1, 1e-3, 0.7));
}

TEST(Persistence, RejectsBadGamma) {
  WedgeClassifier clf(WedgeSpec{2, 1, {}});
  PersistenceOptions o;
  o.gamma = 1.0;
  Rng rng(1);
  EXPECT_THROW(persistence_bracket(clf, orthant_point(2, 1, 1.0), o, rng), InvalidInput);
}

TEST(Persistence, AngledWedgeIsLessPersistentThanOrthant) {
  // narrowing the wedge moves the second sheet closer to the point
  WedgeClassifier orth(WedgeSpec{2, 2, {}});
  WedgeClassifier narrow(WedgeSpec{2, 2, {std::numbers::pi / 6}});
  PersistenceOptions o;
  o.n = 4000;
  o.sampling = Sampling::latin_hypercube;
  const Vector x{1.0, 1.0};
  Rng a(12), b(12);
  EXPECT_LT(persistence_bracket(narrow, x, o, b).sigma_star, persistence_bracket(orth, x, o, a).sigma_star);
}

TEST(Curve, ConstantWhenEndpointsCoincide) {
  WedgeClassifier clf(WedgeSpec{3, 2, {}});
  const Vector x = orthant_point(3, 2, 0.7);
  PersistenceOptions o;
  o.n = 500;
  const auto c = persistence_curve(clf, x, x, 4, o, Rng(13));
  ASSERT_EQ(c.size(), 5u);
  for (const auto& p : c) {
    EXPECT_EQ(p.sigma_star, c[0].sigma_star);
    EXPECT_EQ(p.cls, c[0].cls);
  }
}

TEST(Curve, HalfSpaceCrossingFollowsDistance) {
  WedgeClassifier clf(WedgeSpec{2, 1, {}});
  PersistenceOptions o;
  o.n = 10000;
  o.sampling = Sampling::latin_hypercube;
  const auto c = persistence_curve(clf, Vector{-1.0, 0.0}, Vector{1.0, 0.0}, 8, o, Rng(14));
  for (const auto& p : c) {
    const double dist = std::abs(2 * p.t - 1);
    if (dist == 0) continue;  // the boundary point itself belongs to class 0 with persistence → 0
    const double ref = wedge_persistence_oracle(1, dist, 0.7);
    EXPECT_NEAR(p.sigma_star, ref, 0.02 * ref) << "t=" << p.t;
    EXPECT_EQ(p.cls, p.t > 0.5 ? 1u : 0u);
  }
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(c[j].sigma_star, c[8 - j].sigma_star, 0.03 * c[j].sigma_star);
}

TEST(Curve, AdversarialSideIsLessPersistent) {
  Rng root(15);
  Rng dr = root.split(1), tr = root.split(2);
  const Dataset ds = toy_dataset(dr, 100, 10);
  TrainConfig c;
  c.steps = 150;
  c.lr = 1e-3;
  const TrainingPath p = train(ds, ModelSpec{{10, 16, 3}}, c, tr);
  MlpClassifier clf(p.spec, p.final_theta);
  PersistenceOptions o;
  o.n = 500;
  std::size_t checked = 0, lower = 0;
  for (std::size_t i = 0; i < 40 && checked < 8; i += 5) {
    if (clf.classify(ds.x(i)) != static_cast<std::size_t>(ds.labels[i])) continue;
    IgsmOptions g;
    g.epsilon = 5.0;
    g.alpha = 0.05;
    g.iters = 400;
    g.box = Box::none();
    const auto adv = igsm(p.spec, p.final_theta, ds.x(i), ds.labels[i], g);
    if (!adv.success) continue;
    const auto curve = persistence_curve(clf, ds.x(i), adv.perturbed, 10, o, Rng(16));
    ++checked;
    lower += curve.back().sigma_star < curve.front().sigma_star;
  }
  ASSERT_GE(checked, 5u);
  EXPECT_EQ(lower, checked);
}

TEST(Heatmap, ShapeAndZeroSigmaRow) {
  WedgeClassifier clf(WedgeSpec{2, 1, {}});
  const auto cells = stability_heatmap(clf, Vector{-1, 0}, Vector{1, 0}, 4, {0.0, 0.5, 1.0}, 200, Rng(17));
  ASSERT_EQ(cells.size(), 15u);
  for (const auto& c : cells)
    if (c.sigma == 0.0) { EXPECT_EQ(c.match_fraction, 1.0); }
}

TEST(Boundary, LinearIntersectionIsExact) {
  Rng rng(18);
  for (int trial = 0; trial < 20; ++trial) {
    const Vector n = random_unit(rng, 6);
    const double off = rng.normal();
    const LinearClassifier clf = LinearClassifier::half_space(n, off);
    Vector a(6), b(6);
    for (std::size_t j = 0; j < 6; ++j) {
      a[j] = rng.normal() - 3 * n[j];
      b[j] = rng.normal() + 3 * n[j];
    }
    a = add(a, scaled(n, off - dot(n, a) - 1.0));
    b = add(b, scaled(n, off - dot(n, b) + 1.0));
    const BoundaryPoint bp = boundary_bisect(clf, a, b);
    const double t = (off - dot(n, a)) / (dot(n, b) - dot(n, a));
    for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(bp.x[j], (1 - t) * a[j] + t * b[j], 1e-9);
    EXPECT_LE(bp.gap, 1e-10);
    EXPECT_FALSE(bp.third_class);
    const BoundaryPoint back = boundary_bisect(clf, b, a);
    for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(back.x[j], bp.x[j], 1e-12);
  }
}

TEST(Boundary, SameClassEndpointsRejected) {
  const LinearClassifier clf = LinearClassifier::half_space(Vector{1, 0}, 0.0);
  EXPECT_THROW(boundary_bisect(clf, Vector{1, 0}, Vector{2, 1}), InvalidInput);
}

TEST(Boundary, ThirdClassReported) {
  // three vertical bands: class 0 for x<0, class 2 for 0<x<1, class 1 for x>1
  const LinearClassifier clf(Matrix::from_rows({{-1, 0}, {1, 0}, {0, 0}}), Vector{0, -1, 0});
  const BoundaryPoint bp = boundary_bisect(clf, Vector{-1, 0}, Vector{2, 0});
  EXPECT_EQ(bp.class_a, 0u);
  EXPECT_EQ(bp.class_b, 2u);
  EXPECT_TRUE(bp.third_class);
  EXPECT_NEAR(bp.x[0], 0.0, 1e-12);
}

TEST(Boundary, MlpGapIsTiny) {
  Rng rng(19);
  const ModelSpec spec{{4, 8, 3}};
  const Vector theta = init_params(spec, rng, false);
  MlpClassifier clf(spec, theta);
  std::size_t done = 0;
  for (int trial = 0; trial < 50 && done < 10; ++trial) {
    Vector a(4), b(4);
    for (double& v : a) v = 3 * rng.normal();
    for (double& v : b) v = 3 * rng.normal();
    if (clf.classify(a) == clf.classify(b)) continue;
    const BoundaryPoint bp = boundary_bisect(clf, a, b);
    const Vector s = clf.scores(bp.x);
    EXPECT_LE(bp.gap, 1e-10 * std::max(1.0, *std::max_element(s.begin(), s.end(), [](double u, double v) { return std::abs(u) < std::abs(v); })));
    ++done;
  }
  EXPECT_EQ(done, 10u);
}

TEST(Normal, LinearModelWithinTolerance) {
  Rng rng(20);
  for (std::size_t d : {5u, 12u}) {
    const Vector n = random_unit(rng, d);
    const LinearClassifier clf = LinearClassifier::half_space(n, 0.3);
    const Vector a = scaled(n, -1.0), b = add(scaled(n, 2.0), random_unit(rng, d));
    Rng nr(21);
    const BoundaryCrossing c = analyze_crossing(clf, a, b, {}, NormalOptions{}, nr);
    EXPECT_FALSE(c.normal.low_confidence);
    EXPECT_EQ(c.normal.used, 5000u);
    EXPECT_NEAR(norm2(c.normal.normal), 1.0, 1e-12);
    EXPECT_LE(angle_between(c.normal.normal, n), 0.01);  // oriented toward class 1
  }
}

TEST(Normal, RotationEquivariance) {
  Rng rng(22);
  const std::size_t d = 6;
  const Vector n = random_unit(rng, d);
  Matrix g(d, d);
  for (double& v : g.values()) v = rng.normal();
  const Matrix q = svd(g).U;  // orthogonal
  const Vector qn = matvec(q, n);
  const Vector a = scaled(n, -1.0), b = add(scaled(n, 1.5), scaled(random_unit(rng, d), 0.5));
  Rng r1(23), r2(23);
  const auto c1 = analyze_crossing(LinearClassifier::half_space(n, 0.0), a, b, {}, NormalOptions{}, r1);
  const auto c2 = analyze_crossing(LinearClassifier::half_space(qn, 0.0), matvec(q, a), matvec(q, b), {}, NormalOptions{}, r2);
  EXPECT_LE(angle_between(c2.normal.normal, matvec(q, c1.normal.normal)), 0.01);
  EXPECT_LE(angle_between(c2.normal.normal, qn), 0.01);
}

TEST(Normal, TooFewSamplesIsLowConfidence) {
  const LinearClassifier clf = LinearClassifier::half_space(Vector{1, 0, 0, 0, 0}, 0.0);
  const BoundaryPoint bp = boundary_bisect(clf, Vector{-1, 0, 0, 0, 0}, Vector{1, 0, 0, 0, 0});
  NormalOptions o;
  o.n_samples = 3;
  Rng rng(24);
  const auto est = boundary_normal(clf, bp, segment_pair_attack(clf, bp, 4e-6), o, rng);
  EXPECT_TRUE(est.low_confidence);
}

TEST(Angles, EdgeCasesAndScaleInvariance) {
  const Vector n{0, 0, 1};
  const auto a = crossing_angles(n, {Vector{0, 0, 2}, Vector{1, 1, 0}, Vector{0, 0, -5}});
  EXPECT_NEAR(a[0], std::numbers::pi / 2, 1e-15);
  EXPECT_NEAR(a[1], 0.0, 1e-15);
  EXPECT_NEAR(a[2], std::numbers::pi / 2, 1e-15);
  Rng rng(25);
  for (int i = 0; i < 20; ++i) {
    const Vector d = random_unit(rng, 3);
    const auto x = crossing_angles(n, {d, scaled(d, 1e-7), scaled(d, -3e5)});
    EXPECT_NEAR(x[0], x[1], 1e-14);
    EXPECT_NEAR(x[0], x[2], 1e-14);
    EXPECT_GE(x[0], 0.0);
    EXPECT_LE(x[0], std::numbers::pi / 2);
  }
  EXPECT_THROW(crossing_angles(n, {Vector{0, 0, 0}}), InvalidInput);
}

TEST(Angles, ConstructedThirtyDegreeCrossing) {
  Rng rng(26);
  const std::size_t d = 8;
  const Vector n = random_unit(rng, d);
  Vector t = random_unit(rng, d);
  t = sub(t, scaled(n, dot(t, n)));
  t = scaled(t, 1.0 / norm2(t));
  const double th = std::numbers::pi / 6;
  const Vector dir = add(scaled(t, std::cos(th)), scaled(n, std::sin(th)));
  const Vector a = add(scaled(n, -0.5), scaled(t, 0.2));
  const Vector b = add(a, scaled(dir, 3.0));
  Rng nr(27);
  const auto c = analyze_crossing(LinearClassifier::half_space(n, 0.0), a, b, {}, NormalOptions{}, nr);
  ASSERT_EQ(c.angles.size(), 1u);
  EXPECT_NEAR(c.angles[0], 0.5236, 0.02);
}

TEST(GeometryCsv, Headers) {
  const auto dir = std::filesystem::temp_directory_path();
  auto first_line = [](const std::filesystem::path& p) {
    std::ifstream in(p);
    std::string l;
    std::getline(in, l);
    return l;
  };
  write_curve_csv((dir / "epk_curve.csv").string(), {{0.0, 1, 2.0, true}, {1.0, 0, kUnbounded, false}});
  write_heatmap_csv((dir / "epk_heat.csv").string(), {{0.0, 1.0, 0.5}});
  write_angles_csv((dir / "epk_angles.csv").string(), {0.1, 0.2});
  EXPECT_EQ(first_line(dir / "epk_curve.csv"), "t,class,sigma_star");
  EXPECT_EQ(first_line(dir / "epk_heat.csv"), "t,sigma,match_fraction");
  EXPECT_EQ(first_line(dir / "epk_angles.csv"), "direction_id,angle_rad");
  for (const char* f : {"epk_curve.csv", "epk_heat.csv", "epk_angles.csv"}) std::filesystem::remove(dir / f);
}
