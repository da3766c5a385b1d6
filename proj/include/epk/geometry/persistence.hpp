#pragma once

#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "epk/error.hpp"
#include "epk/geometry/classifier.hpp"
#include "epk/numerics/rng.hpp"
#include "epk/numerics/special.hpp"

namespace epk {

inline constexpr double kUnbounded = std::numeric_limits<double>::infinity();

enum class Sampling { iid, latin_hypercube };

struct StabilityEstimate {
  double gamma_hat = 0.0;
  std::size_t n_samples = 0;
  std::size_t matches = 0;
  double sigma = 0.0;
  std::size_t reference_class = 0;

  /// Binomial standard error √(γ̂(1−γ̂)/n).
  double standard_error() const {
    return n_samples ? std::sqrt(gamma_hat * (1.0 - gamma_hat) / static_cast<double>(n_samples)) : 0.0;
  }
};

inline Matrix standard_draws(Rng& rng, std::size_t n, std::size_t d, Sampling sampling) {
  return sampling == Sampling::iid ? standard_normal_matrix(rng, n, d) : latin_hypercube_normal_matrix(rng, n, d);
}

/// Fraction of x + σ·z_r classified as `reference`, for the given standard draws z (n×d).
inline StabilityEstimate stability_from_draws(const Classifier& clf, std::span<const double> x, double sigma, const Matrix& z,
                                              std::size_t reference) {
  if (!(sigma >= 0.0)) throw InvalidInput("stability: sigma must be >= 0");
  if (z.cols() != x.size() || x.size() != clf.dim()) throw InvalidInput("stability: dimension mismatch");
  std::vector<char> hit(z.rows(), 0);
  parallel_for(z.rows(), [&](std::size_t r) {
    Vector xp(x.size());
    const auto zr = z.row(r);
    for (std::size_t j = 0; j < xp.size(); ++j) xp[j] = x[j] + sigma * zr[j];
    hit[r] = clf.classify(xp) == reference;
  });
  StabilityEstimate e;
  e.n_samples = z.rows();
  for (char h : hit) e.matches += static_cast<std::size_t>(h);
  e.gamma_hat = e.n_samples ? static_cast<double>(e.matches) / static_cast<double>(e.n_samples) : 0.0;
  e.sigma = sigma;
  e.reference_class = reference;
  return e;
}

/// Monte-Carlo estimate of P[C(x′) = C(x)] with x′ ~ N(x, σ²I).
inline StabilityEstimate stability(const Classifier& clf, std::span<const double> x, double sigma, std::size_t n, Rng& rng,
                                   Sampling sampling = Sampling::iid) {
  if (n < 1) throw InvalidInput("stability: need at least one sample");
  const Matrix z = standard_draws(rng, n, x.size(), sampling);
  return stability_from_draws(clf, x, sigma, z, clf.classify(x));
}

/// (½(1 + erf(d/(√2σ))))^k: stability of a point at distance d from each of k orthogonal sheets.
inline double wedge_stability_oracle(std::size_t k, double d, double sigma) {
  if (sigma == 0.0) return d > 0 ? 1.0 : 0.0;
  return std::pow(0.5 * (1.0 + erf(d / (std::numbers::sqrt2 * sigma))), static_cast<double>(k));
}

/// σ*_γ = d/(√2·erf⁻¹(2γ^{1/k} − 1)); kUnbounded when γ^{1/k} ≤ ½.
inline double wedge_persistence_oracle(std::size_t k, double d, double gamma) {
  if (k < 1 || !(d > 0.0) || !(gamma > 0.0 && gamma < 1.0)) throw InvalidInput("wedge_persistence_oracle: bad arguments");
  const double root = std::pow(gamma, 1.0 / static_cast<double>(k));
  if (root <= 0.5) return kUnbounded;
  return d / (std::numbers::sqrt2 * erf_inv(2.0 * root - 1.0));
}

struct PersistenceOptions {
  double gamma = 0.7;
  std::size_t n = 1000;
  std::size_t max_steps = 60;     ///< bisection steps after bracketing
  double precision = 0.01;        ///< tolerance on |γ̂(σ) − γ|
  double rel_width = 0.005;       ///< keep bisecting until (σ_max − σ_min)/σ ≤ this; ∞ stops at the first precision hit
  double sigma_min = 0.5;         ///< initial bracket
  double sigma_max = 1.5;
  std::size_t max_doublings = 20; ///< σ_max may grow to 2²⁰× its initial value
  std::size_t max_halvings = 60;
  Sampling sampling = Sampling::iid;
};

struct PersistenceResult {
  double gamma = 0.0;
  double sigma_star = 0.0;  ///< kUnbounded when stability never falls below γ
  double gamma_hat = 0.0;   ///< γ̂ at sigma_star
  bool converged = false;
  std::vector<std::pair<double, double>> trace;  ///< (σ, γ̂) in evaluation order

  bool unbounded() const noexcept { return std::isinf(sigma_star); }
};

/// Bracketing search for σ*_γ. One draw matrix is shared by every σ of the run (common random
/// numbers), so γ̂(σ) is a fixed function of σ and the bracket cannot be broken by resampling.
/// The range finder halves σ_min until γ̂(σ_min) ≥ γ and doubles σ_max until γ̂(σ_max) is below
/// γ by more than three standard errors; bisection then runs until the bracket is narrow and
/// γ̂ is within `precision` of γ.
inline PersistenceResult persistence_bracket(const Classifier& clf, std::span<const double> x, const PersistenceOptions& opt,
                                             Rng& rng) {
  if (!(opt.gamma > 0.0 && opt.gamma < 1.0)) throw InvalidInput("persistence_bracket: gamma must lie in (0, 1)");
  if (opt.n < 1 || !(opt.sigma_min > 0.0) || !(opt.sigma_max > opt.sigma_min) || !(opt.precision > 0.0))
    throw InvalidInput("persistence_bracket: bad options");
  const Matrix z = standard_draws(rng, opt.n, x.size(), opt.sampling);
  const std::size_t ref = clf.classify(x);
  PersistenceResult res;
  res.gamma = opt.gamma;
  auto eval = [&](double s) {
    const double g = stability_from_draws(clf, x, s, z, ref).gamma_hat;
    res.trace.emplace_back(s, g);
    return g;
  };
  const double se = std::sqrt(opt.gamma * (1.0 - opt.gamma) / static_cast<double>(opt.n));

  double lo = opt.sigma_min, hi = opt.sigma_max;
  double g_lo = eval(lo), g_hi = 0.0;
  bool halved = false;
  for (std::size_t h = 0; g_lo < opt.gamma; ++h) {
    if (h == opt.max_halvings) {  // unstable at every probed scale
      res.sigma_star = lo;
      res.gamma_hat = g_lo;
      res.converged = std::abs(g_lo - opt.gamma) <= opt.precision;
      return res;
    }
    hi = lo;
    g_hi = g_lo;
    halved = true;
    lo *= 0.5;
    g_lo = eval(lo);
  }
  if (!halved) g_hi = eval(hi);
  const double cap = opt.sigma_max * std::ldexp(1.0, static_cast<int>(opt.max_doublings));
  while (g_hi >= opt.gamma - 3.0 * se && !halved) {
    if (hi * 2.0 > cap) {
      res.sigma_star = kUnbounded;
      res.gamma_hat = g_hi;
      return res;
    }
    if (g_hi >= opt.gamma) lo = hi, g_lo = g_hi;  // within 3 SE below γ: hi grows, lo stays
    hi *= 2.0;
    g_hi = eval(hi);
  }
  // best-so-far tracks the evaluated σ closest to γ in γ̂
  double best_s = std::abs(g_lo - opt.gamma) <= std::abs(g_hi - opt.gamma) ? lo : hi;
  double best_g = best_s == lo ? g_lo : g_hi;
  for (std::size_t step = 0; step < opt.max_steps; ++step) {
    const double mid = 0.5 * (lo + hi);
    const double g = eval(mid);
    if (std::abs(g - opt.gamma) <= std::abs(best_g - opt.gamma)) best_s = mid, best_g = g;
    if (g >= opt.gamma) lo = mid;
    else hi = mid;
    const bool narrow = (hi - lo) <= opt.rel_width * mid;
    if (std::abs(g - opt.gamma) <= opt.precision && narrow) {
      best_s = mid;
      best_g = g;
      break;
    }
  }
  res.sigma_star = best_s;
  res.gamma_hat = best_g;
  res.converged = std::abs(best_g - opt.gamma) <= opt.precision;
  return res;
}

struct CurvePoint {
  double t = 0.0;
  std::size_t cls = 0;
  double sigma_star = 0.0;
  bool converged = false;
};

/// Class and γ-persistence at x_t = (1−t)·x_from + t·x_to for t = j/steps. Every point uses the
/// same generator state, so equal inputs give equal outputs.
inline std::vector<CurvePoint> persistence_curve(const Classifier& clf, std::span<const double> x_from,
                                                 std::span<const double> x_to, std::size_t steps, const PersistenceOptions& opt,
                                                 const Rng& rng) {
  if (x_from.size() != x_to.size()) throw InvalidInput("persistence_curve: endpoint dimensions differ");
  if (steps < 1) throw InvalidInput("persistence_curve: need at least one step");
  std::vector<CurvePoint> out;
  for (std::size_t j = 0; j <= steps; ++j) {
    const double t = static_cast<double>(j) / static_cast<double>(steps);
    Vector xt(x_from.size());
    for (std::size_t i = 0; i < xt.size(); ++i) xt[i] = (1.0 - t) * x_from[i] + t * x_to[i];
    Rng local = rng;
    const PersistenceResult r = persistence_bracket(clf, xt, opt, local);
    out.push_back({t, clf.classify(xt), r.sigma_star, r.converged});
  }
  return out;
}

struct HeatmapCell {
  double t = 0.0;
  double sigma = 0.0;
  double match_fraction = 0.0;
};

/// Stability of every x_t on the interpolant against its own class, over a σ grid.
inline std::vector<HeatmapCell> stability_heatmap(const Classifier& clf, std::span<const double> x_from,
                                                  std::span<const double> x_to, std::size_t steps,
                                                  const std::vector<double>& sigmas, std::size_t n, const Rng& rng) {
  if (x_from.size() != x_to.size() || steps < 1 || n < 1) throw InvalidInput("stability_heatmap: bad arguments");
  Rng local = rng;
  const Matrix z = standard_normal_matrix(local, n, x_from.size());
  std::vector<HeatmapCell> out;
  for (std::size_t j = 0; j <= steps; ++j) {
    const double t = static_cast<double>(j) / static_cast<double>(steps);
    Vector xt(x_from.size());
    for (std::size_t i = 0; i < xt.size(); ++i) xt[i] = (1.0 - t) * x_from[i] + t * x_to[i];
    const std::size_t ref = clf.classify(xt);
    for (double s : sigmas) out.push_back({t, s, stability_from_draws(clf, xt, s, z, ref).gamma_hat});
  }
  return out;
}

inline void write_curve_csv(const std::string& path, const std::vector<CurvePoint>& curve) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInput("write_curve_csv: cannot open " + path);
  out.precision(17);
  out << "t,class,sigma_star\n";
  for (const auto& p : curve) {
    out << p.t << ',' << p.cls << ',';
    if (std::isinf(p.sigma_star)) out << "inf";
    else out << p.sigma_star;
    out << '\n';
  }
}

inline void write_heatmap_csv(const std::string& path, const std::vector<HeatmapCell>& cells) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInput("write_heatmap_csv: cannot open " + path);
  out.precision(17);
  out << "t,sigma,match_fraction\n";
  for (const auto& c : cells) out << c.t << ',' << c.sigma << ',' << c.match_fraction << '\n';
}

}  // namespace epk
