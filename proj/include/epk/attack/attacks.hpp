#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "epk/error.hpp"
#include "epk/model/mlp.hpp"
#include "epk/numerics/lbfgs.hpp"
#include "epk/numerics/matrix.hpp"
#include "epk/numerics/parallel.hpp"
#include "epk/numerics/rng.hpp"

namespace epk {

/// Coordinate box the perturbed input must stay in; images use [0, 1].
struct Box {
  double lo = 0.0;
  double hi = 1.0;
  bool enabled = true;

  static Box none() { return {0.0, 0.0, false}; }
  double clip(double v) const { return enabled ? std::clamp(v, lo, hi) : v; }
  void clip(std::span<double> x) const {
    if (enabled)
      for (double& v : x) v = std::clamp(v, lo, hi);
  }
};

struct AdversarialExample {
  Vector original;
  Vector perturbed;
  int original_label = -1;
  int predicted_label = -1;
  std::optional<int> target;
  double distortion = 0.0;
  bool success = false;
  std::string attack;
  std::size_t iterations = 0;
};

/// ‖x̂ − x‖₂ / √n.
inline double distortion(std::span<const double> x, std::span<const double> x_adv) {
  if (x.size() != x_adv.size()) throw InvalidInput("distortion: dimension mismatch");
  if (x.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (x_adv[i] - x[i]) * (x_adv[i] - x[i]);
  return std::sqrt(s / static_cast<double>(x.size()));
}

inline double sign0(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

namespace detail {

inline AdversarialExample finish(const ModelSpec& spec, std::span<const double> theta, std::span<const double> x,
                                 Vector perturbed, int label, std::optional<int> target, std::string name,
                                 std::size_t iterations) {
  AdversarialExample ex;
  ex.original.assign(x.begin(), x.end());
  ex.perturbed = std::move(perturbed);
  ex.original_label = label;
  ex.predicted_label = static_cast<int>(predict(spec, theta, ex.perturbed));
  ex.target = target;
  ex.distortion = distortion(ex.original, ex.perturbed);
  ex.success = target ? ex.predicted_label == *target : ex.predicted_label != label;
  ex.attack = std::move(name);
  ex.iterations = iterations;
  return ex;
}

/// Ascent direction on the loss of `label` (untargeted) or descent on the loss of `target`.
inline Vector attack_gradient(const ModelSpec& spec, std::span<const double> theta, std::span<const double> x, int label,
                              std::optional<int> target) {
  if (target) {
    Vector g = input_gradient(spec, theta, x, InputTarget::loss_of(static_cast<std::size_t>(*target)));
    for (double& v : g) v = -v;
    return g;
  }
  return input_gradient(spec, theta, x, InputTarget::loss_of(static_cast<std::size_t>(label)));
}

}  // namespace detail

/// x̂ = clip(x + ε·sign(∇_x L(x, y))), with sign(0) = 0.
inline AdversarialExample fgsm(const ModelSpec& spec, std::span<const double> theta, std::span<const double> x, int label,
                               double epsilon, const Box& box = {}) {
  if (!(epsilon >= 0.0)) throw InvalidInput("fgsm: epsilon must be >= 0");
  const Vector g = detail::attack_gradient(spec, theta, x, label, std::nullopt);
  Vector xa(x.begin(), x.end());
  for (std::size_t i = 0; i < xa.size(); ++i) xa[i] = box.clip(xa[i] + epsilon * sign0(g[i]));
  return detail::finish(spec, theta, x, std::move(xa), label, std::nullopt, "fgsm", 1);
}

struct IgsmOptions {
  double epsilon = 0.3;
  double alpha = 0.02;
  std::size_t iters = 40;
  std::optional<int> target;
  bool early_stop = true;  ///< stop at the first successful iterate
  Box box;
};

/// x′_{m+1} = Clip_{x,ε}{x′_m + α·sign(∇L)}; targeted runs descend the target's loss instead.
inline AdversarialExample igsm(const ModelSpec& spec, std::span<const double> theta, std::span<const double> x, int label,
                               const IgsmOptions& opt) {
  if (opt.iters < 1) throw InvalidInput("igsm: need at least one iteration");
  if (!(opt.alpha <= opt.epsilon) || !(opt.alpha >= 0.0)) throw InvalidInput("igsm: need 0 <= alpha <= epsilon");
  Vector xa(x.begin(), x.end());
  std::size_t m = 0;
  while (m < opt.iters) {
    const Vector g = detail::attack_gradient(spec, theta, xa, label, opt.target);
    for (std::size_t i = 0; i < xa.size(); ++i) {
      const double v = std::clamp(xa[i] + opt.alpha * sign0(g[i]), x[i] - opt.epsilon, x[i] + opt.epsilon);
      xa[i] = opt.box.clip(v);
    }
    ++m;
    if (opt.early_stop) {
      const int pred = static_cast<int>(predict(spec, theta, xa));
      if (opt.target ? pred == *opt.target : pred != label) break;
    }
  }
  return detail::finish(spec, theta, x, std::move(xa), label, opt.target, "igsm", m);
}

enum class PgdNorm { linf, l2 };

struct PgdOptions {
  double epsilon = 0.1;  ///< L∞ radius, or distortion radius ‖r‖₂/√n for L₂
  double alpha = 0.01;   ///< step in the same units as epsilon
  std::size_t iters = 40;
  PgdNorm norm = PgdNorm::linf;
  bool random_start = false;
  std::optional<int> target;
  bool early_stop = false;
  Box box;
};

namespace detail {

inline void project_ball(std::span<double> xa, std::span<const double> x, double eps, PgdNorm norm, const Box& box) {
  const std::size_t n = x.size();
  if (norm == PgdNorm::linf) {
    for (std::size_t i = 0; i < n; ++i) xa[i] = std::clamp(xa[i], x[i] - eps, x[i] + eps);
  } else {
    const double radius = eps * std::sqrt(static_cast<double>(n));
    double r2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) r2 += (xa[i] - x[i]) * (xa[i] - x[i]);
    const double r = std::sqrt(r2);
    if (r > radius) {
      const double s = radius / r;
      for (std::size_t i = 0; i < n; ++i) xa[i] = x[i] + s * (xa[i] - x[i]);
    }
  }
  // clipping moves every coordinate toward x (x lies in the box), so ball membership is kept
  box.clip(xa);
}

}  // namespace detail

/// Projected gradient ascent on the loss within an L∞ or L₂ ball, optionally from a uniform
/// random start inside the ball. L₂ radii are in distortion units (‖r‖₂/√n).
inline AdversarialExample pgd(const ModelSpec& spec, std::span<const double> theta, std::span<const double> x, int label,
                              const PgdOptions& opt, Rng& rng) {
  if (!(opt.epsilon >= 0.0) || !(opt.alpha >= 0.0)) throw InvalidInput("pgd: epsilon and alpha must be >= 0");
  const std::size_t n = x.size();
  Vector xa(x.begin(), x.end());
  if (opt.random_start && opt.epsilon > 0.0) {
    if (opt.norm == PgdNorm::linf) {
      for (std::size_t i = 0; i < n; ++i) xa[i] += opt.epsilon * (2.0 * rng.uniform() - 1.0);
    } else {
      const Matrix z = standard_normal_matrix(rng, 1, n);
      const double zn = norm2(z.row(0));
      const double radius = opt.epsilon * std::sqrt(static_cast<double>(n)) * std::pow(rng.uniform(), 1.0 / static_cast<double>(n));
      if (zn > 0)
        for (std::size_t i = 0; i < n; ++i) xa[i] += radius * z(0, i) / zn;
    }
    detail::project_ball(xa, x, opt.epsilon, opt.norm, opt.box);
  }
  std::size_t m = 0;
  const double l2_step = opt.alpha * std::sqrt(static_cast<double>(n));
  while (m < opt.iters && opt.epsilon > 0.0) {
    const Vector g = detail::attack_gradient(spec, theta, xa, label, opt.target);
    if (opt.norm == PgdNorm::linf) {
      for (std::size_t i = 0; i < n; ++i) xa[i] += opt.alpha * sign0(g[i]);
    } else {
      const double gn = norm2(g);
      if (gn > 0)
        for (std::size_t i = 0; i < n; ++i) xa[i] += l2_step * g[i] / gn;
    }
    detail::project_ball(xa, x, opt.epsilon, opt.norm, opt.box);
    ++m;
    if (opt.early_stop) {
      const int pred = static_cast<int>(predict(spec, theta, xa));
      if (opt.target ? pred == *opt.target : pred != label) break;
    }
  }
  return detail::finish(spec, theta, x, std::move(xa), label, opt.target, opt.norm == PgdNorm::linf ? "pgd-linf" : "pgd-l2", m);
}

struct MinDistortionOptions {
  std::vector<double> c_schedule{10.0, 1.0, 0.1, 0.01};
  /// Extra solves spent on log-scale bisection of c between the last failing and the first
  /// succeeding schedule entry (or upward expansion when the first entry already succeeds).
  std::size_t refine_steps = 6;
  LbfgsOptions lbfgs{10, 200, 1e-6, 1e-4, 0.9, 60};
  Box box;
};

/// Targeted attack: minimize c·‖r‖₂² + CCE(f(clip(x + r)), target) with L-BFGS, walking the
/// decreasing c schedule until the minimizer reaches the target, then refining c. The loss is
/// evaluated at the box projection of x + r; its gradient is zero along clipped coordinates.
/// Returns the smallest-distortion success, else the closest failed attempt.
inline AdversarialExample min_distortion_attack(const ModelSpec& spec, std::span<const double> theta,
                                                std::span<const double> x, int target,
                                                const MinDistortionOptions& opt = {}) {
  if (target < 0 || static_cast<std::size_t>(target) >= spec.classes())
    throw InvalidInput("min_distortion_attack: target out of range");
  if (opt.c_schedule.empty()) throw InvalidInput("min_distortion_attack: empty c schedule");
  const int original = static_cast<int>(predict(spec, theta, x));
  if (original == target) return detail::finish(spec, theta, x, Vector(x.begin(), x.end()), original, target, "lbfgs", 0);
  const std::size_t n = x.size();
  const Vector y = [&] {
    Vector v(spec.classes(), 0.0);
    v[static_cast<std::size_t>(target)] = 1.0;
    return v;
  }();
  std::size_t total_iters = 0;
  const Vector r0(n, 0.0);
  auto attempt = [&](double c) {
    const Objective obj = [&](std::span<const double> r, std::span<double> grad) {
      Vector xp(n);
      for (std::size_t i = 0; i < n; ++i) xp[i] = opt.box.clip(x[i] + r[i]);
      Tape<double> tape;
      forward_tape<double>(spec, theta, xp, tape);
      const double loss = cce_loss(tape.logp, y);
      Vector gx(n, 0.0);
      const Vector w = loss_output_grad(LossKind::cce, tape.logp, y);
      backward_tape<double>(spec, theta, tape, w, {}, gx);
      double pen = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double raw = x[i] + r[i];
        const bool clipped = opt.box.enabled && (raw < opt.box.lo || raw > opt.box.hi);
        grad[i] = 2.0 * c * r[i] + (clipped ? 0.0 : gx[i]);
        pen += r[i] * r[i];
      }
      return c * pen + loss;
    };
    const LbfgsResult res = lbfgs_minimize(obj, r0, opt.lbfgs);
    total_iters += res.trace.iterations;
    Vector xa(n);
    for (std::size_t i = 0; i < n; ++i) xa[i] = opt.box.clip(x[i] + res.x[i]);
    return detail::finish(spec, theta, x, std::move(xa), original, target, "lbfgs", 0);
  };

  AdversarialExample best, closest;
  bool have_best = false, have_closest = false;
  auto record = [&](AdversarialExample ex) {
    const bool ok = ex.success;
    if (ok && (!have_best || ex.distortion < best.distortion)) best = ex, have_best = true;
    if (!ok && (!have_closest || ex.distortion < closest.distortion)) closest = ex, have_closest = true;
    return ok;
  };

  double c_fail = -1.0, c_ok = -1.0;
  for (double c : opt.c_schedule) {
    if (record(attempt(c))) {
      c_ok = c;
      break;
    }
    c_fail = c;
  }
  if (c_ok > 0.0) {
    for (std::size_t k = 0; k < opt.refine_steps; ++k) {
      if (c_fail < 0.0) {  // nothing failed yet: push the penalty up
        const double c = c_ok * 10.0;
        if (record(attempt(c))) c_ok = c;
        else c_fail = c;
        continue;
      }
      const double c = std::sqrt(c_fail * c_ok);
      if (record(attempt(c))) c_ok = c;
      else c_fail = c;
    }
  }
  AdversarialExample out = have_best ? std::move(best) : std::move(closest);
  out.iterations = total_iters;
  return out;
}

/// CSV: id,original_label,target,success,distortion,iterations (target empty when untargeted).
inline void write_attack_csv(const std::string& path, const std::vector<AdversarialExample>& examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInput("write_attack_csv: cannot open " + path);
  out << "id,original_label,target,success,distortion,iterations\n" << std::setprecision(17);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& e = examples[i];
    out << i << ',' << e.original_label << ',';
    if (e.target) out << *e.target;
    out << ',' << (e.success ? 1 : 0) << ',' << e.distortion << ',' << e.iterations << '\n';
  }
}

}  // namespace epk
