#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "epk/error.hpp"
#include "epk/numerics/matrix.hpp"

namespace epk {

/// Objective: returns f(x) and writes ∇f(x) into grad (same length as x).
using Objective = std::function<double(std::span<const double> x, std::span<double> grad)>;

struct LbfgsOptions {
  std::size_t memory = 10;
  std::size_t max_iters = 500;
  double grad_tol = 1e-8;
  /// Sufficient-decrease constant β′, 0 < β′ < 1/2.
  double armijo = 1e-4;
  /// Curvature constant β, β′ < β < 1.
  double curvature = 0.9;
  std::size_t max_line_search = 60;
};

enum class LbfgsStatus { converged, max_iterations, line_search_failed };

struct LbfgsTrace {
  LbfgsStatus status = LbfgsStatus::max_iterations;
  std::size_t iterations = 0;
  std::size_t evaluations = 0;
  std::vector<double> f_history;
  std::vector<double> grad_norm_history;
};

struct LbfgsResult {
  Vector x;
  double f = 0.0;
  LbfgsTrace trace;
};

/// Limited-memory BFGS. Search direction from the two-loop recursion with H₀ = (sᵀy / yᵀy)·I;
/// step length from a bisection/expansion search for the weak Wolfe conditions
///   f(x + αd) ≤ f(x) + β′·α·gᵀd  and  ∇f(x + αd)ᵀd ≥ β·gᵀd,
/// trying α = 1 first. A failed line search ends the run and returns the last iterate.
inline LbfgsResult lbfgs_minimize(const Objective& objective, Vector x0, const LbfgsOptions& opt = {}) {
  if (!(opt.armijo > 0 && opt.armijo < 0.5 && opt.curvature > opt.armijo && opt.curvature < 1))
    throw InvalidInput("lbfgs_minimize: need 0 < armijo < 1/2 and armijo < curvature < 1");
  const std::size_t n = x0.size();
  LbfgsResult res{std::move(x0), 0.0, {}};
  Vector g(n), g_new(n), x_new(n), d(n);
  res.f = objective(res.x, g);
  ++res.trace.evaluations;
  if (!std::isfinite(res.f) || !all_finite(g)) throw NumericalError("lbfgs_minimize: non-finite objective at x0");

  std::deque<Vector> s_hist, y_hist;
  std::deque<double> rho_hist;
  res.trace.f_history.push_back(res.f);
  res.trace.grad_norm_history.push_back(norm2(g));

  for (std::size_t k = 0; k < opt.max_iters; ++k) {
    if (norm2(g) <= opt.grad_tol) {
      res.trace.status = LbfgsStatus::converged;
      return res;
    }
    // Two-loop recursion: d = -H·g.
    Vector q = g;
    std::vector<double> alpha(s_hist.size());
    for (std::size_t i = s_hist.size(); i-- > 0;) {
      alpha[i] = rho_hist[i] * dot(s_hist[i], q);
      axpy(-alpha[i], y_hist[i], q);
    }
    double gamma = 1.0;
    if (!s_hist.empty()) gamma = dot(s_hist.back(), y_hist.back()) / dot(y_hist.back(), y_hist.back());
    for (double& v : q) v *= gamma;
    for (std::size_t i = 0; i < s_hist.size(); ++i) {
      const double beta = rho_hist[i] * dot(y_hist[i], q);
      axpy(alpha[i] - beta, s_hist[i], q);
    }
    for (std::size_t i = 0; i < n; ++i) d[i] = -q[i];
    double slope = dot(g, d);
    if (!(slope < 0)) {  // not a descent direction: restart from steepest descent
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
      for (std::size_t i = 0; i < n; ++i) d[i] = -g[i];
      slope = -dot(g, g);
    }

    double step = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
    double f_new = 0.0;
    bool accepted = false;
    for (std::size_t ls = 0; ls < opt.max_line_search; ++ls) {
      for (std::size_t i = 0; i < n; ++i) x_new[i] = res.x[i] + step * d[i];
      f_new = objective(x_new, g_new);
      ++res.trace.evaluations;
      const double new_slope = dot(g_new, d);
      // Near a minimum the sufficient-decrease test drowns in rounding; fall back to the
      // approximate Wolfe conditions of Hager and Zhang once f is flat to ~1e-12 relative.
      const bool approx_wolfe = std::isfinite(f_new) && f_new <= res.f + 1e-12 * std::abs(res.f) &&
                                new_slope <= (2 * opt.armijo - 1) * slope && new_slope >= opt.curvature * slope;
      if (approx_wolfe) {
        accepted = true;
        break;
      }
      if (!std::isfinite(f_new) || f_new > res.f + opt.armijo * step * slope) {
        hi = step;
      } else if (new_slope < opt.curvature * slope) {
        lo = step;
      } else {
        accepted = true;
        break;
      }
      step = std::isinf(hi) ? 2.0 * lo : 0.5 * (lo + hi);
    }
    if (!accepted) {
      res.trace.status = LbfgsStatus::line_search_failed;
      return res;
    }
    Vector s(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = x_new[i] - res.x[i];
      y[i] = g_new[i] - g[i];
    }
    const double sy = dot(s, y);
    if (sy > 1e-300) {
      s_hist.push_back(std::move(s));
      y_hist.push_back(std::move(y));
      rho_hist.push_back(1.0 / sy);
      if (s_hist.size() > opt.memory) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
    }
    res.x.swap(x_new);
    g.swap(g_new);
    res.f = f_new;
    res.trace.iterations = k + 1;
    res.trace.f_history.push_back(res.f);
    res.trace.grad_norm_history.push_back(norm2(g));
  }
  res.trace.status = norm2(g) <= opt.grad_tol ? LbfgsStatus::converged : LbfgsStatus::max_iterations;
  return res;
}

}  // namespace epk
