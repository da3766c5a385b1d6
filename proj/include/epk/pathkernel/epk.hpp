#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "epk/data/dataset.hpp"
#include "epk/error.hpp"
#include "epk/model/dual.hpp"
#include "epk/model/mlp.hpp"
#include "epk/numerics/linalg.hpp"
#include "epk/numerics/matrix.hpp"
#include "epk/numerics/parallel.hpp"
#include "epk/numerics/rng.hpp"
#include "epk/train/train.hpp"

namespace epk {

/// Quadrature over t ∈ [0, 1] for the test-side integral. `left` with T = 1 evaluates only
/// t = 0, the discrete path kernel.
enum class Quadrature { trapezoid, midpoint, left };
enum class ClassReduction { full, class_sum };

struct EpkConfig {
  std::size_t substeps = 100;
  Quadrature rule = Quadrature::trapezoid;
  ClassReduction reduction = ClassReduction::full;
  /// Diagnostic: evaluate the training-side gradient at θ_s(t) as well instead of freezing it
  /// at t = 0 (the asymmetric continuous kernel). Breaks exactness; used to show why the
  /// indicator matters.
  bool unfrozen_train_side = false;
  /// Trapezoid only: split panels at the t where a hidden ReLU of the test point switches.
  /// The integrand jumps there, which otherwise caps the rule at first order in 1/T.
  bool kink_aware = true;
};

struct QuadratureRule {
  std::vector<double> nodes;
  std::vector<double> weights;
};

inline QuadratureRule quadrature(std::size_t T, Quadrature rule) {
  if (T < 1) throw InvalidInput("quadrature: need at least one substep");
  QuadratureRule q;
  const double h = 1.0 / static_cast<double>(T);
  switch (rule) {
    case Quadrature::trapezoid:
      for (std::size_t j = 0; j <= T; ++j) {
        q.nodes.push_back(static_cast<double>(j) * h);
        q.weights.push_back(j == 0 || j == T ? 0.5 * h : h);
      }
      break;
    case Quadrature::midpoint:
      for (std::size_t j = 0; j < T; ++j) {
        q.nodes.push_back((static_cast<double>(j) + 0.5) * h);
        q.weights.push_back(h);
      }
      break;
    case Quadrature::left:
      for (std::size_t j = 0; j < T; ++j) {
        q.nodes.push_back(static_cast<double>(j) * h);
        q.weights.push_back(h);
      }
      break;
  }
  return q;
}

namespace detail {

/// Signs of every hidden pre-activation of x under θ.
inline std::vector<char> activation_pattern(const ModelSpec& spec, std::span<const double> theta, std::span<const double> x,
                                            Tape<double>& tape) {
  forward_tape<double>(spec, theta, x, tape);
  std::vector<char> m;
  for (std::size_t l = 0; l + 1 < tape.z.size(); ++l)
    for (double z : tape.z[l]) m.push_back(z > 0.0);
  return m;
}

inline Vector lerp(std::span<const double> a, std::span<const double> b, double t);

inline constexpr double kKinkWidth = 1e-13;

/// Quadrature nodes for one segment and one test point. With kink refinement every trapezoid
/// panel whose end patterns differ is bisected down to width kKinkWidth around each switch.
inline QuadratureRule segment_rule(const ModelSpec& spec, std::span<const double> a, std::span<const double> b,
                                   std::span<const double> x, const QuadratureRule& base, Quadrature rule, bool kink_aware,
                                   std::span<const double> x2 = {}) {
  if (!kink_aware || rule != Quadrature::trapezoid) return base;
  Tape<double> tape;
  auto pattern = [&](double t) {
    const Vector th = lerp(a, b, t);
    std::vector<char> m = activation_pattern(spec, th, x, tape);
    if (!x2.empty()) {
      const std::vector<char> m2 = activation_pattern(spec, th, x2, tape);
      m.insert(m.end(), m2.begin(), m2.end());
    }
    return m;
  };
  std::vector<double> cuts{0.0};
  std::vector<char> left = pattern(0.0);
  const std::function<void(double, double, const std::vector<char>&, const std::vector<char>&)> refine =
      [&](double lo, double hi, const std::vector<char>& plo, const std::vector<char>& phi) {
        if (plo == phi || hi - lo <= kKinkWidth) {
          cuts.push_back(hi);
          return;
        }
        const double mid = 0.5 * (lo + hi);
        const std::vector<char> pm = pattern(mid);
        refine(lo, mid, plo, pm);
        refine(mid, hi, pm, phi);
      };
  for (std::size_t j = 1; j < base.nodes.size(); ++j) {
    std::vector<char> right = pattern(base.nodes[j]);
    refine(base.nodes[j - 1], base.nodes[j], left, right);
    left = std::move(right);
  }
  QuadratureRule q;
  q.nodes = cuts;
  q.weights.assign(cuts.size(), 0.0);
  for (std::size_t j = 1; j < cuts.size(); ++j) {
    const double h = cuts[j] - cuts[j - 1];
    q.weights[j - 1] += 0.5 * h;
    q.weights[j] += 0.5 * h;
  }
  return q;
}

inline void require_kernel_path(const TrainingPath& path) {
  if (path.is_mag())
    throw InvalidPath("EPK: MAG updates contain a second-order term and are not a loss-gradient path");
  if (!path.complete()) throw InvalidPath("EPK: every checkpoint θ_s is required");
}

inline Vector lerp(std::span<const double> a, std::span<const double> b, double t) {
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + t * (b[i] - a[i]);
  return out;
}

/// Kernel weights of one step: row r holds a_{r,s} = −ε_s·L′(f(x_r; θ_s), y_r) for the r-th
/// example of the step batch.
inline Matrix step_weights(const TrainingPath& path, const StepBatch& b, std::span<const double> theta_s, double eps) {
  Matrix a(b.inputs.rows(), path.spec.classes());
  parallel_for(b.inputs.rows(), [&](std::size_t r) {
    const Vector f = forward(path.spec, theta_s, b.inputs.row(r));
    const Vector lp = loss_output_grad(path.config.loss, f, b.targets.row(r));
    for (std::size_t k = 0; k < lp.size(); ++k) a(r, k) = -eps * lp[k];
  });
  return a;
}

/// u_s = Σ_r J(x_r; θ_s)ᵀ a_{r,s}: the parameter-space image of one step's kernel weights.
inline Vector step_direction(const TrainingPath& path, const StepBatch& b, const Matrix& a, std::span<const double> theta_s) {
  const std::size_t chunks = (b.inputs.rows() + kChunk - 1) / kChunk;
  std::vector<Vector> partial(chunks);
  parallel_for(chunks, [&](std::size_t c) {
    Vector g(theta_s.size(), 0.0);
    Tape<double> tape;
    const std::size_t end = std::min(b.inputs.rows(), (c + 1) * kChunk);
    for (std::size_t r = c * kChunk; r < end; ++r) {
      forward_tape<double>(path.spec, theta_s, b.inputs.row(r), tape);
      backward_tape<double>(path.spec, theta_s, tape, a.row(r), g, {});
    }
    partial[c] = std::move(g);
  });
  Vector u(theta_s.size(), 0.0);
  for (const Vector& p : partial) axpy(1.0, p, u);
  return u;
}

}  // namespace detail

/// EPK prediction for every row of `x`:
///   f(x; θ₀) + Σ_s Σ_{i∈batch_s} Σ_k a_{i,s,k}·∫₀¹ ⟨∇_θ f(x; θ_s(t)), ∇_θ f_k(x_i; θ_s(0))⟩ dt,
/// evaluated as Σ_s Σ_t w_t·(∇_θ f(x; θ_s(t))·u_s) with u_s the step's weighted training-gradient
/// sum, so each (s, t) costs one forward-mode pass per test point. θ_s(t) = θ_s + t(θ_{s+1} − θ_s).
inline Matrix epk_predict_batch(const TrainingPath& path, const Dataset& ds, const Matrix& x, const EpkConfig& cfg = {}) {
  detail::require_kernel_path(path);
  if (cfg.unfrozen_train_side) throw InvalidInput("epk_predict: unfrozen_train_side applies to kernels only");
  const QuadratureRule q = quadrature(cfg.substeps, cfg.rule);
  const std::size_t K = path.spec.classes();
  Matrix out = forward_batch(path.spec, path.checkpoint(0), x);
  Vector theta_s = path.checkpoint(0);
  for (std::size_t s = 0; s < path.steps(); ++s) {
    const Vector theta_next = path.checkpoint(s + 1);
    const StepBatch b = materialize_batch(path, ds, s);
    const Matrix a = detail::step_weights(path, b, theta_s, path.step_sizes[s]);
    const Vector u = detail::step_direction(path, b, a, theta_s);
    parallel_for(x.rows(), [&](std::size_t p) {
      std::vector<Dual> buf;
      Tape<Dual> tape;
      Vector acc(K, 0.0);
      const QuadratureRule qp = detail::segment_rule(path.spec, theta_s, theta_next, x.row(p), q, cfg.rule, cfg.kink_aware);
      for (std::size_t j = 0; j < qp.nodes.size(); ++j) {
        const Vector th = detail::lerp(theta_s, theta_next, qp.nodes[j]);
        const Vector jv = param_jvp(path.spec, th, u, x.row(p), buf, tape);
        for (std::size_t k = 0; k < K; ++k) acc[k] += qp.weights[j] * jv[k];
      }
      for (std::size_t k = 0; k < K; ++k) out(p, k) += acc[k];
    });
    theta_s = theta_next;
  }
  return out;
}

inline Vector epk_predict(const TrainingPath& path, const Dataset& ds, std::span<const double> x, const EpkConfig& cfg = {}) {
  Matrix xm(1, x.size(), Vector(x.begin(), x.end()));
  const Matrix r = epk_predict_batch(path, ds, xm, cfg);
  return Vector(r.row(0).begin(), r.row(0).end());
}

/// Test-side Jacobians integrated over the segment: ḡ_{s} = Σ_t w_t ∇_θ f(x; θ_s(t)) (K×M).
inline Matrix integrated_jacobian(const ModelSpec& spec, std::span<const double> theta_s, std::span<const double> theta_next,
                                  std::span<const double> x, const EpkConfig& cfg) {
  const QuadratureRule q =
      detail::segment_rule(spec, theta_s, theta_next, x, quadrature(cfg.substeps, cfg.rule), cfg.rule, cfg.kink_aware);
  Matrix acc(spec.classes(), theta_s.size());
  for (std::size_t j = 0; j < q.nodes.size(); ++j) {
    const Vector th = detail::lerp(theta_s, theta_next, q.nodes[j]);
    const Matrix jac = param_jacobian(spec, th, x);
    for (std::size_t k = 0; k < acc.rows(); ++k) axpy(q.weights[j], jac.row(k), acc.row(k));
  }
  return acc;
}

enum class KernelSides { train_frozen, both_test };

/// K×K per-step kernel K_s[c][k] = ∫₀¹ ⟨∇_θ f_c(x; θ_s(t)), ∇_θ f_k(x′; ·)⟩ dt. With
/// `train_frozen` x′ is a training point and its gradient is taken at θ_s(0); with `both_test`
/// both sides are integrated, which gives a symmetric PSD block for x = x′.
inline Matrix epk_step_kernel(const TrainingPath& path, std::size_t s, std::span<const double> x, std::span<const double> x_i,
                              const EpkConfig& cfg = {}, KernelSides sides = KernelSides::train_frozen) {
  if (s >= path.steps()) throw InvalidInput("epk_step_kernel: step out of range");
  const Vector a = path.checkpoint(s), b = path.checkpoint(s + 1);
  const std::size_t K = path.spec.classes();
  Matrix k(K, K);
  const bool integrate_train = sides == KernelSides::both_test || cfg.unfrozen_train_side;
  const QuadratureRule q = detail::segment_rule(path.spec, a, b, x, quadrature(cfg.substeps, cfg.rule), cfg.rule, cfg.kink_aware,
                                                integrate_train ? x_i : std::span<const double>{});
  const Matrix frozen = integrate_train ? Matrix() : param_jacobian(path.spec, a, x_i);
  for (std::size_t j = 0; j < q.nodes.size(); ++j) {
    const Vector th = detail::lerp(a, b, q.nodes[j]);
    const Matrix jx = param_jacobian(path.spec, th, x);
    const Matrix ji = integrate_train ? param_jacobian(path.spec, th, x_i) : Matrix();
    const Matrix& train_side = integrate_train ? ji : frozen;
    const Matrix blk = matmul_nt(jx, train_side);
    for (std::size_t c = 0; c < K; ++c)
      for (std::size_t kk = 0; kk < K; ++kk) k(c, kk) += q.weights[j] * blk(c, kk);
  }
  if (cfg.reduction == ClassReduction::class_sum) {
    double total = 0.0;
    for (double v : k.values()) total += v;
    return Matrix(1, 1, total);
  }
  return k;
}

enum class GramMode { class_sum, per_class, full };

/// Kernel Gram over `points` with every point on the test side:
///   G = Σ_s ε_s Σ_t w_t Φ_{s,t} Φ_{s,t}ᵀ,
/// a non-negative combination of Gram matrices, hence symmetric PSD. class_sum: Φ rows are
/// Σ_c ∇_θ f_c (n×n); per_class: one n×n block per class; full: the nK×nK matrix of all
/// (point, class) pairs.
struct GramMatrix {
  GramMode mode = GramMode::class_sum;
  std::vector<Matrix> blocks;  ///< one entry, or K entries for per_class
  std::vector<std::size_t> ids;
};

inline GramMatrix gram(const TrainingPath& path, const Matrix& points, const EpkConfig& cfg = {}, GramMode mode = GramMode::class_sum,
                       std::vector<std::size_t> ids = {}) {
  detail::require_kernel_path(path);
  const QuadratureRule q = quadrature(cfg.substeps, cfg.rule);
  const std::size_t n = points.rows(), K = path.spec.classes(), M = path.spec.param_count();
  GramMatrix g;
  g.mode = mode;
  if (ids.empty())
    for (std::size_t i = 0; i < n; ++i) ids.push_back(i);
  g.ids = std::move(ids);
  const std::size_t nblocks = mode == GramMode::per_class ? K : 1;
  const std::size_t dim = mode == GramMode::full ? n * K : n;
  g.blocks.assign(nblocks, Matrix(dim, dim));
  Vector theta_s = path.checkpoint(0);
  for (std::size_t s = 0; s < path.steps(); ++s) {
    const Vector theta_next = path.checkpoint(s + 1);
    for (std::size_t j = 0; j < q.nodes.size(); ++j) {
      const Vector th = detail::lerp(theta_s, theta_next, q.nodes[j]);
      std::vector<Matrix> jac(n);
      parallel_for(n, [&](std::size_t p) { jac[p] = param_jacobian(path.spec, th, points.row(p)); });
      const double w = path.step_sizes[s] * q.weights[j];
      if (mode == GramMode::class_sum) {
        Matrix phi(n, M);
        for (std::size_t p = 0; p < n; ++p)
          for (std::size_t k = 0; k < K; ++k) axpy(1.0, jac[p].row(k), phi.row(p));
        const Matrix blk = matmul_nt(phi, phi);
        for (std::size_t e = 0; e < blk.size(); ++e) g.blocks[0].values()[e] += w * blk.values()[e];
      } else {
        Matrix phi(n * K, M);
        for (std::size_t p = 0; p < n; ++p)
          for (std::size_t k = 0; k < K; ++k) std::copy(jac[p].row(k).begin(), jac[p].row(k).end(), phi.row(p * K + k).begin());
        const Matrix blk = matmul_nt(phi, phi);
        if (mode == GramMode::full) {
          for (std::size_t e = 0; e < blk.size(); ++e) g.blocks[0].values()[e] += w * blk.values()[e];
        } else {
          for (std::size_t k = 0; k < K; ++k)
            for (std::size_t a = 0; a < n; ++a)
              for (std::size_t b = 0; b < n; ++b) g.blocks[k](a, b) += w * blk(a * K + k, b * K + k);
        }
      }
    }
    theta_s = theta_next;
  }
  return g;
}

/// Per-training-point breakdown of one prediction: contributions(i, c) is training point i's
/// share of the learned adjustment of class c, summed over the steps it took part in.
struct EpkExplanation {
  Vector prediction;
  Vector initial;  ///< f(x; θ₀)
  Matrix contributions;
};

inline EpkExplanation epk_explain(const TrainingPath& path, const Dataset& ds, std::span<const double> x, const EpkConfig& cfg = {}) {
  detail::require_kernel_path(path);
  if (path.adversarial()) throw InvalidInput("epk_explain: adversarial paths have per-epoch synthetic training points");
  const std::size_t K = path.spec.classes();
  EpkExplanation ex;
  ex.initial = forward(path.spec, path.checkpoint(0), x);
  ex.contributions = Matrix(ds.size(), K);
  Vector theta_s = path.checkpoint(0);
  for (std::size_t s = 0; s < path.steps(); ++s) {
    const Vector theta_next = path.checkpoint(s + 1);
    const Matrix gbar = integrated_jacobian(path.spec, theta_s, theta_next, x, cfg);
    const auto rows = path.batch(s);
    const StepBatch b = materialize_batch(path, ds, s);
    const Matrix a = detail::step_weights(path, b, theta_s, path.step_sizes[s]);
    parallel_for(rows.size(), [&](std::size_t r) {
      const Vector v = param_vjp(path.spec, theta_s, b.inputs.row(r), a.row(r));
      for (std::size_t c = 0; c < K; ++c) ex.contributions(rows[r], c) += dot(gbar.row(c), v);
    });
    theta_s = theta_next;
  }
  ex.prediction = ex.initial;
  for (std::size_t i = 0; i < ds.size(); ++i) axpy(1.0, ex.contributions.row(i), ex.prediction);
  return ex;
}

/// Single-kernel-machine form under a constant loss gradient:
///   f(x) = b + Σ_i Σ_k a_{i,0,k}·K_NEPK(x, x_i)[·][k],  K_NEPK = Σ_s (ε_s/ε₀)·K_EPK(·, ·, s),
/// with a_{i,0} = −ε₀·L′_i and the sum over s restricted to the steps whose batch holds i.
struct KernelWeights {
  Matrix a0;  ///< N×K
  double eps0 = 0.0;
  Vector bias;  ///< f(·; θ₀) at a reference input; constant under zero final-layer init
};

class ReducedKernelMachine {
 public:
  ReducedKernelMachine(const TrainingPath& path, const Dataset& ds, KernelWeights w, EpkConfig cfg)
      : path_(&path), ds_(&ds), weights_(std::move(w)), cfg_(cfg) {}

  const KernelWeights& weights() const noexcept { return weights_; }

  /// K_NEPK(x, x_i) as a K×K matrix.
  Matrix kernel(std::span<const double> x, std::size_t i) const {
    const std::size_t K = path_->spec.classes();
    Matrix k(K, K);
    for (std::size_t s = 0; s < path_->steps(); ++s) {
      const auto rows = path_->batch(s);
      if (std::find(rows.begin(), rows.end(), static_cast<std::uint32_t>(i)) == rows.end()) continue;
      const Matrix ks = epk_step_kernel(*path_, s, x, ds_->x(i), cfg_);
      const double scale = path_->step_sizes[s] / weights_.eps0;
      for (std::size_t e = 0; e < ks.size(); ++e) k.values()[e] += scale * ks.values()[e];
    }
    return k;
  }

  /// f(x; θ₀) + Σ_i K_NEPK(x, x_i)·a_{i,0}. Step-major evaluation: per step the test-side
  /// integrated Jacobian is formed once and contracted with every training Jacobian.
  Vector predict(std::span<const double> x) const {
    const std::size_t K = path_->spec.classes(), N = ds_->size();
    Matrix knepk(N, K * K);  // row i: K_NEPK(x, x_i) flattened
    Vector theta_s = path_->checkpoint(0);
    for (std::size_t s = 0; s < path_->steps(); ++s) {
      const Vector theta_next = path_->checkpoint(s + 1);
      const Matrix gbar = integrated_jacobian(path_->spec, theta_s, theta_next, x, cfg_);
      const double scale = path_->step_sizes[s] / weights_.eps0;
      const auto rows = path_->batch(s);
      parallel_for(rows.size(), [&](std::size_t r) {
        const Matrix ji = param_jacobian(path_->spec, theta_s, ds_->x(rows[r]));
        const Matrix ks = matmul_nt(gbar, ji);
        for (std::size_t e = 0; e < K * K; ++e) knepk(rows[r], e) += scale * ks.values()[e];
      });
      theta_s = theta_next;
    }
    Vector out = forward(path_->spec, path_->checkpoint(0), x);
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t c = 0; c < K; ++c)
        for (std::size_t k = 0; k < K; ++k) out[c] += knepk(i, c * K + k) * weights_.a0(i, k);
    return out;
  }

 private:
  const TrainingPath* path_;
  const Dataset* ds_;
  KernelWeights weights_;
  EpkConfig cfg_;
};

/// Largest step-to-step change of L′(f(x_i; θ_s), y_i) over all training points.
inline double loss_gradient_drift(const TrainingPath& path, const Dataset& ds) {
  const std::size_t K = path.spec.classes();
  Matrix first(ds.size(), K);
  std::vector<char> seen(ds.size(), 0);
  double worst = 0.0;
  for (std::size_t s = 0; s < path.steps(); ++s) {
    const Vector theta = path.checkpoint(s);
    const auto rows = path.batch(s);
    std::vector<double> dev(rows.size(), 0.0);
    std::vector<Vector> lp(rows.size());
    parallel_for(rows.size(), [&](std::size_t r) {
      lp[r] = loss_output_grad(path.config.loss, forward(path.spec, theta, ds.x(rows[r])), ds.y(rows[r]));
    });
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const std::size_t i = rows[r];
      if (!seen[i]) {
        std::copy(lp[r].begin(), lp[r].end(), first.row(i).begin());
        seen[i] = 1;
        continue;
      }
      for (std::size_t k = 0; k < K; ++k) worst = std::max(worst, std::abs(lp[r][k] - first(i, k)));
    }
  }
  return worst;
}

/// Builds the single kernel machine. Throws ReductionInvalid when L′ moves by more than 1e-10
/// anywhere along the path (the reduction needs it constant, as it is for cross-entropy on
/// log-softmax outputs).
inline ReducedKernelMachine reduce_to_kernel_machine(const TrainingPath& path, const Dataset& ds, const EpkConfig& cfg = {}) {
  detail::require_kernel_path(path);
  if (path.adversarial()) throw ReductionInvalid("reduction: adversarial training points change every epoch");
  if (path.steps() == 0) throw InvalidInput("reduction: empty path");
  const double drift = loss_gradient_drift(path, ds);
  if (drift > 1e-10) throw ReductionInvalid("reduction: loss gradient varies along the path (max change " + std::to_string(drift) + ")");
  KernelWeights w;
  w.eps0 = path.step_sizes[0];
  if (!(w.eps0 > 0.0)) throw ReductionInvalid("reduction: first step size must be positive");
  w.a0 = Matrix(ds.size(), path.spec.classes());
  const Vector theta0 = path.checkpoint(0);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Vector lp = loss_output_grad(path.config.loss, forward(path.spec, theta0, ds.x(i)), ds.y(i));
    for (std::size_t k = 0; k < lp.size(); ++k) w.a0(i, k) = -w.eps0 * lp[k];
  }
  w.bias = forward(path.spec, theta0, ds.x(0));
  return ReducedKernelMachine(path, ds, std::move(w), cfg);
}

struct RefitOptions {
  std::size_t iters = 200;
  double lr = 0.0;  ///< 0: 1/λ_max(G)
};

struct RefitResult {
  Matrix a;  ///< n×K weights of the returned iterate
  Vector bias;
  double initial_accuracy = 0.0;
  double accuracy = 0.0;
  std::vector<double> loss_trace;
  bool diverged = false;
};

/// Kernel machine z_j = b + Σ_i G[j][i]·a_i on a class-summed Gram over the training points,
/// refit by gradient descent on mean cross-entropy. The best-accuracy iterate is returned, so
/// the result never scores below the starting weights.
inline RefitResult refit_kernel_weights(const Matrix& g, const std::vector<int>& labels, const Matrix& a_init, const Vector& bias,
                                        const RefitOptions& opt = {}) {
  const std::size_t n = g.rows(), K = a_init.cols();
  if (g.cols() != n || a_init.rows() != n || labels.size() != n || bias.size() != K)
    throw InvalidInput("refit_kernel_weights: shape mismatch");
  double lr = opt.lr;
  if (lr <= 0.0) {
    const double lmax = sym_eigen(g).values.front();
    lr = lmax > 0 ? static_cast<double>(n) / lmax : 1.0;
  }
  auto evaluate = [&](const Matrix& a, Matrix& probs) {
    const Matrix z = matmul(g, a);
    probs = Matrix(n, K);
    double loss = 0.0;
    std::size_t hits = 0;
    for (std::size_t j = 0; j < n; ++j) {
      Vector zj(K);
      for (std::size_t k = 0; k < K; ++k) zj[k] = z(j, k) + bias[k];
      const double m = *std::max_element(zj.begin(), zj.end());
      double s = 0.0;
      for (double v : zj) s += std::exp(v - m);
      for (std::size_t k = 0; k < K; ++k) probs(j, k) = std::exp(zj[k] - m) / s;
      loss -= std::log(std::max(probs(j, static_cast<std::size_t>(labels[j])), 1e-300));
      hits += argmax(zj) == static_cast<std::size_t>(labels[j]);
    }
    return std::pair{loss / static_cast<double>(n), static_cast<double>(hits) / static_cast<double>(n)};
  };
  RefitResult res;
  Matrix a = a_init, probs;
  auto [loss, acc] = evaluate(a, probs);
  res.initial_accuracy = res.accuracy = acc;
  res.a = a;
  res.bias = bias;
  res.loss_trace.push_back(loss);
  for (std::size_t it = 0; it < opt.iters; ++it) {
    // ∂/∂a = Gᵀ(P − Y)/n, G symmetric
    Matrix resid = probs;
    for (std::size_t j = 0; j < n; ++j) resid(j, static_cast<std::size_t>(labels[j])) -= 1.0;
    const Matrix grad = matmul(g, resid);
    for (std::size_t e = 0; e < a.size(); ++e) a.values()[e] -= lr / static_cast<double>(n) * grad.values()[e];
    std::tie(loss, acc) = evaluate(a, probs);
    if (!std::isfinite(loss)) {
      res.diverged = true;
      break;
    }
    res.loss_trace.push_back(loss);
    if (acc > res.accuracy) {
      res.accuracy = acc;
      res.a = a;
    }
  }
  return res;
}

/// Monte-Carlo spread of softmax probabilities under independent per-class logit fields
/// z_c ~ N(0, G). G is made PSD by flooring negative eigenvalues at 0. Returns n×K standard
/// deviations.
inline Matrix gp_logit_std(const Matrix& g, std::size_t classes, std::size_t n_draws, Rng& rng) {
  const std::size_t n = g.rows();
  if (g.cols() != n || classes < 2 || n_draws < 2) throw InvalidInput("gp_logit_std: bad arguments");
  const SymEigenResult eig = sym_eigen(g);
  Matrix l(n, n);  // V·√Λ
  for (std::size_t j = 0; j < n; ++j) {
    const double s = std::sqrt(std::max(eig.values[j], 0.0));
    for (std::size_t i = 0; i < n; ++i) l(i, j) = eig.vectors(i, j) * s;
  }
  Matrix sum(n, classes), sum2(n, classes);
  for (std::size_t d = 0; d < n_draws; ++d) {
    const Matrix z = standard_normal_matrix(rng, classes, n);
    Matrix logits(n, classes);
    for (std::size_t c = 0; c < classes; ++c) {
      const Vector f = matvec(l, z.row(c));
      for (std::size_t i = 0; i < n; ++i) logits(i, c) = f[i];
    }
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = logits.row(i);
      const double m = *std::max_element(row.begin(), row.end());
      double s = 0.0;
      for (double v : row) s += std::exp(v - m);
      for (std::size_t c = 0; c < classes; ++c) {
        const double p = std::exp(row[c] - m) / s;
        sum(i, c) += p;
        sum2(i, c) += p * p;
      }
    }
  }
  Matrix sd(n, classes);
  const double nd = static_cast<double>(n_draws);
  for (std::size_t e = 0; e < sd.size(); ++e) {
    const double mean = sum.values()[e] / nd;
    sd.values()[e] = std::sqrt(std::max(0.0, (sum2.values()[e] / nd - mean * mean) * nd / (nd - 1)));
  }
  return sd;
}

struct ConvergenceRow {
  std::size_t substeps = 0;
  std::string label;
  double max_err = 0.0;
  double mean_err = 0.0;
};

/// EPK-vs-model error for each T. T = 1 uses the left endpoint (the discrete path kernel);
/// larger T use cfg.rule.
inline std::vector<ConvergenceRow> epk_convergence_study(const TrainingPath& path, const Dataset& ds, const Matrix& test,
                                                         const std::vector<std::size_t>& t_list, EpkConfig cfg = {}) {
  const Matrix model = forward_batch(path.spec, path.final_theta, test);
  std::vector<ConvergenceRow> rows;
  for (std::size_t T : t_list) {
    EpkConfig c = cfg;
    c.substeps = T;
    if (T == 1) c.rule = Quadrature::left;
    const Matrix e = epk_predict_batch(path, ds, test, c);
    ConvergenceRow r{T, T == 1 ? "DPK" : "EPK", 0.0, 0.0};
    for (std::size_t i = 0; i < e.size(); ++i) {
      const double d = std::abs(e.values()[i] - model.values()[i]);
      r.max_err = std::max(r.max_err, d);
      r.mean_err += d;
    }
    r.mean_err /= static_cast<double>(std::max<std::size_t>(1, e.size()));
    rows.push_back(r);
  }
  return rows;
}

}  // namespace epk
