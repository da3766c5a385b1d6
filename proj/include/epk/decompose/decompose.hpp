#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "epk/error.hpp"
#include "epk/numerics/linalg.hpp"
#include "epk/pathkernel/epk.hpp"

namespace epk {

/// Which training steps contribute gradients.
struct StepSelection {
  enum class Kind { final_step, all, stride } kind = Kind::final_step;
  std::size_t stride = 1;

  static StepSelection final_only() { return {}; }
  static StepSelection every() { return {Kind::all, 1}; }
  static StepSelection every_nth(std::size_t n) { return {Kind::stride, n}; }

  std::vector<std::size_t> steps(std::size_t S) const {
    std::vector<std::size_t> out;
    if (S == 0) return out;
    if (kind == Kind::final_step) return {S - 1};
    const std::size_t h = kind == Kind::all ? 1 : stride;
    if (h == 0) throw InvalidInput("StepSelection: stride must be >= 1");
    for (std::size_t s = 0; s < S; s += h) out.push_back(s);
    return out;
  }
};

/// Rows of the stacked training-gradient matrix for step s. With class_sum, row r is
/// J(x_r; θ_s)ᵀ a_{r,s}, the r-th batch example's share of the parameter update. With full, every
/// example contributes its K Jacobian rows ∇_θ f_k(x_r; θ_s) (a superset span; under CCE the
/// weighted per-class rows vanish off the true class, so they are left unweighted).
inline Matrix training_gradient_rows(const TrainingPath& path, const Dataset& ds, std::size_t s,
                                     ClassReduction reduction = ClassReduction::class_sum) {
  detail::require_kernel_path(path);
  if (s >= path.steps()) throw InvalidInput("training_gradient_rows: step out of range");
  const Vector theta_s = path.checkpoint(s);
  const StepBatch b = materialize_batch(path, ds, s);
  const std::size_t n = b.inputs.rows(), M = theta_s.size(), K = path.spec.classes();
  if (reduction == ClassReduction::class_sum) {
    const Matrix a = detail::step_weights(path, b, theta_s, path.step_sizes[s]);
    Matrix rows(n, M);
    parallel_for(n, [&](std::size_t r) {
      const Vector g = param_vjp(path.spec, theta_s, b.inputs.row(r), a.row(r));
      std::copy(g.begin(), g.end(), rows.row(r).begin());
    });
    return rows;
  }
  Matrix rows(n * K, M);
  parallel_for(n, [&](std::size_t r) {
    const Matrix j = param_jacobian(path.spec, theta_s, b.inputs.row(r));
    for (std::size_t k = 0; k < K; ++k) std::copy(j.row(k).begin(), j.row(k).end(), rows.row(r * K + k).begin());
  });
  return rows;
}

struct GradientBasis {
  Matrix v;                  ///< r×M, orthonormal rows
  Vector singular_values;    ///< full spectrum of the stacked matrix (numerical rank)
  double threshold = 0.95;
  std::vector<std::size_t> steps;

  std::size_t rank() const noexcept { return v.rows(); }
};

namespace detail {

/// Numerical rank of a non-increasing spectrum.
inline std::size_t numerical_rank(std::span<const double> s, std::size_t m, std::size_t n) {
  if (s.empty() || !(s[0] > 0.0)) return 0;
  const double tol = static_cast<double>(std::max(m, n)) * std::numeric_limits<double>::epsilon() * s[0];
  std::size_t r = 0;
  while (r < s.size() && s[r] > tol) ++r;
  return r;
}

}  // namespace detail

/// Truncated right singular vectors of the stacked training gradients, keeping the fewest
/// components whose σ² share reaches `threshold` (threshold 1 keeps the numerical rank).
inline GradientBasis training_grad_basis(const TrainingPath& path, const Dataset& ds, StepSelection sel = {},
                                         double threshold = 0.95, ClassReduction reduction = ClassReduction::class_sum) {
  if (!(threshold > 0.0 && threshold <= 1.0)) throw InvalidInput("training_grad_basis: threshold must lie in (0, 1]");
  GradientBasis basis;
  basis.threshold = threshold;
  basis.steps = sel.steps(path.steps());
  if (basis.steps.empty()) throw InvalidInput("training_grad_basis: empty step selection");
  std::vector<Matrix> blocks;
  std::size_t total = 0;
  for (std::size_t s : basis.steps) {
    blocks.push_back(training_gradient_rows(path, ds, s, reduction));
    total += blocks.back().rows();
  }
  const std::size_t M = path.spec.param_count();
  Matrix a(total, M);
  std::size_t off = 0;
  for (const Matrix& b : blocks)
    for (std::size_t r = 0; r < b.rows(); ++r, ++off) std::copy(b.row(r).begin(), b.row(r).end(), a.row(off).begin());
  blocks.clear();
  const SvdResult sv = svd(a);
  const std::size_t rank = detail::numerical_rank(sv.s, a.rows(), a.cols());
  if (rank == 0) throw NumericalError("training_grad_basis: all training gradients vanish");
  basis.singular_values.assign(sv.s.begin(), sv.s.begin() + static_cast<std::ptrdiff_t>(rank));
  const std::size_t r = threshold >= 1.0 ? rank : components_for(basis.singular_values, threshold);
  basis.v = Matrix(r, M);
  for (std::size_t i = 0; i < r; ++i) std::copy(sv.Vt.row(i).begin(), sv.Vt.row(i).end(), basis.v.row(i).begin());
  return basis;
}

/// Label-free test gradient: Σ_k L′_k·∇_θ f_k(x) with L′ taken against the model's own
/// prediction.
inline Vector ood_gradient(const ModelSpec& spec, std::span<const double> theta, std::span<const double> x) {
  const Vector f = forward(spec, theta, x);
  Vector y(f.size(), 0.0);
  y[argmax(f)] = 1.0;
  return backprop_param_grad(spec, theta, x, y);
}

struct OodScore {
  double projection_norm = 0.0;
  double residual_norm = 0.0;
  double score = std::numeric_limits<double>::quiet_NaN();  ///< ‖residual‖/‖g‖ ∈ [0, 1]
  bool defined = false;                                      ///< false for a zero gradient
};

inline OodScore ood_score(const GradientBasis& basis, std::span<const double> g) {
  if (g.size() != basis.v.cols()) throw InvalidInput("ood_score: gradient dimension does not match the basis");
  const Vector c = matvec(basis.v, g);
  const Vector proj = matvec_t(basis.v, c);
  OodScore out;
  double res2 = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) res2 += (g[i] - proj[i]) * (g[i] - proj[i]);
  out.projection_norm = norm2(c);
  out.residual_norm = std::sqrt(res2);
  const double ng = norm2(g);
  if (ng > 0.0) {
    out.score = std::clamp(out.residual_norm / ng, 0.0, 1.0);
    out.defined = true;
  }
  return out;
}

/// Mann–Whitney AUROC of `positive` scoring above `negative` (ties count one half).
inline double auroc(std::span<const double> negative, std::span<const double> positive) {
  if (negative.empty() || positive.empty()) throw InvalidInput("auroc: both groups must be non-empty");
  std::vector<double> neg(negative.begin(), negative.end());
  std::sort(neg.begin(), neg.end());
  double wins = 0.0;
  for (double p : positive) {
    const auto lo = std::lower_bound(neg.begin(), neg.end(), p);
    const auto hi = std::upper_bound(lo, neg.end(), p);
    wins += static_cast<double>(lo - neg.begin()) + 0.5 * static_cast<double>(hi - lo);
  }
  return wins / (static_cast<double>(neg.size()) * static_cast<double>(positive.size()));
}

/// Per-training-point input sensitivities of a test prediction's learned adjustment.
/// blocks[c](j, ·) = Σ_s ∂/∂x_j [a_{j,s}ᵀ J(x_j; θ_s) ḡ_{s,c}] with ḡ_{s,c} the integrated test
/// gradient of class c (blocks has one class-summed entry under class_sum). Quadrature settings
/// come from cfg. Each step stores only ḡ, and the mixed derivative comes from one
/// dual-parameter reverse pass per point.
struct InputGradients {
  ClassReduction reduction = ClassReduction::class_sum;
  std::vector<Matrix> blocks;  ///< N×d each
};

inline InputGradients input_grad_matrix(const TrainingPath& path, const Dataset& ds, std::span<const double> x_test,
                                        ClassReduction reduction = ClassReduction::class_sum, const EpkConfig& cfg = {}) {
  detail::require_kernel_path(path);
  if (path.adversarial()) throw InvalidInput("input_grad_matrix: adversarial paths have synthetic training points");
  // the ∂L′/∂x_j term is zero only when L′ does not depend on the input
  if (path.config.loss != LossKind::cce) throw InvalidInput("input_grad_matrix: only cross-entropy paths are supported");
  const std::size_t K = path.spec.classes(), N = ds.size(), d = ds.dim(), M = path.spec.param_count();
  const std::size_t C = reduction == ClassReduction::class_sum ? 1 : K;
  InputGradients out;
  out.reduction = reduction;
  out.blocks.assign(C, Matrix(N, d));
  Vector theta_s = path.checkpoint(0);
  for (std::size_t s = 0; s < path.steps(); ++s) {
    const Vector theta_next = path.checkpoint(s + 1);
    const Matrix gbar = integrated_jacobian(path.spec, theta_s, theta_next, x_test, cfg);
    std::vector<Vector> dirs(C, Vector(M, 0.0));
    for (std::size_t c = 0; c < K; ++c) axpy(1.0, gbar.row(c), dirs[C == 1 ? 0 : c]);
    const auto rows = path.batch(s);
    const StepBatch b = materialize_batch(path, ds, s);
    const Matrix a = detail::step_weights(path, b, theta_s, path.step_sizes[s]);
    parallel_for(rows.size(), [&](std::size_t r) {
      std::vector<Dual> th(M), xd(b.inputs.row(r).begin(), b.inputs.row(r).end()), cot(K), gx(d);
      Tape<Dual> tape;
      for (std::size_t k = 0; k < K; ++k) cot[k] = Dual(a(r, k));
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t p = 0; p < M; ++p) th[p] = Dual(theta_s[p], dirs[c][p]);
        forward_tape<Dual>(path.spec, th, xd, tape);
        std::fill(gx.begin(), gx.end(), Dual{});
        backward_tape<Dual>(path.spec, th, tape, cot, {}, gx);
        auto row = out.blocks[c].row(rows[r]);
        for (std::size_t j = 0; j < d; ++j) row[j] += gx[j].d;
      }
    });
    theta_s = theta_next;
  }
  return out;
}

struct SignalSpectrum {
  std::size_t point_id = 0;
  Vector singular_values;
  Vector cdf;  ///< cumulative σ² share
  std::size_t n95 = 0;
  Matrix components;  ///< leading right singular vectors (n95 × d)
};

/// SVD of a training-sensitivity matrix; n95 is the fewest components reaching 95% of σ².
inline SignalSpectrum signal_dimension(const Matrix& g, std::size_t point_id = 0, double threshold = 0.95) {
  if (g.rows() == 0 || g.cols() == 0) throw InvalidInput("signal_dimension: empty matrix");
  bool nonzero = false;
  for (double v : g.values()) nonzero |= v != 0.0;
  if (!nonzero) throw InvalidInput("signal_dimension: G is zero");
  const SvdResult sv = svd(g);
  SignalSpectrum out;
  out.point_id = point_id;
  out.singular_values = sv.s;
  out.cdf = explained_variance_cdf(sv.s);
  out.n95 = std::min(components_for(sv.s, threshold), detail::numerical_rank(sv.s, g.rows(), g.cols()));
  out.components = Matrix(out.n95, g.cols());
  for (std::size_t i = 0; i < out.n95; ++i) std::copy(sv.Vt.row(i).begin(), sv.Vt.row(i).end(), out.components.row(i).begin());
  return out;
}

struct Alignment {
  Vector overlap;             ///< ‖P_A v_j‖² for B's j-th leading component
  Vector cosines;             ///< cosines of the principal angles between the two subspaces
  double mean_overlap = 0.0;  ///< mean of `overlap`
  double chance = 0.0;        ///< r_A/d, the expected overlap of a random direction
};

/// How much of each of B's leading components (rows of comp_b) lies in the span of A's
/// leading components (rows of comp_a). Both inputs must have orthonormal rows.
inline Alignment subspace_alignment(const Matrix& comp_a, const Matrix& comp_b) {
  if (comp_a.cols() != comp_b.cols()) throw InvalidInput("cross_model_alignment: dimension mismatch");
  if (comp_a.rows() == 0 || comp_b.rows() == 0) throw InvalidInput("cross_model_alignment: empty component set");
  Alignment out;
  const Matrix c = matmul_nt(comp_b, comp_a);  // rb×ra
  out.overlap.assign(comp_b.rows(), 0.0);
  for (std::size_t j = 0; j < c.rows(); ++j) {
    double acc = 0.0;
    for (double v : c.row(j)) acc += v * v;
    out.overlap[j] = std::min(acc, 1.0);
  }
  out.cosines = svd(c).s;
  for (double& v : out.cosines) v = std::min(v, 1.0);
  double sum = 0.0;
  for (double v : out.overlap) sum += v;
  out.mean_overlap = sum / static_cast<double>(out.overlap.size());
  out.chance = static_cast<double>(comp_a.rows()) / static_cast<double>(comp_a.cols());
  return out;
}

/// Alignment of model B's top `top_b` sensitivity directions with model A's top `top_a`.
inline Alignment cross_model_alignment(const Matrix& g_a, const Matrix& g_b, std::size_t top_a, std::size_t top_b) {
  if (g_a.cols() != g_b.cols()) throw InvalidInput("cross_model_alignment: dimension mismatch");
  const SvdResult sa = svd(g_a), sb = svd(g_b);
  top_a = std::min(top_a, sa.Vt.rows());
  top_b = std::min(top_b, sb.Vt.rows());
  if (top_a == 0 || top_b == 0) throw InvalidInput("cross_model_alignment: need at least one component per model");
  Matrix a(top_a, g_a.cols()), b(top_b, g_b.cols());
  for (std::size_t i = 0; i < top_a; ++i) std::copy(sa.Vt.row(i).begin(), sa.Vt.row(i).end(), a.row(i).begin());
  for (std::size_t i = 0; i < top_b; ++i) std::copy(sb.Vt.row(i).begin(), sb.Vt.row(i).end(), b.row(i).begin());
  return subspace_alignment(a, b);
}

inline void write_spectrum_csv(const std::string& path, const SignalSpectrum& sp) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInput("write_spectrum_csv: cannot open " + path);
  out.precision(17);
  out << "component,sigma,cdf\n";
  for (std::size_t i = 0; i < sp.singular_values.size(); ++i) out << i << ',' << sp.singular_values[i] << ',' << sp.cdf[i] << '\n';
}

/// `is_ood` is written as 0/1, or left empty when unknown (-1).
inline void write_ood_csv(const std::string& path, const std::vector<OodScore>& scores, const std::vector<int>& is_ood) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInput("write_ood_csv: cannot open " + path);
  out.precision(17);
  out << "point_id,score,is_ood\n";
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out << i << ',';
    if (scores[i].defined) out << scores[i].score;
    else out << "nan";
    out << ',';
    if (i < is_ood.size() && is_ood[i] >= 0) out << is_ood[i];
    out << '\n';
  }
}

}  // namespace epk
