#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "epk/error.hpp"
#include "epk/numerics/matrix.hpp"

namespace epk {

/// Reduced SVD A = U·diag(s)·Vt with r = min(rows, cols).
struct SvdResult {
  Matrix U;   ///< m×r, orthonormal columns
  Vector s;   ///< r values, non-increasing, non-negative
  Matrix Vt;  ///< r×n, orthonormal rows
};

struct SymEigenResult {
  Vector values;   ///< descending
  Matrix vectors;  ///< column j is the eigenvector of values[j]
};

namespace detail {

// Column-major scratch: cols[j] is column j.
using Columns = std::vector<Vector>;

inline Columns to_columns(const Matrix& a) {
  Columns c(a.cols(), Vector(a.rows()));
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t j = 0; j < a.cols(); ++j) c[j][r] = a(r, j);
  return c;
}

/// Householder QR in place; returns reflectors (v_j acts on rows j..m-1) and leaves R in the
/// upper triangle of cols.
inline std::vector<Vector> householder_qr(Columns& cols, std::size_t m) {
  const std::size_t n = cols.size();
  std::vector<Vector> reflectors(n);
  for (std::size_t j = 0; j < n; ++j) {
    Vector v(cols[j].begin() + j, cols[j].end());
    double norm_x = norm2(v);
    if (norm_x == 0.0) {
      reflectors[j] = Vector(m - j, 0.0);
      continue;
    }
    v[0] += (v[0] >= 0 ? norm_x : -norm_x);
    double nv = norm2(v);
    for (double& e : v) e /= nv;
    for (std::size_t k = j; k < n; ++k) {
      std::span<double> tail(cols[k].data() + j, m - j);
      double proj = 2.0 * dot(v, tail);
      axpy(-proj, v, tail);
    }
    for (std::size_t r = j + 1; r < m; ++r) cols[j][r] = 0.0;
    reflectors[j] = std::move(v);
  }
  return reflectors;
}

inline void apply_q(const std::vector<Vector>& reflectors, Vector& u) {
  for (std::size_t jj = reflectors.size(); jj-- > 0;) {
    const Vector& v = reflectors[jj];
    std::span<double> tail(u.data() + jj, v.size());
    double proj = 2.0 * dot(v, tail);
    if (proj != 0.0) axpy(-proj, v, tail);
  }
}

/// Hestenes one-sided Jacobi on the columns of w (each of length m). Rotations are accumulated
/// into v (column-major, n columns of length n).
inline void one_sided_jacobi(Columns& w, Columns& v) {
  const std::size_t n = w.size();
  const std::size_t m = n ? w[0].size() : 0;
  const double tol = std::min(1e-12, std::max<double>(m, 1) * std::numeric_limits<double>::epsilon());
  for (int sweep = 0; sweep < 80; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double alpha = dot(w[p], w[p]);
        const double beta = dot(w[q], w[q]);
        if (alpha == 0.0 || beta == 0.0) continue;
        const double gamma = dot(w[p], w[q]);
        if (std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double wp = w[p][i], wq = w[q][i];
          w[p][i] = c * wp - s * wq;
          w[q][i] = s * wp + c * wq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vp = v[p][i], vq = v[q][i];
          v[p][i] = c * vp - s * vq;
          v[q][i] = s * vp + c * vq;
        }
      }
    }
    if (!rotated) return;
  }
}

/// Extends the orthonormal set `basis` by a unit vector orthogonal to all of it.
inline Vector orthonormal_completion(const Columns& basis, std::size_t m) {
  Vector best;
  double best_norm = -1.0;
  for (std::size_t e = 0; e < m; ++e) {
    Vector cand(m, 0.0);
    cand[e] = 1.0;
    for (int pass = 0; pass < 2; ++pass)
      for (const Vector& b : basis) axpy(-dot(b, cand), b, cand);
    double nrm = norm2(cand);
    if (nrm > best_norm) {
      best_norm = nrm;
      best = std::move(cand);
    }
    if (best_norm > 0.5) break;
  }
  for (double& x : best) x /= best_norm;
  return best;
}

inline SvdResult svd_tall(const Matrix& a) {
  const std::size_t m = a.rows(), n = a.cols();
  Columns w = to_columns(a);
  std::vector<Vector> reflectors;
  const bool precondition = m >= 2 * n;
  if (precondition) {
    reflectors = householder_qr(w, m);
    for (auto& col : w) col.resize(n);  // keep R
  }
  const std::size_t work_rows = precondition ? n : m;
  Columns v(n, Vector(n, 0.0));
  for (std::size_t j = 0; j < n; ++j) v[j][j] = 1.0;
  one_sided_jacobi(w, v);

  std::vector<double> sig(n);
  for (std::size_t j = 0; j < n; ++j) sig[j] = norm2(w[j]);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return sig[x] > sig[y]; });

  const double smax = n ? sig[order[0]] : 0.0;
  const double cutoff = smax * std::numeric_limits<double>::epsilon() * 16.0 * static_cast<double>(std::max(m, n));
  SvdResult out{Matrix(m, n), Vector(n), Matrix(n, n)};
  Columns ucols;
  ucols.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    out.s[k] = sig[j];
    for (std::size_t c = 0; c < n; ++c) out.Vt(k, c) = v[j][c];
    Vector u;
    if (sig[j] > cutoff && sig[j] > 0.0) {
      u.resize(work_rows);
      for (std::size_t i = 0; i < work_rows; ++i) u[i] = w[j][i] / sig[j];
      if (precondition) {
        u.resize(m, 0.0);
        apply_q(reflectors, u);
      }
      // Re-orthogonalize against earlier columns to absorb rounding from tiny singular values.
      for (const Vector& b : ucols) axpy(-dot(b, u), b, u);
      double nu = norm2(u);
      for (double& x : u) x /= nu;
    } else {
      u = orthonormal_completion(ucols, m);
    }
    ucols.push_back(std::move(u));
  }
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < m; ++i) out.U(i, k) = ucols[k][i];
  return out;
}

}  // namespace detail

/// Singular value decomposition by one-sided Jacobi (Householder-QR preconditioned when the
/// matrix is much taller than wide). Throws InvalidInput on empty or non-finite input.
inline SvdResult svd(const Matrix& a) {
  if (a.rows() == 0 || a.cols() == 0) throw InvalidInput("svd: empty matrix");
  if (!a.all_finite()) throw InvalidInput("svd: non-finite entry");
  if (a.rows() >= a.cols()) return detail::svd_tall(a);
  SvdResult t = detail::svd_tall(transpose(a));
  return SvdResult{transpose(t.Vt), std::move(t.s), transpose(t.U)};
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
inline SymEigenResult sym_eigen(const Matrix& a_in) {
  const std::size_t n = a_in.rows();
  if (n != a_in.cols()) throw InvalidInput("sym_eigen: matrix not square");
  if (!a_in.all_finite()) throw InvalidInput("sym_eigen: non-finite entry");
  Matrix a = a_in;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) a(i, j) = a(j, i) = 0.5 * (a(i, j) + a(j, i));
  Matrix v = Matrix::identity(n);
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0, diag = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      diag += a(i, i) * a(i, i);
      for (std::size_t j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
    }
    if (off <= 1e-30 * std::max(diag, 1e-300)) break;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a(x, x) > a(y, y); });
  SymEigenResult out{Vector(n), Matrix(n, n)};
  for (std::size_t k = 0; k < n; ++k) {
    out.values[k] = a(order[k], order[k]);
    for (std::size_t i = 0; i < n; ++i) out.vectors(i, k) = v(i, order[k]);
  }
  return out;
}

/// Cumulative σ²-fraction of a singular-value spectrum.
inline Vector explained_variance_cdf(std::span<const double> singular_values) {
  Vector cdf(singular_values.size());
  double total = 0.0;
  for (double s : singular_values) total += s * s;
  double acc = 0.0;
  for (std::size_t i = 0; i < singular_values.size(); ++i) {
    acc += singular_values[i] * singular_values[i];
    cdf[i] = total > 0 ? acc / total : 0.0;
  }
  if (total > 0 && !cdf.empty()) cdf.back() = 1.0;
  return cdf;
}

/// Smallest r such that the first r components explain at least `threshold` of σ².
inline std::size_t components_for(std::span<const double> singular_values, double threshold) {
  Vector cdf = explained_variance_cdf(singular_values);
  for (std::size_t i = 0; i < cdf.size(); ++i)
    if (cdf[i] >= threshold) return i + 1;
  return cdf.size();
}

}  // namespace epk
