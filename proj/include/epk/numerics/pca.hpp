#pragma once

#include "epk/error.hpp"
#include "epk/numerics/linalg.hpp"
#include "epk/numerics/matrix.hpp"

namespace epk {

struct PcaModel {
  Vector mean;              ///< column means of the fitted data
  Matrix components;        ///< k×d, orthonormal rows
  Vector explained;         ///< variance along each component (σ²/(N-1))
  double total_variance = 0;  ///< trace of the sample covariance
};

inline Vector column_means(const Matrix& x) {
  Vector mean(x.cols(), 0.0);
  for (std::size_t r = 0; r < x.rows(); ++r) axpy(1.0, x.row(r), mean);
  for (double& m : mean) m /= static_cast<double>(x.rows());
  return mean;
}

/// Top-k principal axes of the column-centred data (right singular vectors).
inline PcaModel pca_fit(const Matrix& x, std::size_t k) {
  if (x.rows() < 2 || k == 0 || k > std::min(x.rows(), x.cols()))
    throw InvalidInput("pca_fit: need 1 <= k <= min(N, d) and N >= 2");
  PcaModel model;
  model.mean = column_means(x);
  Matrix centred = x;
  for (std::size_t r = 0; r < x.rows(); ++r) axpy(-1.0, model.mean, centred.row(r));
  const SvdResult dec = svd(centred);
  const double denom = static_cast<double>(x.rows() - 1);
  model.components = Matrix(k, x.cols());
  for (std::size_t i = 0; i < k; ++i) {
    auto src = dec.Vt.row(i);
    std::copy(src.begin(), src.end(), model.components.row(i).begin());
    model.explained.push_back(dec.s[i] * dec.s[i] / denom);
  }
  model.total_variance = dot(centred.values(), centred.values()) / denom;
  return model;
}

/// Projector WᵀW for orthonormal rows W.
inline Matrix projector(const Matrix& components) { return matmul_tn(components, components); }

}  // namespace epk
