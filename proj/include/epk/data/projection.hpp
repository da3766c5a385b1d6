#pragma once

#include "epk/data/dataset.hpp"
#include "epk/error.hpp"
#include "epk/numerics/matrix.hpp"
#include "epk/numerics/pca.hpp"

namespace epk {

/// Replaces every input x by x·WᵀW, the orthogonal projection onto span(rows of W).
/// W must have orthonormal rows.
inline Dataset project_dataset(const Dataset& ds, const Matrix& components, std::string name = "projected") {
  if (components.cols() != ds.dim()) throw InvalidInput("project_dataset: component width differs from input dimension");
  // x·WᵀW computed as (x·Wᵀ)·W to stay O(N·k·d).
  const Matrix coords = matmul_nt(ds.inputs, components);
  Matrix projected = matmul(coords, components);
  return make_dataset(std::move(projected), ds.labels, ds.classes(), std::move(name));
}

/// PMNIST-style construction: global PCA on the training inputs, both splits projected onto the
/// top-k components.
struct ProjectedPair {
  Dataset train;
  Dataset test;
  PcaModel pca;
};

inline ProjectedPair make_projected_pair(const Dataset& train, const Dataset& test, std::size_t k) {
  PcaModel pca = pca_fit(train.inputs, k);
  Dataset ptrain = project_dataset(train, pca.components, train.name + "-proj" + std::to_string(k));
  Dataset ptest = project_dataset(test, pca.components, test.name + "-proj" + std::to_string(k));
  return {std::move(ptrain), std::move(ptest), std::move(pca)};
}

}  // namespace epk
