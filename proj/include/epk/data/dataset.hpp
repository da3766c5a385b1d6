#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "epk/error.hpp"
#include "epk/numerics/matrix.hpp"
#include "epk/numerics/rng.hpp"

namespace epk {

/// Labelled inputs. `one_hot` is derived from `labels` and kept in sync by construction.
struct Dataset {
  Matrix inputs;  ///< N×d
  std::vector<int> labels;
  Matrix one_hot;  ///< N×K
  std::string name;

  std::size_t size() const noexcept { return inputs.rows(); }
  std::size_t dim() const noexcept { return inputs.cols(); }
  std::size_t classes() const noexcept { return one_hot.cols(); }
  std::span<const double> x(std::size_t i) const { return inputs.row(i); }
  std::span<const double> y(std::size_t i) const { return one_hot.row(i); }
};

inline Matrix one_hot_encode(const std::vector<int>& labels, std::size_t classes) {
  Matrix y(labels.size(), classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes)
      throw InvalidInput("one_hot_encode: label out of range");
    y(i, static_cast<std::size_t>(labels[i])) = 1.0;
  }
  return y;
}

inline Dataset make_dataset(Matrix inputs, std::vector<int> labels, std::size_t classes, std::string name) {
  if (inputs.rows() != labels.size()) throw InvalidInput("make_dataset: input/label count mismatch");
  Matrix y = one_hot_encode(labels, classes);
  return Dataset{std::move(inputs), std::move(labels), std::move(y), std::move(name)};
}

/// Rows `indices` of ds, in order.
inline Dataset subset(const Dataset& ds, const std::vector<std::size_t>& indices, std::string name = {}) {
  Matrix x(indices.size(), ds.dim());
  std::vector<int> labels(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= ds.size()) throw InvalidInput("subset: index out of range");
    auto src = ds.x(indices[i]);
    std::copy(src.begin(), src.end(), x.row(i).begin());
    labels[i] = ds.labels[indices[i]];
  }
  return make_dataset(std::move(x), std::move(labels), ds.classes(), name.empty() ? ds.name : std::move(name));
}

inline Dataset head(const Dataset& ds, std::size_t n) {
  std::vector<std::size_t> idx(std::min(n, ds.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return subset(ds, idx);
}

/// `per_class` draws from N(means[c], σ²I) for every class c, labelled by component and stored
/// class-major.
inline Dataset gen_gaussian_mixture(Rng& rng, const std::vector<Vector>& means, double sigma, std::size_t per_class,
                                    std::string name = "gaussian-mixture") {
  if (means.empty()) throw InvalidInput("gen_gaussian_mixture: no means given");
  const std::size_t d = means.front().size();
  for (const Vector& m : means)
    if (m.size() != d) throw InvalidInput("gen_gaussian_mixture: means differ in dimension");
  Matrix x(means.size() * per_class, d);
  std::vector<int> labels(x.rows());
  for (std::size_t c = 0; c < means.size(); ++c) {
    Matrix block = gaussian_sample(rng, means[c], sigma, per_class);
    for (std::size_t r = 0; r < per_class; ++r) {
      std::copy(block.row(r).begin(), block.row(r).end(), x.row(c * per_class + r).begin());
      labels[c * per_class + r] = static_cast<int>(c);
    }
  }
  return make_dataset(std::move(x), std::move(labels), means.size(), std::move(name));
}

/// Means (1,4,0,…), (4,1,0,…), (5,5,0,…) embedded in `dim` dimensions.
inline std::vector<Vector> toy_means(std::size_t dim = 100) {
  if (dim < 2) throw InvalidInput("toy_means: need at least 2 dimensions");
  std::vector<Vector> means(3, Vector(dim, 0.0));
  means[0][0] = 1, means[0][1] = 4;
  means[1][0] = 4, means[1][1] = 1;
  means[2][0] = 5, means[2][1] = 5;
  return means;
}

/// Three-Gaussian toy problem (σ = 1) in `dim` dimensions.
inline Dataset toy_dataset(Rng& rng, std::size_t per_class = 1000, std::size_t dim = 100, double sigma = 1.0) {
  return gen_gaussian_mixture(rng, toy_means(dim), sigma, per_class, "toy3");
}

/// 64-bit FNV-1a over labels and the raw bytes of the inputs.
inline std::uint64_t fingerprint(const Dataset& ds) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ull;
    }
  };
  const std::uint64_t shape[3] = {ds.size(), ds.dim(), ds.classes()};
  mix(shape, sizeof shape);
  mix(ds.inputs.data(), ds.inputs.size() * sizeof(double));
  mix(ds.labels.data(), ds.labels.size() * sizeof(int));
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

/// CSV with header x0..x{d-1},label.
inline void write_dataset_csv(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInput("write_dataset_csv: cannot open " + path);
  out << std::setprecision(17);
  for (std::size_t j = 0; j < ds.dim(); ++j) out << 'x' << j << ',';
  out << "label\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (double v : ds.x(i)) out << v << ',';
    out << ds.labels[i] << '\n';
  }
}

inline Dataset read_dataset_csv(const std::string& path, std::size_t classes = 0) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("read_dataset_csv: cannot open " + path);
  std::string line;
  std::size_t offset = 0;
  if (!std::getline(in, line)) throw FormatError("read_dataset_csv: missing header", 0);
  const std::size_t cols = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
  offset += line.size() + 1;
  std::vector<double> values;
  std::vector<int> labels;
  while (std::getline(in, line)) {
    if (line.empty()) {
      offset += 1;
      continue;
    }
    std::stringstream ss(line);
    std::string cell;
    std::size_t count = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        if (count < cols) values.push_back(std::stod(cell));
        else labels.push_back(std::stoi(cell));
      } catch (const std::exception&) {
        throw FormatError("read_dataset_csv: bad number '" + cell + "'", offset);
      }
      ++count;
    }
    if (count != cols + 1) throw FormatError("read_dataset_csv: wrong field count", offset);
    offset += line.size() + 1;
  }
  int max_label = 0;
  for (int l : labels) max_label = std::max(max_label, l);
  const std::size_t k = classes ? classes : static_cast<std::size_t>(max_label) + 1;
  const std::size_t n = labels.size();
  return make_dataset(Matrix(n, cols, std::move(values)), std::move(labels), k, path);
}

}  // namespace epk
