#pragma once

#include <algorithm>
#include <memory>
#include <span>
#include <vector>

#include "epk/data/wedge.hpp"
#include "epk/error.hpp"
#include "epk/model/mlp.hpp"
#include "epk/numerics/matrix.hpp"
#include "epk/numerics/parallel.hpp"

namespace epk {

/// Anything with per-class scores; the predicted class is the first maximal score.
class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual std::size_t dim() const = 0;
  virtual std::size_t classes() const = 0;
  virtual Vector scores(std::span<const double> x) const = 0;

  virtual std::size_t classify(std::span<const double> x) const { return argmax(scores(x)); }

  std::vector<std::size_t> classify_batch(const Matrix& x) const {
    std::vector<std::size_t> out(x.rows());
    parallel_for(x.rows(), [&](std::size_t r) { out[r] = classify(x.row(r)); });
    return out;
  }
};

class MlpClassifier final : public Classifier {
 public:
  MlpClassifier(ModelSpec spec, Vector theta) : spec_(std::move(spec)), theta_(std::move(theta)) {
    spec_.validate();
    if (theta_.size() != spec_.param_count()) throw InvalidInput("MlpClassifier: parameter count mismatch");
  }
  std::size_t dim() const override { return spec_.input_dim(); }
  std::size_t classes() const override { return spec_.classes(); }
  Vector scores(std::span<const double> x) const override { return forward(spec_, theta_, x); }
  const ModelSpec& spec() const noexcept { return spec_; }
  const Vector& theta() const noexcept { return theta_; }

 private:
  ModelSpec spec_;
  Vector theta_;
};

/// scores = W·x + b.
class LinearClassifier final : public Classifier {
 public:
  LinearClassifier(Matrix w, Vector b) : w_(std::move(w)), b_(std::move(b)) {
    if (w_.rows() < 2 || b_.size() != w_.rows()) throw InvalidInput("LinearClassifier: need >= 2 classes and matching bias");
  }
  /// Two classes split by the hyperplane n·x = offset; class 1 on the side n points to.
  static LinearClassifier half_space(std::span<const double> normal, double offset) {
    Matrix w(2, normal.size());
    for (std::size_t j = 0; j < normal.size(); ++j) w(1, j) = normal[j];
    return LinearClassifier(std::move(w), Vector{0.0, -offset});
  }
  std::size_t dim() const override { return w_.cols(); }
  std::size_t classes() const override { return w_.rows(); }
  Vector scores(std::span<const double> x) const override {
    Vector s = matvec(w_, x);
    for (std::size_t k = 0; k < s.size(); ++k) s[k] += b_[k];
    return s;
  }

 private:
  Matrix w_;
  Vector b_;
};

/// Wedge membership as a two-class classifier (0 outside, 1 inside). The inside score is the
/// smallest sheet margin, so ties happen exactly on the wedge surface and resolve to outside.
class WedgeClassifier final : public Classifier {
 public:
  explicit WedgeClassifier(WedgeSpec spec) : spec_(std::move(spec)) { spec_.validate(); }
  std::size_t dim() const override { return spec_.dim; }
  std::size_t classes() const override { return 2; }
  Vector scores(std::span<const double> x) const override {
    if (x.size() != spec_.dim) throw InvalidInput("WedgeClassifier: dimension mismatch");
    double m = x[0];
    for (std::size_t i = 1; i < spec_.sheets; ++i)
      m = std::min(m, spec_.angles.empty() ? x[i] : x[i] - x[0] * std::tan(spec_.angles[i - 1]));
    return Vector{0.0, m};
  }
  std::size_t classify(std::span<const double> x) const override {
    return static_cast<std::size_t>(wedge_classify(spec_, x));
  }
  const WedgeSpec& spec() const noexcept { return spec_; }

 private:
  WedgeSpec spec_;
};

}  // namespace epk
