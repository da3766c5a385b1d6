#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "epk/error.hpp"
#include "epk/model/dual.hpp"
#include "epk/numerics/matrix.hpp"
#include "epk/numerics/parallel.hpp"
#include "epk/numerics/rng.hpp"

namespace epk {

/// Fully connected ReLU network: layer_sizes = (d, h₁, …, K). Hidden layers use ReLU, the head
/// is log-softmax, so the network output f(x; θ) is a vector of log-probabilities.
struct ModelSpec {
  std::vector<std::size_t> layer_sizes;

  void validate() const {
    if (layer_sizes.size() < 2) throw InvalidInput("ModelSpec: need at least input and output layers");
    for (std::size_t n : layer_sizes)
      if (n == 0) throw InvalidInput("ModelSpec: zero-width layer");
    if (layer_sizes.back() < 2) throw InvalidInput("ModelSpec: need at least two output classes");
  }

  std::size_t layers() const noexcept { return layer_sizes.size() - 1; }
  std::size_t input_dim() const noexcept { return layer_sizes.front(); }
  std::size_t classes() const noexcept { return layer_sizes.back(); }

  std::size_t param_count() const noexcept {
    std::size_t m = 0;
    for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) m += layer_sizes[l] * layer_sizes[l + 1] + layer_sizes[l + 1];
    return m;
  }

  /// Offset of W_l (n_{l+1}×n_l, row-major) in θ; b_l follows immediately.
  std::size_t weight_offset(std::size_t l) const noexcept {
    std::size_t off = 0;
    for (std::size_t i = 0; i < l; ++i) off += layer_sizes[i] * layer_sizes[i + 1] + layer_sizes[i + 1];
    return off;
  }
  std::size_t bias_offset(std::size_t l) const noexcept {
    return weight_offset(l) + layer_sizes[l] * layer_sizes[l + 1];
  }

  /// Flat index of W_l[row][col], or of b_l[row] when `bias` is set.
  std::size_t param_index(std::size_t l, bool bias, std::size_t row, std::size_t col = 0) const {
    if (l >= layers() || row >= layer_sizes[l + 1] || (!bias && col >= layer_sizes[l]))
      throw InvalidInput("param_index: out of range");
    return bias ? bias_offset(l) + row : weight_offset(l) + row * layer_sizes[l] + col;
  }

  bool operator==(const ModelSpec&) const = default;
};

/// He-scaled Gaussian weights N(0, scale·2/fan_in), zero biases. With `final_layer_zero` the
/// last layer's weights and biases are exactly 0, so f(x; θ₀) = log(1/K)·1 for every x.
inline Vector init_params(const ModelSpec& spec, Rng& rng, bool final_layer_zero, double scale = 1.0) {
  spec.validate();
  Vector theta(spec.param_count(), 0.0);
  for (std::size_t l = 0; l < spec.layers(); ++l) {
    if (final_layer_zero && l + 1 == spec.layers()) break;
    const std::size_t fan_in = spec.layer_sizes[l];
    const std::size_t count = fan_in * spec.layer_sizes[l + 1];
    const double sd = std::sqrt(scale * 2.0 / static_cast<double>(fan_in));
    const Matrix z = standard_normal_matrix(rng, 1, count);
    for (std::size_t i = 0; i < count; ++i) theta[spec.weight_offset(l) + i] = sd * z(0, i);
  }
  return theta;
}

/// Intermediate values of one forward pass, reused by the backward pass.
template <class T>
struct Tape {
  std::vector<std::vector<T>> a;  ///< a[0] = x, a[l] = ReLU(z[l-1]) for hidden l
  std::vector<std::vector<T>> z;  ///< pre-activations per layer
  std::vector<T> logp;            ///< log-softmax of the final pre-activation
};

namespace detail {

template <class T>
T dot_t(const T* a, const T* b, std::size_t n) {
  T s0{}, s1{}, s2{}, s3{};
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

}  // namespace detail

/// Forward pass, recording the tape. Throws NumericalError on non-finite outputs.
template <class T>
void forward_tape(const ModelSpec& spec, std::span<const T> theta, std::span<const T> x, Tape<T>& tape) {
  if (x.size() != spec.input_dim()) throw InvalidInput("forward: input dimension mismatch");
  if (theta.size() != spec.param_count()) throw InvalidInput("forward: parameter count mismatch");
  const std::size_t L = spec.layers();
  tape.a.resize(L);
  tape.z.resize(L);
  tape.a[0].assign(x.begin(), x.end());
  for (std::size_t l = 0; l < L; ++l) {
    const std::size_t n_in = spec.layer_sizes[l], n_out = spec.layer_sizes[l + 1];
    const T* w = theta.data() + spec.weight_offset(l);
    const T* b = theta.data() + spec.bias_offset(l);
    auto& z = tape.z[l];
    z.resize(n_out);
    const T* a = tape.a[l].data();
    for (std::size_t j = 0; j < n_out; ++j) z[j] = detail::dot_t(w + j * n_in, a, n_in) + b[j];
    if (l + 1 < L) {
      auto& next = tape.a[l + 1];
      next.resize(n_out);
      for (std::size_t j = 0; j < n_out; ++j) next[j] = primal(z[j]) > 0.0 ? z[j] : T{};
    }
  }
  // log-softmax with max shift
  const auto& zl = tape.z[L - 1];
  double zmax = primal(zl[0]);
  for (const T& v : zl) zmax = std::max(zmax, primal(v));
  T sum{};
  for (const T& v : zl) sum += exp(v - T(zmax));
  const T lse = T(zmax) + log(sum);
  tape.logp.resize(zl.size());
  for (std::size_t k = 0; k < zl.size(); ++k) {
    tape.logp[k] = zl[k] - lse;
    if (!std::isfinite(primal(tape.logp[k]))) throw NumericalError("forward: non-finite output");
  }
}

/// Backward pass for the scalar w·f given the output cotangent w = ∂(scalar)/∂f. Adds the
/// parameter gradient into `grad_theta` and the input gradient into `grad_x` (either may be empty).
/// ReLU derivative at 0 is 0.
template <class T>
void backward_tape(const ModelSpec& spec, std::span<const T> theta, const Tape<T>& tape, std::span<const T> out_cot,
                   std::span<T> grad_theta, std::span<T> grad_x) {
  const std::size_t L = spec.layers();
  const std::size_t K = spec.classes();
  if (out_cot.size() != K) throw InvalidInput("backward: cotangent size mismatch");
  // f = z − lse(z): ∂/∂z = w − (Σw)·softmax(z)
  T wsum{};
  for (const T& v : out_cot) wsum += v;
  std::vector<T> delta(K), prev;
  for (std::size_t k = 0; k < K; ++k) delta[k] = out_cot[k] - wsum * exp(tape.logp[k]);
  for (std::size_t l = L; l-- > 0;) {
    const std::size_t n_in = spec.layer_sizes[l], n_out = spec.layer_sizes[l + 1];
    const T* w = theta.data() + spec.weight_offset(l);
    const T* a = tape.a[l].data();
    if (!grad_theta.empty()) {
      T* gw = grad_theta.data() + spec.weight_offset(l);
      T* gb = grad_theta.data() + spec.bias_offset(l);
      for (std::size_t j = 0; j < n_out; ++j) {
        const T dj = delta[j];
        T* row = gw + j * n_in;
        for (std::size_t i = 0; i < n_in; ++i) row[i] += dj * a[i];
        gb[j] += dj;
      }
    }
    if (l == 0 && grad_x.empty()) break;
    prev.assign(n_in, T{});
    for (std::size_t j = 0; j < n_out; ++j) {
      const T dj = delta[j];
      const T* row = w + j * n_in;
      for (std::size_t i = 0; i < n_in; ++i) prev[i] += row[i] * dj;
    }
    if (l == 0) {
      for (std::size_t i = 0; i < n_in; ++i) grad_x[i] += prev[i];
    } else {
      const auto& zp = tape.z[l - 1];
      for (std::size_t i = 0; i < n_in; ++i)
        if (!(primal(zp[i]) > 0.0)) prev[i] = T{};
      delta.swap(prev);
    }
  }
}

enum class LossKind { cce, mse };

/// Cross-entropy −Σ y_k·f_k for log-probabilities f.
inline double cce_loss(std::span<const double> log_probs, std::span<const double> y) {
  if (log_probs.size() != y.size()) throw InvalidInput("cce_loss: size mismatch");
  double l = 0.0;
  for (std::size_t k = 0; k < y.size(); ++k)
    if (y[k] != 0.0) l -= y[k] * log_probs[k];
  return l;
}

/// ½‖exp(f) − y‖², squared error on probabilities.
inline double mse_loss(std::span<const double> log_probs, std::span<const double> y) {
  double l = 0.0;
  for (std::size_t k = 0; k < y.size(); ++k) {
    const double r = std::exp(log_probs[k]) - y[k];
    l += 0.5 * r * r;
  }
  return l;
}

inline double loss_value(LossKind kind, std::span<const double> log_probs, std::span<const double> y) {
  return kind == LossKind::cce ? cce_loss(log_probs, y) : mse_loss(log_probs, y);
}

/// L′ = ∂L/∂f. For cross-entropy this is −y, independent of f.
inline Vector loss_output_grad(LossKind kind, std::span<const double> log_probs, std::span<const double> y) {
  Vector g(y.size());
  for (std::size_t k = 0; k < y.size(); ++k) {
    if (kind == LossKind::cce) {
      g[k] = -y[k];
    } else {
      const double p = std::exp(log_probs[k]);
      g[k] = (p - y[k]) * p;
    }
  }
  return g;
}

inline Vector forward(const ModelSpec& spec, std::span<const double> theta, std::span<const double> x) {
  Tape<double> tape;
  forward_tape<double>(spec, theta, x, tape);
  return std::move(tape.logp);
}

/// Row i holds f(x_i; θ).
inline Matrix forward_batch(const ModelSpec& spec, std::span<const double> theta, const Matrix& x) {
  Matrix out(x.rows(), spec.classes());
  parallel_for(x.rows(), [&](std::size_t i) {
    Tape<double> tape;
    forward_tape<double>(spec, theta, x.row(i), tape);
    std::copy(tape.logp.begin(), tape.logp.end(), out.row(i).begin());
  });
  return out;
}

/// Argmax class; ties go to the lowest index.
inline std::size_t predict(const ModelSpec& spec, std::span<const double> theta, std::span<const double> x) {
  return argmax(forward(spec, theta, x));
}

inline std::vector<int> predict_batch(const ModelSpec& spec, std::span<const double> theta, const Matrix& x) {
  const Matrix f = forward_batch(spec, theta, x);
  std::vector<int> out(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) out[i] = static_cast<int>(argmax(f.row(i)));
  return out;
}

inline double accuracy(const ModelSpec& spec, std::span<const double> theta, const Matrix& x, const std::vector<int>& labels) {
  if (labels.empty()) return 0.0;
  const auto pred = predict_batch(spec, theta, x);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += pred[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

/// ∇_θ (w·f(x; θ)) for a fixed output weighting w.
inline Vector param_vjp(const ModelSpec& spec, std::span<const double> theta, std::span<const double> x,
                        std::span<const double> w) {
  Tape<double> tape;
  forward_tape<double>(spec, theta, x, tape);
  Vector g(theta.size(), 0.0);
  backward_tape<double>(spec, theta, tape, w, g, {});
  return g;
}

/// ∇_θ L(f(x; θ), y).
inline Vector backprop_param_grad(const ModelSpec& spec, std::span<const double> theta, std::span<const double> x,
                                  std::span<const double> y, LossKind loss = LossKind::cce) {
  Tape<double> tape;
  forward_tape<double>(spec, theta, x, tape);
  const Vector w = loss_output_grad(loss, tape.logp, y);
  Vector g(theta.size(), 0.0);
  backward_tape<double>(spec, theta, tape, w, g, {});
  return g;
}

/// K×M Jacobian; row k is ∇_θ f_k(x; θ).
inline Matrix param_jacobian(const ModelSpec& spec, std::span<const double> theta, std::span<const double> x) {
  Tape<double> tape;
  forward_tape<double>(spec, theta, x, tape);
  const std::size_t K = spec.classes();
  Matrix jac(K, theta.size());
  Vector e(K, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    e.assign(K, 0.0);
    e[k] = 1.0;
    backward_tape<double>(spec, theta, tape, e, jac.row(k), {});
  }
  return jac;
}

/// Scalar whose input gradient is requested: the loss against a label, or one class log-prob.
struct InputTarget {
  enum class Kind { loss, class_logprob } kind = Kind::loss;
  std::size_t label = 0;  ///< true label for `loss`, class index for `class_logprob`
  LossKind loss = LossKind::cce;

  static InputTarget loss_of(std::size_t label, LossKind l = LossKind::cce) { return {Kind::loss, label, l}; }
  static InputTarget logprob(std::size_t k) { return {Kind::class_logprob, k, LossKind::cce}; }
};

inline Vector input_gradient(const ModelSpec& spec, std::span<const double> theta, std::span<const double> x,
                             const InputTarget& target) {
  Tape<double> tape;
  forward_tape<double>(spec, theta, x, tape);
  const std::size_t K = spec.classes();
  if (target.label >= K) throw InvalidInput("input_gradient: class index out of range");
  Vector w(K, 0.0);
  if (target.kind == InputTarget::Kind::class_logprob) {
    w[target.label] = 1.0;
  } else {
    Vector y(K, 0.0);
    y[target.label] = 1.0;
    w = loss_output_grad(target.loss, tape.logp, y);
  }
  Vector gx(x.size(), 0.0);
  backward_tape<double>(spec, theta, tape, w, {}, gx);
  return gx;
}

/// Directional derivative of f(x; θ) along parameter direction v, for every class:
/// (∇_θ f_k(x; θ)·v)_k, computed in one forward pass with dual parameters.
inline Vector param_jvp(const ModelSpec& spec, std::span<const double> theta, std::span<const double> v,
                        std::span<const double> x, std::vector<Dual>& theta_buf, Tape<Dual>& tape) {
  theta_buf.resize(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) theta_buf[i] = Dual(theta[i], v[i]);
  std::vector<Dual> xd(x.begin(), x.end());
  forward_tape<Dual>(spec, theta_buf, xd, tape);
  Vector out(spec.classes());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = tape.logp[k].d;
  return out;
}

inline Vector param_jvp(const ModelSpec& spec, std::span<const double> theta, std::span<const double> v,
                        std::span<const double> x) {
  std::vector<Dual> buf;
  Tape<Dual> tape;
  return param_jvp(spec, theta, v, x, buf, tape);
}

}  // namespace epk
