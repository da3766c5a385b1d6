#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "epk/attack/attacks.hpp"
#include "epk/data/dataset.hpp"
#include "epk/error.hpp"
#include "epk/model/checkpoint.hpp"
#include "epk/model/dual.hpp"
#include "epk/model/mlp.hpp"
#include "epk/numerics/parallel.hpp"
#include "epk/numerics/rng.hpp"

namespace epk {

enum class BatchMode { full, shuffled };
enum class CheckpointPolicy { all, endpoints, spill };

struct AdversarialConfig {
  bool enabled = false;
  double epsilon = 0.1;  ///< FGSM step, regenerated at the start of every epoch
  Box box;
};

/// Plain (S)GD: θ_{s+1} = θ_s − ε_s·Σ_{i∈batch_s} ∇_θ ℓ_i(θ_s). The batch gradient is a sum, not
/// a mean, so ε_s is exactly the per-example step. ℓ_i is the loss plus, with mag_alpha > 0, the
/// manifold-alignment ratio term α·‖∇_x L‖/‖P∇_x L‖.
struct TrainConfig {
  std::size_t steps = 100;
  double lr = 1e-3;
  double lr_decay = 1.0;         ///< ε multiplied by this every `decay_every` steps
  std::size_t decay_every = 0;   ///< 0 = constant
  std::vector<double> lr_list;   ///< explicit per-step ε_s; overrides lr/decay when non-empty
  BatchMode batch_mode = BatchMode::full;
  std::size_t batch_size = 0;
  LossKind loss = LossKind::cce;
  double mag_alpha = 0.0;
  AdversarialConfig adversarial;
  bool final_layer_zero = true;
  double init_scale = 1.0;
  CheckpointPolicy checkpoints = CheckpointPolicy::all;
  std::string spill_dir;
  std::uint64_t seed = 0;

  double step_size(std::size_t s) const {
    if (!lr_list.empty()) return lr_list.at(s);
    if (decay_every == 0) return lr;
    return lr * std::pow(lr_decay, static_cast<double>(s / decay_every));
  }

  void validate(std::size_t n) const {
    if (!lr_list.empty() && lr_list.size() < steps) throw InvalidInput("TrainConfig: lr_list shorter than steps");
    if (!(lr > 0.0) && lr_list.empty()) throw InvalidInput("TrainConfig: learning rate must be > 0");
    if (batch_mode == BatchMode::shuffled && (batch_size == 0 || batch_size > n))
      throw InvalidInput("TrainConfig: need 1 <= batch_size <= N");
    if (!(mag_alpha >= 0.0)) throw InvalidInput("TrainConfig: mag_alpha must be >= 0");
    if (checkpoints == CheckpointPolicy::spill && spill_dir.empty()) throw InvalidInput("TrainConfig: spill needs spill_dir");
  }
};

/// Discrete training path θ₀ … θ_S with the data needed to replay every step.
struct TrainingPath {
  ModelSpec spec;
  TrainConfig config;
  std::size_t n_train = 0;
  std::vector<Vector> checkpoints;                  ///< θ_s, empty when not retained in memory
  std::vector<double> step_sizes;                   ///< ε_s
  std::vector<std::vector<std::uint32_t>> batches;  ///< empty for full-batch runs
  std::vector<std::size_t> epoch_start;             ///< step at which step s's epoch began
  std::vector<double> loss_trace;                   ///< batch objective at θ_s
  Vector final_theta;
  Matrix mag_components;                            ///< W used by MAG training (empty otherwise)

  std::size_t steps() const noexcept { return step_sizes.size(); }
  bool full_batch() const noexcept { return batches.empty(); }
  bool adversarial() const noexcept { return config.adversarial.enabled; }
  bool is_mag() const noexcept { return config.mag_alpha > 0.0; }

  std::vector<std::uint32_t> batch(std::size_t s) const {
    if (s >= steps()) throw InvalidInput("TrainingPath::batch: step out of range");
    if (!full_batch()) return batches[s];
    std::vector<std::uint32_t> all(n_train);
    std::iota(all.begin(), all.end(), 0u);
    return all;
  }

  bool has_checkpoint(std::size_t s) const {
    if (s > steps()) return false;
    if (!checkpoints[s].empty()) return true;
    return !config.spill_dir.empty() && std::filesystem::exists(spill_file(s));
  }

  bool complete() const {
    for (std::size_t s = 0; s <= steps(); ++s)
      if (!has_checkpoint(s)) return false;
    return true;
  }

  std::string spill_file(std::size_t s) const {
    char name[32];
    std::snprintf(name, sizeof name, "step_%06zu.epkc", s);
    return (std::filesystem::path(config.spill_dir) / name).string();
  }

  Vector checkpoint(std::size_t s) const {
    if (s > steps()) throw InvalidPath("TrainingPath: checkpoint index out of range");
    if (!checkpoints[s].empty()) return checkpoints[s];
    if (!config.spill_dir.empty() && std::filesystem::exists(spill_file(s))) return read_checkpoint(spill_file(s)).theta;
    throw InvalidPath("TrainingPath: checkpoint " + std::to_string(s) + " was not retained");
  }
};

namespace detail {

inline constexpr double kMagFloor = 1e-12;
inline constexpr double kMagCap = 1e6;

/// Ratio ‖g‖/‖Pg‖ with the denominator floored and the ratio capped; `clamped` reports when
/// either guard fired (the ratio is then treated as locally constant).
inline double mag_ratio(std::span<const double> g, std::span<const double> pg, bool& clamped) {
  const double ng = norm2(g), npg = norm2(pg);
  clamped = false;
  if (ng == 0.0) {
    clamped = true;
    return 1.0;
  }
  double r = ng / std::max(npg, kMagFloor);
  if (npg < kMagFloor || r > kMagCap) {
    clamped = true;
    r = std::min(r, kMagCap);
  }
  return r;
}

/// Objective and θ-gradient contribution of one example, added into `grad`.
/// With MAG: ∇_θ r = ∇_θ(∇_x L·u) with u = ∂r/∂g held fixed, evaluated exactly as the tangent of
/// the parameter gradient at the dual input x + εu.
inline double example_grad(const ModelSpec& spec, std::span<const double> theta, std::span<const double> x,
                           std::span<const double> y, LossKind loss, double alpha, const Matrix* components,
                           std::span<double> grad) {
  Tape<double> tape;
  forward_tape<double>(spec, theta, x, tape);
  const Vector w = loss_output_grad(loss, tape.logp, y);
  double value = loss_value(loss, tape.logp, y);
  if (alpha <= 0.0) {
    backward_tape<double>(spec, theta, tape, w, grad, {});
    return value;
  }
  Vector g(x.size(), 0.0);
  backward_tape<double>(spec, theta, tape, w, grad, g);
  const Vector pg = matvec_t(*components, matvec(*components, g));
  bool clamped = false;
  const double r = mag_ratio(g, pg, clamped);
  value += alpha * r;
  if (clamped) return value;
  const double ng = norm2(g), npg = norm2(pg);
  // ∂r/∂g = g/(‖g‖‖Pg‖) − ‖g‖·Pg/‖Pg‖³   (P symmetric idempotent)
  Vector u(g.size());
  for (std::size_t j = 0; j < g.size(); ++j) u[j] = g[j] / (ng * npg) - ng * pg[j] / (npg * npg * npg);
  std::vector<Dual> td(theta.begin(), theta.end()), xd(x.size()), cot(w.size());
  for (std::size_t j = 0; j < x.size(); ++j) xd[j] = Dual(x[j], u[j]);
  for (std::size_t k = 0; k < w.size(); ++k) cot[k] = Dual(w[k]);
  Tape<Dual> dt;
  forward_tape<Dual>(spec, td, xd, dt);
  std::vector<Dual> gd(theta.size());
  backward_tape<Dual>(spec, td, dt, cot, gd, {});
  for (std::size_t p = 0; p < grad.size(); ++p) grad[p] += alpha * gd[p].d;
  return value;
}

inline constexpr std::size_t kChunk = 32;

/// Σ over `rows` of per-example gradients. Fixed-size chunks are reduced in index order, so the
/// result is bit-identical for every thread count.
inline double batch_gradient(const ModelSpec& spec, std::span<const double> theta, const Matrix& inputs,
                             const Matrix& targets, const std::vector<std::uint32_t>& rows, LossKind loss, double alpha,
                             const Matrix* components, Vector& grad) {
  const std::size_t chunks = (rows.size() + kChunk - 1) / kChunk;
  std::vector<Vector> partial(chunks);
  std::vector<double> values(chunks, 0.0);
  parallel_for(chunks, [&](std::size_t c) {
    Vector g(theta.size(), 0.0);
    double v = 0.0;
    const std::size_t end = std::min(rows.size(), (c + 1) * kChunk);
    for (std::size_t r = c * kChunk; r < end; ++r)
      v += example_grad(spec, theta, inputs.row(rows[r]), targets.row(rows[r]), loss, alpha, components, g);
    partial[c] = std::move(g);
    values[c] = v;
  });
  grad.assign(theta.size(), 0.0);
  double total = 0.0;
  for (std::size_t c = 0; c < chunks; ++c) {
    axpy(1.0, partial[c], grad);
    total += values[c];
  }
  return total;
}

}  // namespace detail

/// Inputs and one-hot targets of the examples trained on at step s. Plain runs use the dataset
/// rows; adversarial runs append, for every batch row, its FGSM example generated at the
/// epoch-start checkpoint and labelled with the clean label.
struct StepBatch {
  Matrix inputs;
  Matrix targets;
  std::vector<int> labels;
};

inline StepBatch materialize_batch(const TrainingPath& path, const Dataset& ds, std::size_t s) {
  const auto rows = path.batch(s);
  const std::size_t copies = path.adversarial() ? 2 : 1;
  StepBatch b{Matrix(rows.size() * copies, ds.dim()), Matrix(rows.size() * copies, ds.classes()), {}};
  b.labels.resize(rows.size() * copies);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::copy(ds.x(rows[r]).begin(), ds.x(rows[r]).end(), b.inputs.row(r).begin());
    std::copy(ds.y(rows[r]).begin(), ds.y(rows[r]).end(), b.targets.row(r).begin());
    b.labels[r] = ds.labels[rows[r]];
  }
  if (path.adversarial()) {
    const Vector theta_epoch = path.checkpoint(path.epoch_start[s]);
    parallel_for(rows.size(), [&](std::size_t r) {
      const auto ex = fgsm(path.spec, theta_epoch, ds.x(rows[r]), ds.labels[rows[r]], path.config.adversarial.epsilon,
                           path.config.adversarial.box);
      const std::size_t o = rows.size() + r;
      std::copy(ex.perturbed.begin(), ex.perturbed.end(), b.inputs.row(o).begin());
      std::copy(ds.y(rows[r]).begin(), ds.y(rows[r]).end(), b.targets.row(o).begin());
      b.labels[o] = ds.labels[rows[r]];
    });
  }
  return b;
}

/// θ_{s+1} recomputed from θ_s (used by training itself and by replay checks).
inline Vector apply_step(const TrainingPath& path, const Dataset& ds, std::size_t s, std::span<const double> theta_s,
                         double* objective = nullptr) {
  const StepBatch b = materialize_batch(path, ds, s);
  std::vector<std::uint32_t> all(b.inputs.rows());
  std::iota(all.begin(), all.end(), 0u);
  Vector grad;
  const Matrix* components = path.is_mag() ? &path.mag_components : nullptr;
  const double value =
      detail::batch_gradient(path.spec, theta_s, b.inputs, b.targets, all, path.config.loss, path.config.mag_alpha, components, grad);
  if (objective) *objective = value;
  Vector next(theta_s.begin(), theta_s.end());
  axpy(-path.step_sizes[s], grad, next);
  return next;
}

namespace detail {

inline TrainingPath train_impl(const Dataset& ds, const ModelSpec& spec, const TrainConfig& config, Rng& rng,
                               const Matrix* components) {
  spec.validate();
  if (spec.input_dim() != ds.dim() || spec.classes() != ds.classes())
    throw InvalidInput("train: model shape does not match dataset");
  config.validate(ds.size());
  TrainingPath path;
  path.spec = spec;
  path.config = config;
  path.n_train = ds.size();
  if (components) path.mag_components = *components;
  if (config.checkpoints == CheckpointPolicy::spill) std::filesystem::create_directories(config.spill_dir);

  Rng init_rng = rng.split(1), batch_rng = rng.split(2);
  Vector theta = init_params(spec, init_rng, config.final_layer_zero, config.init_scale);
  const std::size_t S = config.steps;
  path.checkpoints.resize(S + 1);
  path.step_sizes.resize(S);
  path.epoch_start.resize(S);
  path.loss_trace.reserve(S);

  auto retain = [&](std::size_t s, const Vector& th) {
    const bool keep_mem = config.checkpoints == CheckpointPolicy::all ||
                          (config.checkpoints == CheckpointPolicy::endpoints && (s == 0 || s == S));
    if (keep_mem || (config.checkpoints == CheckpointPolicy::spill && (s == 0 || s == S))) path.checkpoints[s] = th;
    if (config.checkpoints == CheckpointPolicy::spill) write_checkpoint(path.spill_file(s), spec, th);
  };
  // Adversarial batches are regenerated from the epoch-start parameters, which must therefore
  // stay addressable even under the `endpoints` policy.
  auto retain_epoch = [&](std::size_t s, const Vector& th) {
    if (config.adversarial.enabled && path.checkpoints[s].empty() && config.checkpoints != CheckpointPolicy::spill)
      path.checkpoints[s] = th;
  };

  retain(0, theta);
  std::vector<std::uint32_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0u);
  std::size_t cursor = ds.size(), epoch_begin = 0;
  for (std::size_t s = 0; s < S; ++s) {
    path.step_sizes[s] = config.step_size(s);
    if (config.batch_mode == BatchMode::full) {
      epoch_begin = s;
    } else {
      if (cursor >= ds.size()) {
        batch_rng.shuffle(order);
        cursor = 0;
        epoch_begin = s;
      }
      const std::size_t end = std::min(ds.size(), cursor + config.batch_size);
      path.batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(cursor), order.begin() + static_cast<std::ptrdiff_t>(end));
      cursor = end;
    }
    path.epoch_start[s] = epoch_begin;
    if (epoch_begin == s) retain_epoch(s, theta);
    double value = 0.0;
    Vector next;
    try {
      next = apply_step(path, ds, s, theta, &value);
    } catch (const NumericalError&) {
      throw TrainingDiverged("train: non-finite forward pass at step " + std::to_string(s), s);
    }
    if (!std::isfinite(value) || !all_finite(next))
      throw TrainingDiverged("train: non-finite loss at step " + std::to_string(s), s);
    path.loss_trace.push_back(value);
    theta = std::move(next);
    retain(s + 1, theta);
  }
  path.final_theta = theta;
  return path;
}

}  // namespace detail

inline TrainingPath train(const Dataset& ds, const ModelSpec& spec, const TrainConfig& config, Rng& rng) {
  if (config.mag_alpha > 0.0) throw InvalidInput("train: use train_mag for mag_alpha > 0");
  return detail::train_impl(ds, spec, config, rng, nullptr);
}

/// Training with the manifold-alignment term; W has orthonormal rows spanning the data manifold.
inline TrainingPath train_mag(const Dataset& ds, const Matrix& components, const ModelSpec& spec, const TrainConfig& config,
                              Rng& rng) {
  if (components.cols() != ds.dim()) throw InvalidInput("train_mag: component width differs from input dimension");
  if (!(config.mag_alpha >= 0.0)) throw InvalidInput("train_mag: mag_alpha must be >= 0");
  // the dual pass treats L′ as constant in x, which holds for cross-entropy only
  if (config.loss != LossKind::cce) throw InvalidInput("train_mag: requires cross-entropy loss");
  const Matrix gram = matmul_nt(components, components);
  if (max_abs_diff(gram, Matrix::identity(components.rows())) > 1e-8) throw InvalidInput("train_mag: components not orthonormal");
  return detail::train_impl(ds, spec, config, rng, &components);
}

/// Largest |θ_{s+1} − apply_step(θ_s)| over all steps (0 when replay is exact).
inline double replay_error(const TrainingPath& path, const Dataset& ds) {
  double worst = 0.0;
  for (std::size_t s = 0; s < path.steps(); ++s) {
    const Vector a = path.checkpoint(s);
    const Vector b = path.checkpoint(s + 1);
    const Vector r = apply_step(path, ds, s, a);
    for (std::size_t i = 0; i < r.size(); ++i) worst = std::max(worst, std::abs(r[i] - b[i]));
  }
  return worst;
}

struct MagPointStat {
  std::size_t index = 0;
  double ratio = 0.0;   ///< ‖∇_x‖/‖P∇_x‖, capped at 1e6 when the projection vanishes
  double cosine = 0.0;  ///< ‖P∇_x‖/‖∇_x‖ = cos∠(∇_x, P∇_x)
  bool clamped = false;
};

struct MagAlignment {
  std::vector<MagPointStat> points;
  std::vector<std::size_t> skipped;  ///< zero input gradient
  double mean_ratio = 0.0;
  double mean_cosine = 0.0;
};

/// Per-point alignment of the input gradient of the loss with span(W).
inline MagAlignment mag_alignment_metric(const ModelSpec& spec, std::span<const double> theta, const Dataset& ds,
                                         const Matrix& components) {
  if (components.cols() != ds.dim()) throw InvalidInput("mag_alignment_metric: dimension mismatch");
  std::vector<MagPointStat> stats(ds.size());
  std::vector<char> zero(ds.size(), 0);
  parallel_for(ds.size(), [&](std::size_t i) {
    const Vector g = input_gradient(spec, theta, ds.x(i), InputTarget::loss_of(static_cast<std::size_t>(ds.labels[i])));
    const double ng = norm2(g);
    if (ng == 0.0) {
      zero[i] = 1;
      return;
    }
    const Vector coords = matvec(components, g);
    const Vector pg = matvec_t(components, coords);
    bool clamped = false;
    stats[i] = {i, detail::mag_ratio(g, pg, clamped), std::min(1.0, norm2(pg) / ng), clamped};
  });
  MagAlignment out;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (zero[i]) {
      out.skipped.push_back(i);
      continue;
    }
    out.points.push_back(stats[i]);
    out.mean_ratio += stats[i].ratio;
    out.mean_cosine += stats[i].cosine;
  }
  if (!out.points.empty()) {
    out.mean_ratio /= static_cast<double>(out.points.size());
    out.mean_cosine /= static_cast<double>(out.points.size());
  }
  return out;
}

}  // namespace epk
