#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "epk/attack/attacks.hpp"
#include "epk/cli/manifest.hpp"
#include "epk/cli/run_data.hpp"
#include "epk/decompose/decompose.hpp"
#include "epk/geometry/boundary.hpp"
#include "epk/geometry/classifier.hpp"
#include "epk/geometry/persistence.hpp"
#include "epk/model/checkpoint.hpp"
#include "epk/pathkernel/epk.hpp"
#include "epk/train/path_io.hpp"
#include "epk/train/train.hpp"

namespace epk::cli {

namespace fs = std::filesystem;

/// What every subcommand receives besides its own options.
struct Invocation {
  fs::path out;
  std::optional<std::uint64_t> seed;  ///< unset: 0, or the training run's seed for commands that load one
  std::map<std::string, std::string> config;
  std::ostream* log = nullptr;

  std::ostream& print() const { return *log; }
  std::uint64_t seed_or(std::uint64_t fallback) const { return seed.value_or(fallback); }
};

namespace detail {

inline RunManifest begin(const Invocation& inv, const std::string& command) {
  if (inv.out.empty()) throw InvalidInput("--out is required");
  fs::create_directories(inv.out);
  RunManifest m;
  m.command = command;
  m.config = inv.config;
  m.seed = inv.seed_or(0);
  return m;
}

inline void finish(const Invocation& inv, RunManifest& m, const Stopwatch& watch) {
  m.wall_time_s = watch.seconds();
  write_manifest(inv.out, m);
}

inline std::ofstream open_csv(const fs::path& file) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw InvalidInput("cannot write " + file.string());
  out << std::setprecision(17);
  return out;
}

/// inf and nan as plain words; JSON gets null for both.
inline std::string num(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline nlohmann::json json_num(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

inline double finite_mean(const std::vector<double>& v) {
  double s = 0.0;
  std::size_t n = 0;
  for (double x : v)
    if (std::isfinite(x)) s += x, ++n;
  return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

inline Box parse_box(const std::string& s, const DataOptions& data) {
  if (s == "auto") return default_box(data);
  if (s == "none") return Box::none();
  const auto comma = s.find(',');
  if (comma == std::string::npos) throw InvalidInput("--box takes auto, none or lo,hi");
  Box b{std::stod(s.substr(0, comma)), std::stod(s.substr(comma + 1)), true};
  if (!(b.lo < b.hi)) throw InvalidInput("--box needs lo < hi");
  return b;
}

inline Sampling parse_sampling(const std::string& s) {
  if (s == "lhs") return Sampling::latin_hypercube;
  if (s == "iid") return Sampling::iid;
  throw InvalidInput("--sampling takes lhs or iid");
}

}  // namespace detail

/// A trained model together with the data it was trained on.
struct LoadedRun {
  RunData data;
  TrainingPath path;
};

inline LoadedRun load_run(const fs::path& train_dir) {
  if (train_dir.empty()) throw InvalidInput("--train-dir is required");
  LoadedRun r;
  r.data = reload_run_data(read_json(train_dir / "data.json"));
  r.path = load_path((train_dir / "path").string());
  if (r.path.spec.input_dim() != r.data.splits.train.dim()) throw InvalidInput("model input width differs from the dataset");
  return r;
}

/// Perturbed inputs and success flags written by `attack`; row i attacks test point i.
struct AttackRecord {
  Matrix perturbed;
  std::vector<char> success;
  std::vector<double> distortion;
};

inline AttackRecord load_attack(const fs::path& attack_dir) {
  AttackRecord a;
  a.perturbed = read_matrix_binary((attack_dir / "adversarial.epkm").string());
  std::ifstream in(attack_dir / "attacks.csv");
  if (!in) throw InvalidPath("no attacks.csv in " + attack_dir.string());
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    if (cells.size() < 5) throw FormatError("attacks.csv: short row", 0);
    a.success.push_back(cells[3] == "1");
    a.distortion.push_back(std::stod(cells[4]));
  }
  if (a.success.size() != a.perturbed.rows()) throw FormatError("attacks.csv and adversarial.epkm disagree in length", 0);
  return a;
}

// ---------------------------------------------------------------------------------------------

struct TrainOptions {
  DataOptions data;
  std::vector<std::size_t> hidden{100};
  std::size_t steps = 200;
  double lr = 1e-3;
  std::size_t batch_size = 0;  ///< 0: full batch
  std::string loss = "cce";
  double init_scale = 1.0;
  bool final_layer_zero = true;
  std::string checkpoints = "all";
  double adv_epsilon = 0.0;  ///< > 0: FGSM adversarial training
  std::string box = "auto";
};

inline TrainConfig make_train_config(const TrainOptions& o, const DataOptions& data, std::uint64_t seed) {
  TrainConfig c;
  c.steps = o.steps;
  c.lr = o.lr;
  c.batch_mode = o.batch_size == 0 ? BatchMode::full : BatchMode::shuffled;
  c.batch_size = o.batch_size;
  c.loss = loss_from(o.loss);
  c.init_scale = o.init_scale;
  c.final_layer_zero = o.final_layer_zero;
  c.checkpoints = checkpoint_policy_from(o.checkpoints);
  if (c.checkpoints == CheckpointPolicy::spill) throw InvalidInput("--checkpoints takes all or endpoints");
  c.adversarial.enabled = o.adv_epsilon > 0.0;
  c.adversarial.epsilon = o.adv_epsilon;
  c.adversarial.box = detail::parse_box(o.box, data);
  c.seed = seed;
  return c;
}

inline ModelSpec make_spec(const std::vector<std::size_t>& hidden, const Dataset& ds) {
  ModelSpec spec;
  spec.layer_sizes.push_back(ds.dim());
  spec.layer_sizes.insert(spec.layer_sizes.end(), hidden.begin(), hidden.end());
  spec.layer_sizes.push_back(ds.classes());
  spec.validate();
  return spec;
}

inline RunManifest run_train(const TrainOptions& o, const Invocation& inv) {
  const Stopwatch watch;
  RunManifest m = detail::begin(inv, "train");
  const Splits s = load_splits(o.data, inv.seed_or(0));
  m.dataset_fingerprint = hex64(fingerprint(s.train));
  const ModelSpec spec = make_spec(o.hidden, s.train);
  const TrainConfig cfg = make_train_config(o, o.data, inv.seed_or(0));
  Rng rng = stream(inv.seed_or(0), Stream::train);
  const TrainingPath path = train(s.train, spec, cfg, rng);
  save_path(path, (inv.out / "path").string());
  write_json(inv.out / "data.json", data_record(o.data, inv.seed_or(0), s));

  const double acc_train = accuracy(spec, path.final_theta, s.train.inputs, s.train.labels);
  const double acc_test = accuracy(spec, path.final_theta, s.test.inputs, s.test.labels);
  auto csv = detail::open_csv(inv.out / "accuracy.csv");
  csv << "split,n,accuracy\n" << "train," << s.train.size() << ',' << acc_train << '\n' << "test," << s.test.size() << ',' << acc_test << '\n';

  m.outputs = {"path/manifest.json", "path/loss.csv", "path/final.json", "data.json", "accuracy.csv"};
  m.metrics = {{"train_accuracy", acc_train},
               {"test_accuracy", acc_test},
               {"final_loss", path.loss_trace.empty() ? 0.0 : path.loss_trace.back()},
               {"steps", path.steps()},
               {"params", spec.param_count()}};
  inv.print() << "train: " << path.steps() << " steps, train acc " << acc_train << ", test acc " << acc_test << '\n';
  detail::finish(inv, m, watch);
  return m;
}

// ---------------------------------------------------------------------------------------------

struct AttackOptions {
  fs::path train_dir;
  std::string attack = "igsm";  ///< fgsm | igsm | pgd | lbfgs
  double epsilon = 0.3;
  double alpha = 0.02;
  std::size_t iters = 40;
  int target = -1;  ///< -1: untargeted (lbfgs then aims at (label + 1) mod K)
  std::size_t n = 100;
  std::string box = "auto";
};

inline RunManifest run_attack(const AttackOptions& o, const Invocation& inv) {
  const Stopwatch watch;
  RunManifest m = detail::begin(inv, "attack");
  const LoadedRun run = load_run(o.train_dir);
  m.dataset_fingerprint = run.data.fingerprint;
  m.seed = inv.seed_or(run.data.seed);
  const Dataset& test = run.data.splits.test;
  const ModelSpec& spec = run.path.spec;
  const Vector& theta = run.path.final_theta;
  const Box box = detail::parse_box(o.box, run.data.options);
  const std::size_t n = std::min(o.n, test.size());
  const int K = static_cast<int>(spec.classes());
  if (o.target >= K) throw InvalidInput("--target out of range");
  if (o.attack != "fgsm" && o.attack != "igsm" && o.attack != "pgd" && o.attack != "lbfgs")
    throw InvalidInput("unknown attack '" + o.attack + "' (fgsm, igsm, pgd, lbfgs)");
  const std::optional<int> target = o.target >= 0 ? std::optional<int>(o.target) : std::nullopt;

  std::vector<AdversarialExample> ex(n);
  // lbfgs runs its own parallel solves; the gradient-sign attacks are cheap per point
  auto one = [&](std::size_t i) {
    const int label = test.labels[i];
    if (o.attack == "fgsm") {
      ex[i] = fgsm(spec, theta, test.x(i), label, o.epsilon, box);
    } else if (o.attack == "igsm") {
      ex[i] = igsm(spec, theta, test.x(i), label, IgsmOptions{o.epsilon, o.alpha, o.iters, target, true, box});
    } else if (o.attack == "pgd") {
      PgdOptions p;
      p.epsilon = o.epsilon, p.alpha = o.alpha, p.iters = o.iters, p.target = target, p.early_stop = true, p.box = box;
      Rng rng = stream(m.seed, Stream::attack).split(i);
      ex[i] = pgd(spec, theta, test.x(i), label, p, rng);
    } else {
      MinDistortionOptions p;
      p.box = box;
      ex[i] = min_distortion_attack(spec, theta, test.x(i), target ? *target : (label + 1) % K, p);
    }
  };
  if (o.attack == "lbfgs")
    for (std::size_t i = 0; i < n; ++i) one(i);
  else
    parallel_for(n, one);

  Matrix adv(n, test.dim());
  std::size_t wins = 0;
  std::vector<double> dist;
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(ex[i].perturbed.begin(), ex[i].perturbed.end(), adv.row(i).begin());
    if (ex[i].success) ++wins, dist.push_back(ex[i].distortion);
  }
  write_attack_csv((inv.out / "attacks.csv").string(), ex);
  write_matrix_binary((inv.out / "adversarial.epkm").string(), adv);
  m.outputs = {"attacks.csv", "adversarial.epkm"};
  const double rate = n ? static_cast<double>(wins) / static_cast<double>(n) : 0.0;
  m.metrics = {{"attack", o.attack},
               {"n", n},
               {"success_rate", rate},
               {"mean_distortion", detail::json_num(detail::finite_mean(dist))}};
  inv.print() << "attack " << o.attack << ": " << wins << "/" << n << " succeeded, mean distortion "
              << detail::num(detail::finite_mean(dist)) << '\n';
  detail::finish(inv, m, watch);
  return m;
}

// ---------------------------------------------------------------------------------------------

struct PersistOptions {
  double gamma = 0.7;
  std::size_t samples = 1000;
  double precision = 0.01;
  std::string sampling = "lhs";
  std::string oracle;  ///< "wedge": analytic check instead of a trained model
  std::size_t k = 1;
  double d = 1.0;
  std::size_t dim = 0;  ///< wedge ambient dimension, 0: k
  fs::path train_dir;
  fs::path attack_dir;
  std::size_t n = 20;  ///< natural test points
};

inline PersistenceOptions persistence_options(const PersistOptions& o) {
  PersistenceOptions p;
  p.gamma = o.gamma;
  p.n = o.samples;
  p.precision = o.precision;
  p.sampling = detail::parse_sampling(o.sampling);
  return p;
}

inline RunManifest run_persist(const PersistOptions& o, const Invocation& inv) {
  const Stopwatch watch;
  RunManifest m = detail::begin(inv, "persist");
  const PersistenceOptions popt = persistence_options(o);

  if (!o.oracle.empty()) {
    if (o.oracle != "wedge") throw InvalidInput("--oracle takes wedge");
    WedgeSpec ws;
    ws.dim = o.dim == 0 ? o.k : o.dim;
    ws.sheets = o.k;
    const WedgeClassifier clf(ws);
    Vector x(ws.dim, 0.0);
    for (std::size_t i = 0; i < o.k; ++i) x[i] = o.d;
    Rng rng = stream(m.seed, Stream::geometry);
    const PersistenceResult r = persistence_bracket(clf, x, popt, rng);
    const double exact = wedge_persistence_oracle(o.k, o.d, o.gamma);
    const double rel = std::abs(r.sigma_star - exact) / exact;
    auto csv = detail::open_csv(inv.out / "persistence_oracle.csv");
    csv << "k,d,gamma,oracle,bracketing,rel_err,converged\n"
        << o.k << ',' << o.d << ',' << o.gamma << ',' << detail::num(exact) << ',' << detail::num(r.sigma_star) << ','
        << detail::num(rel) << ',' << (r.converged ? 1 : 0) << '\n';
    m.outputs = {"persistence_oracle.csv"};
    m.metrics = {{"oracle", detail::json_num(exact)},
                 {"bracketing", detail::json_num(r.sigma_star)},
                 {"rel_err", detail::json_num(rel)}};
    inv.print() << std::setprecision(6) << "wedge k=" << o.k << " d=" << o.d << " gamma=" << o.gamma << ": oracle "
                << detail::num(exact) << "  bracketing " << detail::num(r.sigma_star) << "  (rel err "
                << detail::num(rel) << ")\n";
    detail::finish(inv, m, watch);
    return m;
  }

  const LoadedRun run = load_run(o.train_dir);
  m.dataset_fingerprint = run.data.fingerprint;
  m.seed = inv.seed_or(run.data.seed);
  const Dataset& test = run.data.splits.test;
  const MlpClassifier clf(run.path.spec, run.path.final_theta);
  const Rng geo = stream(m.seed, Stream::geometry);
  auto csv = detail::open_csv(inv.out / "persistence.csv");
  csv << "point_id,kind,class,sigma_star,gamma_hat,converged\n";
  std::vector<double> nat, adv;
  const std::size_t n = std::min(o.n, test.size());
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = geo.split(0).split(i);
    const PersistenceResult r = persistence_bracket(clf, test.x(i), popt, rng);
    nat.push_back(r.sigma_star);
    csv << i << ",natural," << clf.classify(test.x(i)) << ',' << detail::num(r.sigma_star) << ',' << r.gamma_hat << ','
        << (r.converged ? 1 : 0) << '\n';
  }
  if (!o.attack_dir.empty()) {
    const AttackRecord a = load_attack(o.attack_dir);
    for (std::size_t i = 0; i < a.perturbed.rows(); ++i) {
      if (!a.success[i]) continue;
      Rng rng = geo.split(1).split(i);
      const PersistenceResult r = persistence_bracket(clf, a.perturbed.row(i), popt, rng);
      adv.push_back(r.sigma_star);
      csv << i << ",adversarial," << clf.classify(a.perturbed.row(i)) << ',' << detail::num(r.sigma_star) << ','
          << r.gamma_hat << ',' << (r.converged ? 1 : 0) << '\n';
    }
  }
  const double nat_mean = detail::finite_mean(nat), adv_mean = detail::finite_mean(adv);
  const auto unbounded = [](const std::vector<double>& v) { return std::count_if(v.begin(), v.end(), [](double x) { return std::isinf(x); }); };
  m.outputs = {"persistence.csv"};
  m.metrics = {{"gamma", o.gamma},
               {"n_natural", nat.size()},
               {"n_adversarial", adv.size()},
               {"persist_nat_mean", detail::json_num(nat_mean)},
               {"persist_adv_mean", detail::json_num(adv_mean)},
               {"unbounded_natural", unbounded(nat)},
               {"unbounded_adversarial", unbounded(adv)}};
  inv.print() << "persistence (gamma " << o.gamma << "): natural mean " << detail::num(nat_mean) << " over " << nat.size()
              << ", adversarial mean " << detail::num(adv_mean) << " over " << adv.size() << '\n';
  detail::finish(inv, m, watch);
  return m;
}

// ---------------------------------------------------------------------------------------------

struct CurveOptions {
  fs::path train_dir;
  fs::path attack_dir;
  std::size_t index = 0;  ///< adversarial example to interpolate towards
  std::size_t steps = 20;
  double gamma = 0.7;
  std::size_t samples = 1000;
  std::string sampling = "lhs";
  std::vector<double> sigmas{0.05, 0.1, 0.2, 0.4, 0.8, 1.6};
};

inline RunManifest run_curve(const CurveOptions& o, const Invocation& inv) {
  const Stopwatch watch;
  RunManifest m = detail::begin(inv, "curve");
  const LoadedRun run = load_run(o.train_dir);
  m.dataset_fingerprint = run.data.fingerprint;
  m.seed = inv.seed_or(run.data.seed);
  if (o.attack_dir.empty()) throw InvalidInput("--attack-dir is required");
  const AttackRecord a = load_attack(o.attack_dir);
  if (o.index >= a.perturbed.rows()) throw InvalidInput("--index out of range");
  const MlpClassifier clf(run.path.spec, run.path.final_theta);
  PersistenceOptions popt;
  popt.gamma = o.gamma;
  popt.n = o.samples;
  popt.sampling = detail::parse_sampling(o.sampling);
  const Rng geo = stream(m.seed, Stream::geometry);
  const auto from = run.data.splits.test.x(o.index);
  const auto to = a.perturbed.row(o.index);
  const auto curve = persistence_curve(clf, from, to, o.steps, popt, geo.split(2));
  const auto heat = stability_heatmap(clf, from, to, o.steps, o.sigmas, o.samples, geo.split(3));
  write_curve_csv((inv.out / "curve.csv").string(), curve);
  write_heatmap_csv((inv.out / "heatmap.csv").string(), heat);
  m.outputs = {"curve.csv", "heatmap.csv"};
  m.metrics = {{"index", o.index},
               {"sigma_start", detail::json_num(curve.front().sigma_star)},
               {"sigma_end", detail::json_num(curve.back().sigma_star)},
               {"class_start", curve.front().cls},
               {"class_end", curve.back().cls}};
  inv.print() << "curve: sigma* " << detail::num(curve.front().sigma_star) << " at the natural end, "
              << detail::num(curve.back().sigma_star) << " at the adversarial end\n";
  detail::finish(inv, m, watch);
  return m;
}

// ---------------------------------------------------------------------------------------------

struct BoundaryOptions {
  fs::path train_dir;
  fs::path attack_dir;
  std::size_t n = 10;
  std::size_t normal_samples = 0;  ///< 0: 2·dim + 10
  double normal_sigma = 1e-4;
};

inline RunManifest run_boundary(const BoundaryOptions& o, const Invocation& inv) {
  const Stopwatch watch;
  RunManifest m = detail::begin(inv, "boundary");
  const LoadedRun run = load_run(o.train_dir);
  m.dataset_fingerprint = run.data.fingerprint;
  m.seed = inv.seed_or(run.data.seed);
  if (o.attack_dir.empty()) throw InvalidInput("--attack-dir is required");
  const AttackRecord a = load_attack(o.attack_dir);
  const Dataset& train_ds = run.data.splits.train;
  const Dataset& test = run.data.splits.test;
  const MlpClassifier clf(run.path.spec, run.path.final_theta);
  const std::vector<std::size_t> train_pred = clf.classify_batch(train_ds.inputs);
  NormalOptions nopt;
  nopt.n_samples = o.normal_samples ? o.normal_samples : 2 * test.dim() + 10;
  nopt.sigma = o.normal_sigma;
  const Rng geo = stream(m.seed, Stream::geometry);

  auto csv = detail::open_csv(inv.out / "boundary.csv");
  csv << "example_id,kind,angle_rad,gap,low_confidence\n";
  std::vector<double> adv_angles, nat_angles;
  std::size_t done = 0;
  for (std::size_t i = 0; i < a.perturbed.rows() && done < o.n; ++i) {
    if (!a.success[i]) continue;
    ++done;
    const auto x = test.x(i);
    const auto xa = a.perturbed.row(i);
    const std::size_t adv_class = clf.classify(xa);
    // natural counterpart: the nearest training point the model puts in the adversarial class
    std::size_t best = train_ds.size();
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < train_ds.size(); ++j) {
      if (train_pred[j] != adv_class) continue;
      double dd = 0.0;
      for (std::size_t c = 0; c < x.size(); ++c) dd += (train_ds.x(j)[c] - x[c]) * (train_ds.x(j)[c] - x[c]);
      if (dd < best_d) best_d = dd, best = j;
    }
    auto emit = [&](const char* kind, std::span<const double> to, std::uint64_t s, std::vector<double>& sink) {
      Rng rng = geo.split(4 + s).split(i);
      const BoundaryCrossing c = analyze_crossing(clf, x, to, {}, nopt, rng);
      const double ang = c.angles.empty() ? std::numeric_limits<double>::quiet_NaN() : c.angles[0];
      if (!c.normal.low_confidence) sink.push_back(ang);
      csv << i << ',' << kind << ',' << detail::num(ang) << ',' << c.point.gap << ',' << (c.normal.low_confidence ? 1 : 0) << '\n';
    };
    emit("adversarial", xa, 0, adv_angles);
    if (best < train_ds.size()) emit("natural", train_ds.x(best), 1, nat_angles);
  }
  m.outputs = {"boundary.csv"};
  m.metrics = {{"n", done},
               {"mean_angle_adversarial", detail::json_num(detail::finite_mean(adv_angles))},
               {"mean_angle_natural", detail::json_num(detail::finite_mean(nat_angles))}};
  inv.print() << "boundary: mean crossing angle " << detail::num(detail::finite_mean(adv_angles)) << " rad adversarial, "
              << detail::num(detail::finite_mean(nat_angles)) << " rad natural over " << done << " examples\n";
  detail::finish(inv, m, watch);
  return m;
}

// ---------------------------------------------------------------------------------------------

struct EpkOptions {
  fs::path train_dir;
  std::vector<std::size_t> substeps{1, 10, 100, 200};
  std::size_t n = 20;
  std::string rule = "trapezoid";
};

inline Quadrature parse_rule(const std::string& s) {
  if (s == "trapezoid") return Quadrature::trapezoid;
  if (s == "midpoint") return Quadrature::midpoint;
  if (s == "left") return Quadrature::left;
  throw InvalidInput("--rule takes trapezoid, midpoint or left");
}

inline RunManifest run_epk(const EpkOptions& o, const Invocation& inv) {
  const Stopwatch watch;
  RunManifest m = detail::begin(inv, "epk");
  const LoadedRun run = load_run(o.train_dir);
  m.dataset_fingerprint = run.data.fingerprint;
  m.seed = inv.seed_or(run.data.seed);
  if (o.substeps.empty()) throw InvalidInput("--substeps needs at least one value");
  for (std::size_t t : o.substeps)
    if (t == 0) throw InvalidInput("--substeps values must be >= 1");
  const Dataset test = head(run.data.splits.test, o.n);
  EpkConfig cfg;
  cfg.rule = parse_rule(o.rule);
  const auto rows = epk_convergence_study(run.path, run.data.splits.train, test.inputs, o.substeps, cfg);
  auto csv = detail::open_csv(inv.out / "convergence.csv");
  csv << "substeps,label,max_err,mean_err\n";
  nlohmann::json jr = nlohmann::json::array();
  for (const auto& r : rows) {
    csv << r.substeps << ',' << r.label << ',' << r.max_err << ',' << r.mean_err << '\n';
    jr.push_back({{"substeps", r.substeps}, {"max_err", r.max_err}, {"mean_err", r.mean_err}});
    inv.print() << "T=" << r.substeps << " (" << r.label << "): max err " << r.max_err << ", mean err " << r.mean_err << '\n';
  }
  m.outputs = {"convergence.csv"};
  m.metrics = {{"n", test.size()}, {"rows", jr}};
  detail::finish(inv, m, watch);
  return m;
}

// ---------------------------------------------------------------------------------------------

struct OodOptions {
  fs::path train_dir;
  std::size_t n = 100;              ///< in-distribution test points
  std::vector<double> shift{-3.0, -3.0};  ///< OOD = ID points shifted along the leading coordinates
  std::string ood_csv;              ///< alternative OOD set
  std::string basis_steps = "final";  ///< final | all | every Nth step as a number
  double threshold = 0.95;
};

inline StepSelection parse_steps(const std::string& s) {
  if (s == "final") return StepSelection::final_only();
  if (s == "all") return StepSelection::every();
  std::size_t n = 0;
  try {
    n = std::stoul(s);
  } catch (const std::exception&) {
    throw InvalidInput("--basis-steps takes final, all or a stride");
  }
  if (n == 0) throw InvalidInput("--basis-steps stride must be >= 1");
  return StepSelection::every_nth(n);
}

inline RunManifest run_ood(const OodOptions& o, const Invocation& inv) {
  const Stopwatch watch;
  RunManifest m = detail::begin(inv, "ood");
  const LoadedRun run = load_run(o.train_dir);
  m.dataset_fingerprint = run.data.fingerprint;
  m.seed = inv.seed_or(run.data.seed);
  const Dataset id = head(run.data.splits.test, o.n);
  Matrix ood;
  if (!o.ood_csv.empty()) {
    ood = read_dataset_csv(o.ood_csv).inputs;
    if (ood.cols() != id.dim()) throw InvalidInput("OOD csv width differs from the model input");
  } else {
    if (o.shift.size() > id.dim()) throw InvalidInput("--shift longer than the input dimension");
    ood = id.inputs;
    for (std::size_t r = 0; r < ood.rows(); ++r)
      for (std::size_t j = 0; j < o.shift.size(); ++j) ood(r, j) += o.shift[j];
  }
  const GradientBasis basis = training_grad_basis(run.path, run.data.splits.train, parse_steps(o.basis_steps), o.threshold);
  const ModelSpec& spec = run.path.spec;
  const Vector& theta = run.path.final_theta;
  const std::size_t total = id.size() + ood.rows();
  std::vector<OodScore> scores(total);
  parallel_for(total, [&](std::size_t i) {
    const auto x = i < id.size() ? id.x(i) : ood.row(i - id.size());
    scores[i] = ood_score(basis, ood_gradient(spec, theta, x));
  });
  std::vector<int> label(total, 0);
  std::vector<double> neg, pos;
  for (std::size_t i = 0; i < total; ++i) {
    label[i] = i >= id.size();
    if (scores[i].defined) (label[i] ? pos : neg).push_back(scores[i].score);
  }
  write_ood_csv((inv.out / "ood.csv").string(), scores, label);
  write_matrix_binary((inv.out / "basis.epkm").string(), basis.v);
  const double au = neg.empty() || pos.empty() ? std::numeric_limits<double>::quiet_NaN() : auroc(neg, pos);
  m.outputs = {"ood.csv", "basis.epkm"};
  m.metrics = {{"auroc", detail::json_num(au)},
               {"basis_rank", basis.rank()},
               {"n_id", id.size()},
               {"n_ood", ood.rows()},
               {"undefined_scores", total - neg.size() - pos.size()}};
  inv.print() << "ood: basis rank " << basis.rank() << ", AUROC " << detail::num(au) << '\n';
  detail::finish(inv, m, watch);
  return m;
}

// ---------------------------------------------------------------------------------------------

struct DimensionOptions {
  fs::path train_dir;
  std::vector<std::size_t> points{0};
  double threshold = 0.95;
  std::size_t substeps = 10;
};

inline RunManifest run_dimension(const DimensionOptions& o, const Invocation& inv) {
  const Stopwatch watch;
  RunManifest m = detail::begin(inv, "dimension");
  const LoadedRun run = load_run(o.train_dir);
  m.dataset_fingerprint = run.data.fingerprint;
  m.seed = inv.seed_or(run.data.seed);
  const Dataset& test = run.data.splits.test;
  EpkConfig cfg;
  cfg.substeps = o.substeps;
  auto csv = detail::open_csv(inv.out / "dimension.csv");
  csv << "point_id,n95,singular_values\n";
  m.outputs = {"dimension.csv"};
  std::vector<double> dims;
  for (std::size_t p : o.points) {
    if (p >= test.size()) throw InvalidInput("--points index out of range");
    const InputGradients g = input_grad_matrix(run.path, run.data.splits.train, test.x(p), ClassReduction::class_sum, cfg);
    const SignalSpectrum sp = signal_dimension(g.blocks.front(), p, o.threshold);
    const std::string name = "spectrum_" + std::to_string(p) + ".csv";
    write_spectrum_csv((inv.out / name).string(), sp);
    m.outputs.push_back(name);
    csv << p << ',' << sp.n95 << ',' << sp.singular_values.size() << '\n';
    dims.push_back(static_cast<double>(sp.n95));
    inv.print() << "point " << p << ": n95 = " << sp.n95 << '\n';
  }
  m.metrics = {{"threshold", o.threshold}, {"mean_n95", detail::json_num(detail::finite_mean(dims))}};
  detail::finish(inv, m, watch);
  return m;
}

// ---------------------------------------------------------------------------------------------

struct MagOptions {
  TrainOptions train;
  double alpha = 1.0;
};

inline RunManifest run_mag(const MagOptions& o, const Invocation& inv) {
  const Stopwatch watch;
  RunManifest m = detail::begin(inv, "mag");
  if (o.train.data.project == 0) throw InvalidInput("mag needs --project k > 0");
  if (!(o.alpha > 0.0)) throw InvalidInput("--alpha must be > 0");
  const Splits s = load_splits(o.train.data, inv.seed_or(0));
  m.dataset_fingerprint = hex64(fingerprint(s.train));
  const ModelSpec spec = make_spec(o.train.hidden, s.train);
  TrainConfig cfg = make_train_config(o.train, o.train.data, inv.seed_or(0));
  Rng r_base = stream(inv.seed_or(0), Stream::train), r_mag = r_base;
  const TrainingPath base = train(s.train, spec, cfg, r_base);
  cfg.mag_alpha = o.alpha;
  const TrainingPath mag = train_mag(s.train, s.components, spec, cfg, r_mag);
  save_path(base, (inv.out / "baseline_path").string());
  save_path(mag, (inv.out / "mag_path").string());

  const MagAlignment ab = mag_alignment_metric(spec, base.final_theta, s.test, s.components);
  const MagAlignment am = mag_alignment_metric(spec, mag.final_theta, s.test, s.components);
  auto csv = detail::open_csv(inv.out / "mag.csv");
  csv << "model,point_id,ratio,cosine,clamped\n";
  for (const auto& [name, a] : {std::pair<const char*, const MagAlignment*>{"baseline", &ab}, {"mag", &am}})
    for (const auto& p : a->points) csv << name << ',' << p.index << ',' << p.ratio << ',' << p.cosine << ',' << (p.clamped ? 1 : 0) << '\n';
  const double acc_b = accuracy(spec, base.final_theta, s.test.inputs, s.test.labels);
  const double acc_m = accuracy(spec, mag.final_theta, s.test.inputs, s.test.labels);
  m.outputs = {"mag.csv", "baseline_path/manifest.json", "mag_path/manifest.json"};
  m.metrics = {{"baseline_mean_cosine", ab.mean_cosine}, {"mag_mean_cosine", am.mean_cosine},
               {"baseline_test_accuracy", acc_b},        {"mag_test_accuracy", acc_m},
               {"components", s.components.rows()}};
  inv.print() << "mag: mean alignment cosine " << ab.mean_cosine << " baseline, " << am.mean_cosine << " with alpha " << o.alpha
              << "; test acc " << acc_b << " / " << acc_m << '\n';
  detail::finish(inv, m, watch);
  return m;
}

}  // namespace epk::cli
