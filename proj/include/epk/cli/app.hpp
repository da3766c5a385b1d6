#pragma once

#include <algorithm>
#include <exception>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "epk/cli/commands.hpp"
#include "epk/cli/report.hpp"
#include "epk/numerics/parallel.hpp"

namespace epk::cli {

namespace detail {

inline bool given_on_command_line(const std::vector<std::string>& args, const std::string& key) {
  const std::string flag = "--" + key;
  return std::any_of(args.begin(), args.end(), [&](const std::string& a) { return a == flag || a.starts_with(flag + "="); });
}

/// Value of --config if present, else empty.
inline std::string config_path(const std::vector<std::string>& args) {
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) return args[i + 1];
    if (args[i].starts_with("--config=")) return args[i].substr(9);
  }
  return {};
}

/// Flat key=value file read with CLI11's config parser; every key not also given as a flag is
/// turned into --key=value right after the subcommand name, so flags win.
inline std::vector<std::string> apply_config(std::vector<std::string> args, std::size_t sub_pos) {
  const std::string file = config_path(args);
  if (file.empty()) return args;
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigTOML().from_file(file);
  } catch (const CLI::FileError&) {
    throw CLI::FileError::Missing(file);
  }
  std::vector<std::string> injected;
  for (const auto& it : items) {
    if (it.name == "++" || it.name == "--") continue;  // section markers
    if (!it.parents.empty()) throw CLI::ConversionError("config file must be flat key=value, got section entry '" + it.fullname() + "'");
    if (given_on_command_line(args, it.name)) continue;
    std::string v;
    for (std::size_t i = 0; i < it.inputs.size(); ++i) v += (i ? "," : "") + it.inputs[i];
    injected.push_back("--" + it.name + "=" + v);
  }
  args.insert(args.begin() + static_cast<std::ptrdiff_t>(sub_pos + 1), injected.begin(), injected.end());
  return args;
}

/// Every option of the subcommand with its effective value.
inline std::map<std::string, std::string> snapshot(const CLI::App& sub) {
  std::map<std::string, std::string> out;
  for (const CLI::Option* opt : sub.get_options()) {
    if (opt->get_lnames().empty()) continue;
    const std::string name = opt->get_lnames().front();
    if (name == "help" || name == "config") continue;
    std::string v;
    if (opt->count() > 0) {
      const auto vals = opt->reduced_results();
      for (std::size_t i = 0; i < vals.size(); ++i) v += (i ? "," : "") + vals[i];
    } else {
      v = opt->get_default_str();
      if (v.size() >= 2 && v.front() == '[' && v.back() == ']') v = v.substr(1, v.size() - 2);
    }
    out[name] = v;
  }
  return out;
}

struct Common {
  std::string out;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 0;
  std::string config;
};

inline void add_common(CLI::App* sub, Common& c, bool needs_out = true) {
  auto* o = sub->add_option("--out", c.out, "Output directory");
  if (needs_out) o->required();
  sub->add_option("--seed", c.seed, "Root seed (default: the training run's, else 0)");
  sub->add_option("--threads", c.threads, "Worker threads (0: logical cores)")->capture_default_str();
  sub->add_option("--config", c.config, "Flat key=value file; flags override its entries");
}

inline void add_data(CLI::App* sub, DataOptions& d) {
  sub->add_option("--dataset", d.kind, "toy, mnist or csv")->capture_default_str();
  sub->add_option("--per-class", d.per_class, "Toy training points per class")->capture_default_str();
  sub->add_option("--dim", d.dim, "Toy input dimension")->capture_default_str();
  sub->add_option("--noise", d.noise, "Toy class standard deviation")->capture_default_str();
  sub->add_option("--n-train", d.n_train, "MNIST training points")->capture_default_str();
  sub->add_option("--n-test", d.n_test, "Test points")->capture_default_str();
  sub->add_option("--mnist-dir", d.mnist_dir, "Directory with the IDX files")->capture_default_str();
  sub->add_option("--train-csv", d.train_csv, "Training CSV (x0..,label)");
  sub->add_option("--test-csv", d.test_csv, "Test CSV (x0..,label)");
  sub->add_option("--project", d.project, "Project inputs onto the top-k principal components (0: off)")->capture_default_str();
}

inline void add_training(CLI::App* sub, TrainOptions& t) {
  add_data(sub, t.data);
  sub->add_option("--hidden", t.hidden, "Hidden layer widths")->delimiter(',')->capture_default_str();
  sub->add_option("--steps", t.steps, "Gradient steps")->capture_default_str();
  sub->add_option("--lr", t.lr, "Per-example step size")->capture_default_str();
  sub->add_option("--batch-size", t.batch_size, "Minibatch size (0: full batch)")->capture_default_str();
  sub->add_option("--loss", t.loss, "cce or mse")->capture_default_str();
  sub->add_option("--init-scale", t.init_scale, "Multiplier on the He weight variance")->capture_default_str();
  sub->add_option("--final-layer-zero", t.final_layer_zero, "Zero the last layer at init")->capture_default_str();
  sub->add_option("--checkpoints", t.checkpoints, "all or endpoints")->capture_default_str();
  sub->add_option("--adv-epsilon", t.adv_epsilon, "FGSM adversarial training step (0: off)")->capture_default_str();
  sub->add_option("--box", t.box, "Input box: auto, none or lo,hi")->capture_default_str();
}

}  // namespace detail

/// Parses argv and runs one subcommand. Returns 0 on success, 2 on a usage error (the usage text
/// goes to `err`) and 1 when the command itself fails.
inline int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Exact path kernel experiments", "epk_cli"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);  // a repeated flag overrides
  detail::Common common;

  TrainOptions train_o;
  AttackOptions attack_o;
  PersistOptions persist_o;
  CurveOptions curve_o;
  BoundaryOptions boundary_o;
  EpkOptions epk_o;
  OodOptions ood_o;
  DimensionOptions dim_o;
  MagOptions mag_o;
  std::string report_run;

  auto* train_c = app.add_subcommand("train", "Train a model and save its path");
  detail::add_common(train_c, common);
  detail::add_training(train_c, train_o);

  auto* attack_c = app.add_subcommand("attack", "Attack test points of a trained model");
  detail::add_common(attack_c, common);
  attack_c->add_option("--train-dir", attack_o.train_dir, "Output directory of train")->required();
  attack_c->add_option("--attack", attack_o.attack, "fgsm, igsm, pgd or lbfgs")->capture_default_str();
  attack_c->add_option("--epsilon", attack_o.epsilon, "Perturbation budget")->capture_default_str();
  attack_c->add_option("--alpha", attack_o.alpha, "Step size")->capture_default_str();
  attack_c->add_option("--iters", attack_o.iters, "Iterations")->capture_default_str();
  attack_c->add_option("--target", attack_o.target, "Target class (-1: untargeted)")->capture_default_str();
  attack_c->add_option("--n", attack_o.n, "Test points to attack")->capture_default_str();
  attack_c->add_option("--box", attack_o.box, "Input box: auto, none or lo,hi")->capture_default_str();

  auto* persist_c = app.add_subcommand("persist", "gamma-persistence of natural and adversarial points");
  detail::add_common(persist_c, common);
  persist_c->add_option("--gamma", persist_o.gamma, "Stability level")->capture_default_str();
  persist_c->add_option("--samples", persist_o.samples, "Gaussian samples per stability estimate")->capture_default_str();
  persist_c->add_option("--precision", persist_o.precision, "Tolerance on the stability estimate")->capture_default_str();
  persist_c->add_option("--sampling", persist_o.sampling, "lhs or iid")->capture_default_str();
  persist_c->add_option("--oracle", persist_o.oracle, "wedge: compare against the closed form");
  persist_c->add_option("--k", persist_o.k, "Wedge sheets")->capture_default_str();
  persist_c->add_option("--d", persist_o.d, "Distance to each sheet")->capture_default_str();
  persist_c->add_option("--dim", persist_o.dim, "Wedge ambient dimension (0: k)")->capture_default_str();
  persist_c->add_option("--train-dir", persist_o.train_dir, "Output directory of train");
  persist_c->add_option("--attack-dir", persist_o.attack_dir, "Output directory of attack");
  persist_c->add_option("--n", persist_o.n, "Natural test points")->capture_default_str();

  auto* curve_c = app.add_subcommand("curve", "Persistence along the segment to an adversarial example");
  detail::add_common(curve_c, common);
  curve_c->add_option("--train-dir", curve_o.train_dir, "Output directory of train")->required();
  curve_c->add_option("--attack-dir", curve_o.attack_dir, "Output directory of attack")->required();
  curve_c->add_option("--index", curve_o.index, "Attacked test point")->capture_default_str();
  curve_c->add_option("--steps", curve_o.steps, "Segment subdivisions")->capture_default_str();
  curve_c->add_option("--gamma", curve_o.gamma, "Stability level")->capture_default_str();
  curve_c->add_option("--samples", curve_o.samples, "Gaussian samples per estimate")->capture_default_str();
  curve_c->add_option("--sampling", curve_o.sampling, "lhs or iid")->capture_default_str();
  curve_c->add_option("--sigmas", curve_o.sigmas, "Heatmap noise levels")->delimiter(',')->capture_default_str();

  auto* boundary_c = app.add_subcommand("boundary", "Decision-boundary crossing angles");
  detail::add_common(boundary_c, common);
  boundary_c->add_option("--train-dir", boundary_o.train_dir, "Output directory of train")->required();
  boundary_c->add_option("--attack-dir", boundary_o.attack_dir, "Output directory of attack")->required();
  boundary_c->add_option("--n", boundary_o.n, "Successful adversarial examples to analyse")->capture_default_str();
  boundary_c->add_option("--normal-samples", boundary_o.normal_samples, "Samples per normal (0: 2*dim+10)")->capture_default_str();
  boundary_c->add_option("--normal-sigma", boundary_o.normal_sigma, "Sampling radius around the boundary point")->capture_default_str();

  auto* epk_c = app.add_subcommand("epk", "Path-kernel prediction error against the model");
  detail::add_common(epk_c, common);
  epk_c->add_option("--train-dir", epk_o.train_dir, "Output directory of train")->required();
  epk_c->add_option("--substeps", epk_o.substeps, "Quadrature points per step")->delimiter(',')->capture_default_str();
  epk_c->add_option("--n", epk_o.n, "Test points")->capture_default_str();
  epk_c->add_option("--rule", epk_o.rule, "trapezoid, midpoint or left")->capture_default_str();

  auto* ood_c = app.add_subcommand("ood", "Out-of-distribution scores from the training-gradient basis");
  detail::add_common(ood_c, common);
  ood_c->add_option("--train-dir", ood_o.train_dir, "Output directory of train")->required();
  ood_c->add_option("--n", ood_o.n, "In-distribution test points")->capture_default_str();
  ood_c->add_option("--shift", ood_o.shift, "OOD shift of the leading coordinates")->delimiter(',')->capture_default_str();
  ood_c->add_option("--ood-csv", ood_o.ood_csv, "OOD points as CSV instead of a shift");
  ood_c->add_option("--basis-steps", ood_o.basis_steps, "final, all or a stride")->capture_default_str();
  ood_c->add_option("--threshold", ood_o.threshold, "Explained-variance threshold of the basis")->capture_default_str();

  auto* dim_c = app.add_subcommand("dimension", "Signal dimension of test predictions");
  detail::add_common(dim_c, common);
  dim_c->add_option("--train-dir", dim_o.train_dir, "Output directory of train")->required();
  dim_c->add_option("--points", dim_o.points, "Test point indices")->delimiter(',')->capture_default_str();
  dim_c->add_option("--threshold", dim_o.threshold, "Explained-variance threshold")->capture_default_str();
  dim_c->add_option("--substeps", dim_o.substeps, "Quadrature points per step")->capture_default_str();

  auto* mag_c = app.add_subcommand("mag", "Manifold-aligned gradient training against a baseline");
  detail::add_common(mag_c, common);
  detail::add_training(mag_c, mag_o.train);
  mag_c->add_option("--alpha", mag_o.alpha, "Weight of the alignment term")->capture_default_str();

  auto* report_c = app.add_subcommand("report", "Summarise a run directory as JSON");
  report_c->add_option("--run", report_run, "Run directory")->required();

  std::vector<std::string> args(argv + 1, argv + argc);
  const CLI::App* named = &app;  // for the usage text
  std::size_t sub_pos = args.size();
  for (std::size_t i = 0; i < args.size() && sub_pos == args.size(); ++i)
    for (const CLI::App* s : std::as_const(app).get_subcommands([](const CLI::App*) { return true; }))
      if (args[i] == s->get_name()) sub_pos = i, named = s;
  try {
    if (sub_pos < args.size()) args = detail::apply_config(std::move(args), sub_pos);
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << named->help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << named->help();
    return 2;
  }

  try {
    const CLI::App* sub = app.get_subcommands().front();
    if (sub == report_c) {
      const nlohmann::json rep = emit_report(report_run);
      write_json(std::filesystem::path(report_run) / "report.json", rep);
      out << rep.dump(2) << '\n';
      return 0;
    }
    set_threads(common.threads);
    Invocation inv{common.out, common.seed, detail::snapshot(*sub), &out};
    if (sub == train_c) run_train(train_o, inv);
    else if (sub == attack_c) run_attack(attack_o, inv);
    else if (sub == persist_c) run_persist(persist_o, inv);
    else if (sub == curve_c) run_curve(curve_o, inv);
    else if (sub == boundary_c) run_boundary(boundary_o, inv);
    else if (sub == epk_c) run_epk(epk_o, inv);
    else if (sub == ood_c) run_ood(ood_o, inv);
    else if (sub == dim_c) run_dimension(dim_o, inv);
    else if (sub == mag_c) run_mag(mag_o, inv);
    return 0;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace epk::cli
