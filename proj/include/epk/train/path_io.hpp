#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <string>

#include <json.hpp>

#include "epk/error.hpp"
#include "epk/model/checkpoint.hpp"
#include "epk/train/train.hpp"

namespace epk {

inline const char* to_string(BatchMode m) { return m == BatchMode::full ? "full" : "shuffled"; }
inline const char* to_string(LossKind l) { return l == LossKind::cce ? "cce" : "mse"; }
inline const char* to_string(CheckpointPolicy p) {
  return p == CheckpointPolicy::all ? "all" : p == CheckpointPolicy::endpoints ? "endpoints" : "spill";
}

inline BatchMode batch_mode_from(const std::string& s) {
  if (s == "full") return BatchMode::full;
  if (s == "shuffled") return BatchMode::shuffled;
  throw InvalidInput("unknown batch mode '" + s + "'");
}
inline LossKind loss_from(const std::string& s) {
  if (s == "cce") return LossKind::cce;
  if (s == "mse") return LossKind::mse;
  throw InvalidInput("unknown loss '" + s + "'");
}
inline CheckpointPolicy checkpoint_policy_from(const std::string& s) {
  if (s == "all") return CheckpointPolicy::all;
  if (s == "endpoints") return CheckpointPolicy::endpoints;
  if (s == "spill") return CheckpointPolicy::spill;
  throw InvalidInput("unknown checkpoint policy '" + s + "'");
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"steps", c.steps},
          {"lr", c.lr},
          {"lr_decay", c.lr_decay},
          {"decay_every", c.decay_every},
          {"lr_list", c.lr_list},
          {"batch_mode", to_string(c.batch_mode)},
          {"batch_size", c.batch_size},
          {"loss", to_string(c.loss)},
          {"mag_alpha", c.mag_alpha},
          {"adversarial", {{"enabled", c.adversarial.enabled}, {"epsilon", c.adversarial.epsilon},
                           {"box", {c.adversarial.box.lo, c.adversarial.box.hi, c.adversarial.box.enabled}}}},
          {"final_layer_zero", c.final_layer_zero},
          {"init_scale", c.init_scale},
          {"checkpoints", to_string(c.checkpoints)},
          {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.steps = j.at("steps").get<std::size_t>();
  c.lr = j.at("lr").get<double>();
  c.lr_decay = j.at("lr_decay").get<double>();
  c.decay_every = j.at("decay_every").get<std::size_t>();
  c.lr_list = j.at("lr_list").get<std::vector<double>>();
  c.batch_mode = batch_mode_from(j.at("batch_mode").get<std::string>());
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.loss = loss_from(j.at("loss").get<std::string>());
  c.mag_alpha = j.at("mag_alpha").get<double>();
  const auto& a = j.at("adversarial");
  c.adversarial.enabled = a.at("enabled").get<bool>();
  c.adversarial.epsilon = a.at("epsilon").get<double>();
  c.adversarial.box = {a.at("box").at(0).get<double>(), a.at("box").at(1).get<double>(), a.at("box").at(2).get<bool>()};
  c.final_layer_zero = j.at("final_layer_zero").get<bool>();
  c.init_scale = j.at("init_scale").get<double>();
  c.checkpoints = checkpoint_policy_from(j.at("checkpoints").get<std::string>());
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

/// Directory layout: manifest.json (spec, config, step sizes, batches), checkpoints/step_NNNNNN.epkc
/// for every retained θ_s, loss.csv (step,lr,loss), and mag_components.epkm for MAG runs.
inline void save_path(const TrainingPath& path, const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path root(dir), cps = root / "checkpoints";
  fs::create_directories(cps);
  nlohmann::json m;
  m["format"] = "epk-training-path";
  m["version"] = kCheckpointVersion;
  m["layer_sizes"] = path.spec.layer_sizes;
  m["config"] = to_json(path.config);
  m["n_train"] = path.n_train;
  m["step_sizes"] = path.step_sizes;
  m["batches"] = path.batches;
  m["epoch_start"] = path.epoch_start;
  std::vector<std::size_t> retained;
  for (std::size_t s = 0; s <= path.steps(); ++s) {
    if (!path.has_checkpoint(s)) continue;
    char name[32];
    std::snprintf(name, sizeof name, "step_%06zu.epkc", s);
    write_checkpoint((cps / name).string(), path.spec, path.checkpoint(s));
    retained.push_back(s);
  }
  m["retained_checkpoints"] = retained;
  if (path.is_mag()) write_matrix_binary((root / "mag_components.epkm").string(), path.mag_components);
  std::ofstream(root / "manifest.json", std::ios::binary) << m.dump(2) << '\n';
  std::ofstream loss(root / "loss.csv", std::ios::binary);
  loss << "step,lr,loss\n" << std::setprecision(17);
  for (std::size_t s = 0; s < path.loss_trace.size(); ++s) loss << s << ',' << path.step_sizes[s] << ',' << path.loss_trace[s] << '\n';
  std::ofstream(root / "final.json", std::ios::binary) << checkpoint_json(path.spec, path.final_theta).dump() << '\n';
}

/// Loads a saved path. Checkpoints stay on disk and are read on demand.
inline TrainingPath load_path(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  std::ifstream in(root / "manifest.json", std::ios::binary);
  if (!in) throw InvalidPath("load_path: no manifest.json in " + dir);
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("load_path: manifest: ") + e.what(), e.byte);
  }
  if (m.value("format", "") != "epk-training-path") throw FormatError("load_path: not a training-path manifest", 0);
  TrainingPath p;
  p.spec.layer_sizes = m.at("layer_sizes").get<std::vector<std::size_t>>();
  p.spec.validate();
  p.config = train_config_from_json(m.at("config"));
  p.config.checkpoints = CheckpointPolicy::spill;
  p.config.spill_dir = (root / "checkpoints").string();
  p.n_train = m.at("n_train").get<std::size_t>();
  p.step_sizes = m.at("step_sizes").get<std::vector<double>>();
  p.batches = m.at("batches").get<std::vector<std::vector<std::uint32_t>>>();
  p.epoch_start = m.at("epoch_start").get<std::vector<std::size_t>>();
  p.checkpoints.assign(p.steps() + 1, Vector{});
  if (p.is_mag()) p.mag_components = read_matrix_binary((root / "mag_components.epkm").string());
  std::ifstream loss(root / "loss.csv");
  std::string line;
  std::getline(loss, line);
  while (std::getline(loss, line)) p.loss_trace.push_back(std::stod(line.substr(line.rfind(',') + 1)));
  const std::size_t last = p.steps();
  if (!p.has_checkpoint(last)) throw InvalidPath("load_path: final checkpoint missing");
  p.final_theta = p.checkpoint(last);
  return p;
}

}  // namespace epk
