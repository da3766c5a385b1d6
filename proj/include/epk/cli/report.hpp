#pragma once

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "epk/cli/manifest.hpp"
#include "epk/error.hpp"

namespace epk::cli {

/// Commands whose metrics fill the summary columns; a run missing any of them is partial.
inline const std::vector<std::string>& report_commands() {
  static const std::vector<std::string> c{"train", "attack", "persist"};
  return c;
}

/// Collects every <command>.manifest.json in the run directory. The summary carries the
/// accuracy, mean distortion and mean persistence columns; anything that cannot be filled, and
/// any declared output that no longer exists, is listed under "missing" with partial = true.
inline nlohmann::json emit_report(const std::filesystem::path& run_dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(run_dir)) throw InvalidPath("report: " + run_dir.string() + " is not a directory");
  std::vector<fs::path> files;
  const std::string suffix = ".manifest.json";
  for (const auto& e : fs::directory_iterator(run_dir)) {
    const std::string name = e.path().filename().string();
    if (e.is_regular_file() && name.size() > suffix.size() && name.ends_with(suffix)) files.push_back(e.path());
  }
  if (files.empty()) throw InvalidPath("report: no run manifests in " + run_dir.string());
  std::sort(files.begin(), files.end());

  nlohmann::json commands = nlohmann::json::object();
  nlohmann::json missing = nlohmann::json::array();
  for (const auto& f : files) {
    const RunManifest m = manifest_from_json(read_json(f));
    for (const auto& o : m.outputs)
      if (!fs::exists(run_dir / o)) missing.push_back(m.command + ":" + o);
    commands[m.command] = {{"metrics", m.metrics},
                           {"seed", m.seed},
                           {"dataset_fingerprint", m.dataset_fingerprint},
                           {"code_version", m.code_version}};
  }
  for (const auto& c : report_commands())
    if (!commands.contains(c)) missing.push_back(c);

  auto pick = [&](const char* cmd, const char* key) -> nlohmann::json {
    if (!commands.contains(cmd)) return nullptr;
    const auto& mt = commands[cmd]["metrics"];
    return mt.contains(key) ? mt[key] : nlohmann::json(nullptr);
  };
  nlohmann::json summary = {{"train_accuracy", pick("train", "train_accuracy")},
                            {"test_accuracy", pick("train", "test_accuracy")},
                            {"avg_dist", pick("attack", "mean_distortion")},
                            {"attack_success_rate", pick("attack", "success_rate")},
                            {"persist_nat_mean", pick("persist", "persist_nat_mean")},
                            {"persist_adv_mean", pick("persist", "persist_adv_mean")}};
  for (const auto& [k, v] : summary.items())
    if (v.is_null()) missing.push_back("summary:" + k);

  return {{"format", "epk-run-report"},
          {"commands", commands},
          {"summary", summary},
          {"missing", missing},
          {"partial", !missing.empty()}};
}

}  // namespace epk::cli
