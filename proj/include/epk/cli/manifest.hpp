#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "epk/error.hpp"

#ifndef EPK_CODE_VERSION
#define EPK_CODE_VERSION "unknown"
#endif

namespace epk::cli {

inline constexpr const char* kCodeVersion = EPK_CODE_VERSION;

/// Record of one command invocation. Everything except wall_time_s is a function of the inputs.
struct RunManifest {
  std::string command;
  std::map<std::string, std::string> config;  ///< every option of the subcommand, defaults included
  std::uint64_t seed = 0;
  std::string dataset_fingerprint = "none";
  std::string code_version = kCodeVersion;
  std::vector<std::string> outputs;  ///< file names relative to the output directory
  double wall_time_s = 0.0;
  nlohmann::json metrics = nlohmann::json::object();
};

inline nlohmann::json to_json(const RunManifest& m) {
  return {{"format", "epk-run-manifest"},
          {"command", m.command},
          {"config", m.config},
          {"seed", m.seed},
          {"dataset_fingerprint", m.dataset_fingerprint},
          {"code_version", m.code_version},
          {"outputs", m.outputs},
          {"wall_time_s", m.wall_time_s},
          {"metrics", m.metrics}};
}

inline RunManifest manifest_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "epk-run-manifest") throw FormatError("not a run manifest", 0);
  RunManifest m;
  m.command = j.at("command").get<std::string>();
  m.config = j.at("config").get<std::map<std::string, std::string>>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.dataset_fingerprint = j.at("dataset_fingerprint").get<std::string>();
  m.code_version = j.at("code_version").get<std::string>();
  m.outputs = j.at("outputs").get<std::vector<std::string>>();
  m.wall_time_s = j.at("wall_time_s").get<double>();
  m.metrics = j.at("metrics");
  return m;
}

inline std::string manifest_name(const std::string& command) { return command + ".manifest.json"; }

inline void write_json(const std::filesystem::path& file, const nlohmann::json& j) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw InvalidInput("cannot write " + file.string());
  out << j.dump(2) << '\n';
}

inline nlohmann::json read_json(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw InvalidPath("cannot read " + file.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(file.string() + ": " + e.what(), e.byte);
  }
}

inline void write_manifest(const std::filesystem::path& dir, const RunManifest& m) {
  write_json(dir / manifest_name(m.command), to_json(m));
}

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

}  // namespace epk::cli
