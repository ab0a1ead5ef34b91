#pragma once

// Command-line front end: train, evaluate, predict, overlay and summarize.
//
// Run configuration is a YAML document of flat dotted keys (nested maps are
// flattened, so `model: {depth: 4}` and `model.depth: 4` are equivalent).
// Overrides apply in this order: preset, config file, --set, dedicated flags.
//
// Exit codes: 0 success, 1 runtime failure, 2 configuration or input error.

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dtrattunet/data.hpp"
#include "dtrattunet/model.hpp"
#include "dtrattunet/training.hpp"

namespace dtrattunet {

inline constexpr const char* kOutputRootEnv = "DTRATTUNET_OUTPUT_ROOT";

enum class SplitMode { Slice, Scan, Subset };

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DatasetLayout layout;
  PreprocessOptions preprocess;
  std::string data_root;
  std::string test_root;  // separate test corpus; empty splits data_root
  SplitMode split_mode = SplitMode::Slice;
  SplitSpec split;
  std::string output_dir = "runs";
  bool deterministic = true;

  nlohmann::json resolved;   // every key with its final value
  nlohmann::json file;       // keys set by the config file
  nlohmann::json overrides;  // keys set on the command line
};

struct ConfigEntry {
  std::string key;
  std::string value;  // YAML text (scalar or flow sequence)
};

// Every accepted key with its default value for a preset ("standard" or "desk").
nlohmann::json config_defaults(const std::string& preset = "standard");

// Resolves the config file (optional) plus ordered command-line overrides.
// Unknown keys and ill-typed values are collected and reported together as a
// ConfigError naming each offending key.
RunConfig resolve_run_config(const std::optional<std::filesystem::path>& config_file,
                             const std::vector<ConfigEntry>& overrides);

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace dtrattunet
