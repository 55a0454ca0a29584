#pragma once

// Line-based `key = value` run configuration. Files and command-line
// overrides are merged into one ConfigMap, then resolved into Settings.

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cardiovae/data.hpp"
#include "cardiovae/model.hpp"
#include "cardiovae/objectives.hpp"
#include "cardiovae/training.hpp"

namespace cardiovae {

struct ConfigEntry {
  std::string value;
  std::string origin;  // "path:line" or "--flag"
};

using ConfigMap = std::map<std::string, ConfigEntry>;

/// Blank lines and lines starting with '#' are skipped. Every malformed line
/// is reported in one Error(config) as "<source>:<line>: ...".
ConfigMap parse_config_text(const std::string& text, const std::string& source);
ConfigMap read_config_file(const std::filesystem::path& path);

/// Entries of `overrides` replace those of `base`.
void merge_config(ConfigMap& base, const ConfigMap& overrides);

struct Settings {
  std::string arch_preset = "desk";
  ArchConfig arch = ArchConfig::desk();
  ObjectiveConfig objective;
  RunConfig pretrain;
  RunConfig finetune = RunConfig::finetune_defaults();
  SynthConfig synth;  // dims follow `arch`
  std::uint64_t seed = 0;
  std::size_t folds = 10;
  std::size_t ig_steps = 256;
  std::vector<double> lambda_grid{0.1, 0.5, 1.0, 2.0, 10.0};
  bool grid_search = false;  // pretrain: pick lambdas on the 90:10 split, then train on all data

  // Inputs named by the command line, kept so a run replays from its resolved config.
  std::string data;        // dataset directory or manifest
  std::string checkpoint;  // CVXG file
  std::string sample;      // sample id for attribution
};

/// Every accepted key, in the order render_settings writes them.
const std::vector<std::string>& config_keys();

/// Applies `arch` first, then every other key; unknown keys and bad values
/// are reported together with their origins.
Settings resolve_settings(const ConfigMap& cfg);

/// Complete `key = value` listing; resolving it again yields the same Settings.
std::string render_settings(const Settings& s);

}  // namespace cardiovae
