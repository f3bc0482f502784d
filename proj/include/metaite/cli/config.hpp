#pragma once

#include "metaite/eval/experiment.hpp"

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace metaite::cli {

/// Schema violations, unknown keys and usage mistakes (exit code 2).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct PathsConfig {
  std::string train;
  std::string test;
  std::string checkpoint;
  std::string predictions;
};

struct SweepConfig {
  std::string mode = "robustness";  // robustness | ablation | repeat
  std::vector<std::string> methods{"metaite", "ols_lr2"};
  std::vector<double> fractions{1.0, 0.5, 0.2, 0.1, 0.05};
  std::vector<double> grid{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  int repeats = 10;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "metaite-out";
  int jobs = 1;
  DatasetSpec dataset;
  ImbalanceSpec imbalance;
  MethodSpec method;
  MetaConfig meta;
  PathsConfig paths;
  SweepConfig sweep;

  RunPlan plan() const;
  /// 16 hex digits over the canonical JSON of everything except out_dir and jobs.
  std::string hash() const;
  std::string to_json() const;
};

/// Parses a JSON config document. Keys missing from the document keep their
/// defaults; unknown keys raise ConfigError naming the key. `env` holds
/// METAITE_<KEY> / METAITE_<SECTION>__<KEY> overrides applied on top.
/// Unless set explicitly, meta.mu/epsilon/gamma follow default_loss_weights.
RunConfig parse_config(const std::string& text, const std::map<std::string, std::string>& env = {});
RunConfig load_config(const std::string& path, const std::map<std::string, std::string>& env = {});

/// METAITE_* variables from the process environment.
std::map<std::string, std::string> environment_overrides();

}  // namespace metaite::cli
