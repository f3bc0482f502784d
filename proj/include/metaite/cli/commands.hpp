#pragma once

#include "metaite/cli/config.hpp"
#include "metaite/eval/experiment.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace metaite::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitConfig = 2;

struct CommandOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<int> jobs;
  std::optional<std::string> mode;
};

/// Resolves the config file, environment overrides and command-line flags.
RunConfig resolve_config(const CommandOptions& options);

void cmd_gen_data(const RunConfig& config, std::ostream& out);
void cmd_train(const RunConfig& config, std::ostream& out, std::ostream& log);
void cmd_estimate(const RunConfig& config, std::ostream& out);
void cmd_evaluate(const RunConfig& config, std::ostream& out);
void cmd_sweep(const RunConfig& config, std::ostream& out);

/// Runs `command` and maps failures to exit codes: 2 for configuration and
/// usage errors, 1 for runtime failures.
int run_command(const std::string& command, const CommandOptions& options, std::ostream& out, std::ostream& err);

/// Checkpoint: magic, JSON header (method, kind, k, target, resolved config),
/// standardizer, outcome scaling and parameters.
void write_checkpoint(const std::string& path, const FittedMethod& fitted, const RunConfig& config);
FittedMethod read_checkpoint(const std::string& path);

std::string report_json(const MetricsReport& report);
MetricsReport report_from_json(const std::string& text);
std::string report_csv(const MetricsReport& report);

/// Predictions CSV: header y_hat_0..y_hat_{k-1}.
std::string predictions_csv(const Matrix& y_hat);
Matrix load_predictions(const std::string& path);

/// Sweep cell file names derive from cell ids.
std::string cell_file_name(const std::string& id);

}  // namespace metaite::cli
