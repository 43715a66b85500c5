#pragma once

// Command implementations behind pideq-lab: reference generation, training
// groups, hyperparameter sweeps and comparison reports.

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pideq/config.hpp"
#include "pideq/training.hpp"

namespace pideq::experiments {

enum ExitCode : int { kSuccess = 0, kUsageError = 1, kNumericalFailure = 2 };

struct CommandOptions {
  std::optional<std::filesystem::path> config;
  std::vector<std::string> overrides;
  int jobs = 1;
  bool force = false;
  std::filesystem::path out;
  /// Progress and diagnostics; null silences them.
  std::ostream* log = nullptr;
};

std::string_view version();

/// Defaults, then the config file, then overrides, then PIDEQ_LAB_SEED.
config::Json resolve(const CommandOptions& opts);

/// Creates `dir`, or throws ConfigError if it exists, is non-empty and
/// `force` is false.
void prepare_output_dir(const std::filesystem::path& dir, bool force);

struct GroupOutcome {
  training::SweepReport report;
  std::vector<std::string> run_ids;
  bool all_ok = true;
};

/// Trains `n_runs` seeds of one configuration inside `dir`: one
/// subdirectory per run id plus manifest.json, config.resolved.json,
/// aggregate.csv, loss.svg and iae.svg.
GroupOutcome run_group(const config::Json& resolved, const std::filesystem::path& dir, int n_runs, int jobs,
                       std::ostream* log);

enum class SweepKind { States, Kappa, Solver };
SweepKind parse_sweep_kind(std::string_view name);
std::string_view to_string(SweepKind kind);

int cmd_reference(const CommandOptions& opts);
int cmd_train(const CommandOptions& opts);
int cmd_sweep(SweepKind kind, const CommandOptions& opts);
int cmd_report(const std::vector<std::filesystem::path>& group_dirs, const CommandOptions& opts);

/// Runs `body`, mapping ConfigError and std::invalid_argument to exit code 1
/// and other failures to 2 with a message on `log`.
int guarded(std::ostream* log, const std::function<int()>& body);

}  // namespace pideq::experiments
