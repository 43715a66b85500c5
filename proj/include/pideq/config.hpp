#pragma once

// Experiment configuration documents (JSON) with strict key checking and
// dotted-path overrides.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "pideq/physics.hpp"
#include "pideq/rootfind.hpp"
#include "pideq/training.hpp"

namespace pideq::config {

using Json = nlohmann::ordered_json;

struct SweepConfig {
  std::vector<int> states{80, 40, 20, 10, 5, 2};
  std::vector<double> kappa{0.0, 0.1, 1.0, 10.0};
  std::vector<rootfind::Method> solvers{rootfind::Method::Simple, rootfind::Method::Anderson,
                                        rootfind::Method::Broyden};
  /// Number of seeds used for the kappa = 0 point.
  int kappa_zero_runs = 1;
  /// IAE level used for the epochs-to-threshold column.
  double iae_threshold = 1e-2;
};

struct ExperimentConfig {
  training::TrainConfig train{};
  physics::VdpConfig vdp{};
  double t0 = 0.0;
  double horizon = 2.0;
  std::vector<double> y0{0.0, 0.1};
  int runs = 5;
  double null_row_threshold = 1e-3;
  /// Moving-average window for plots, in epochs.
  int moving_average = 100;
  SweepConfig sweep{};

  [[nodiscard]] physics::IvpSpec ivp() const;
  /// Throws ConfigError.
  void validate() const;
};

/// Fully materialised document for the default configuration.
Json default_document();

/// Strict conversion: unknown keys and ill-typed values raise ConfigError
/// naming the offending path.
ExperimentConfig from_json(const Json& doc);
Json to_json(const ExperimentConfig& cfg);

/// Applies `KEY=VALUE` where KEY is a dotted path. VALUE is parsed as JSON
/// and falls back to a plain string.
void apply_override(Json& doc, std::string_view assignment);

/// Reads the file (if any) over the defaults, then applies overrides.
Json resolve_document(const std::filesystem::path* path, const std::vector<std::string>& overrides);

/// FNV-1a over the canonical dump with the seed removed, as 8 hex digits.
std::string config_hash(const Json& resolved);

std::string run_id(training::ModelKind kind, std::uint64_t seed, const std::string& hash);

}  // namespace pideq::config
