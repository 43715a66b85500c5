// pideq-lab: reference generation, training, sweeps and reports.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pideq/experiments.hpp"

namespace ex = pideq::experiments;

namespace {

void add_common(CLI::App* cmd, ex::CommandOptions& opts, std::string& config_path, bool with_config = true) {
  if (with_config) {
    cmd->add_option("--config", config_path, "JSON experiment configuration")->check(CLI::ExistingFile);
    cmd->add_option("--override", opts.overrides, "KEY=VALUE with a dotted KEY (repeatable)");
  }
  cmd->add_option("--out", opts.out, "Output directory")->required();
  cmd->add_flag("--force", opts.force, "Write into a non-empty output directory");
  cmd->add_option("--jobs", opts.jobs, "Concurrent training runs")->check(CLI::PositiveNumber);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Physics-informed deep equilibrium experiments on the Van der Pol oscillator"};
  app.set_version_flag("--version", std::string(ex::version()));
  app.require_subcommand(1);

  ex::CommandOptions opts;
  opts.log = &std::cerr;
  std::string config_path;
  std::string sweep_kind;
  std::vector<std::string> run_dirs;

  auto* reference = app.add_subcommand("reference", "Write the RK4 reference trajectory and a state-space plot");
  add_common(reference, opts, config_path);

  auto* train = app.add_subcommand("train", "Train one configuration over the configured number of seeds");
  add_common(train, opts, config_path);

  auto* sweep = app.add_subcommand("sweep", "Sweep states, kappa or solver");
  sweep->add_option("kind", sweep_kind, "states | kappa | solver")
      ->required()
      ->check(CLI::IsMember({"states", "kappa", "solver"}));
  add_common(sweep, opts, config_path);

  auto* report = app.add_subcommand("report", "Compare finished training groups");
  report->add_option("runs", run_dirs, "Directories written by train or sweep points")->required();
  add_common(report, opts, config_path, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ex::kSuccess : ex::kUsageError;
  }
  if (!config_path.empty()) opts.config = config_path;

  return ex::guarded(opts.log, [&] {
    if (*reference) return ex::cmd_reference(opts);
    if (*train) return ex::cmd_train(opts);
    if (*sweep) return ex::cmd_sweep(ex::parse_sweep_kind(sweep_kind), opts);
    std::vector<std::filesystem::path> dirs(run_dirs.begin(), run_dirs.end());
    return ex::cmd_report(dirs, opts);
  });
}
