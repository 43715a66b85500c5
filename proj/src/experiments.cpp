#include "pideq/experiments.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>

#include <ostream>
#include <sstream>

#include "pideq/errors.hpp"
#include "pideq/models.hpp"
#include "pideq/plot.hpp"
#include "pideq/reference.hpp"

#ifndef PIDEQ_VERSION
#define PIDEQ_VERSION "0.0.0"
#endif

namespace pideq::experiments {

namespace fs = std::filesystem;
using config::Json;

namespace {

std::string iso_now() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_json(const fs::path& path, const Json& doc) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << doc.dump(2) << '\n';
}

Json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  Json doc = Json::parse(in, nullptr, false);
  if (doc.is_discarded()) throw std::runtime_error(path.string() + " is not valid JSON");
  return doc;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  return os;
}

Json artifact_list(const fs::path& dir) {
  std::vector<std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), dir).generic_string();
    if (rel != "manifest.json") files.push_back(rel);
  }
  std::sort(files.begin(), files.end());
  return files;
}

void say(std::ostream* log, const std::string& msg) {
  if (log) *log << msg << std::endl;
}

Json base_manifest(const std::string& id, const Json& resolved) {
  Json m;
  m["run_id"] = id;
  m["version"] = std::string(version());
  m["status"] = "running";
  m["started"] = iso_now();
  m["finished"] = nullptr;
  m["config"] = resolved;
  m["artifacts"] = Json::array();
  return m;
}

void finalize_manifest(Json& m, const fs::path& dir, const std::string& status) {
  m["status"] = status;
  m["finished"] = iso_now();
  write_json(dir / "manifest.json", m);
  m["artifacts"] = artifact_list(dir);
  write_json(dir / "manifest.json", m);
}

std::size_t window_records(const config::ExperimentConfig& cfg) {
  return static_cast<std::size_t>(std::max(1, cfg.moving_average / cfg.train.eval_every));
}

std::vector<double> smooth(const std::vector<double>& v, std::size_t w) { return training::moving_average(v, w); }

struct Envelope {
  std::vector<double> epoch, mean, lo, hi;
};

Envelope envelope_of(const training::SweepReport& report, double training::CurveRecord::*field) {
  Envelope e;
  for (const auto& r : report.envelope) {
    e.epoch.push_back(r.epoch);
    e.mean.push_back(r.mean.*field);
    e.lo.push_back(r.min.*field);
    e.hi.push_back(r.max.*field);
  }
  return e;
}

void write_group_plots(const fs::path& dir, const training::SweepReport& report,
                       const config::ExperimentConfig& cfg) {
  const std::size_t w = window_records(cfg);
  const std::string ma = " (" + std::to_string(cfg.moving_average) + "-epoch moving average)";
  {
    plot::Figure fig;
    fig.title = "Training loss" + ma;
    fig.x_label = "epoch";
    fig.y_label = "loss";
    fig.log_y = true;
    const std::pair<const char*, double training::CurveRecord::*> terms[] = {
        {"total", &training::CurveRecord::total},
        {"J_b", &training::CurveRecord::j_b},
        {"J_N", &training::CurveRecord::j_n},
        {"jacobian", &training::CurveRecord::jac_penalty}};
    for (const auto& [label, member] : terms) {
      if (cfg.train.model == training::ModelKind::Pinn && member == &training::CurveRecord::jac_penalty) continue;
      const Envelope e = envelope_of(report, member);
      fig.series.push_back({label, e.epoch, smooth(e.mean, w), {}, {}, false});
    }
    plot::write_svg(dir / "loss.svg", fig);
  }
  {
    const Envelope e = envelope_of(report, &training::CurveRecord::iae);
    plot::Figure fig;
    fig.title = "IAE" + ma;
    fig.x_label = "epoch";
    fig.y_label = "IAE";
    fig.log_y = true;
    fig.series.push_back({"mean", e.epoch, smooth(e.mean, w), smooth(e.lo, w), smooth(e.hi, w), false});
    plot::write_svg(dir / "iae.svg", fig);
  }
}

double lower_median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  return v[(v.size() - 1) / 2];
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<double>> columns;

  [[nodiscard]] const std::vector<double>& column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return columns[i];
    }
    throw std::runtime_error("missing column " + name);
  }
};

Table read_table(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  Table t;
  std::string line, cell;
  if (!std::getline(in, line)) throw std::runtime_error(path.string() + " is empty");
  std::stringstream hs(line);
  while (std::getline(hs, cell, ',')) t.header.push_back(cell);
  t.columns.resize(t.header.size());
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::size_t i = 0;
    while (std::getline(ss, cell, ',') && i < t.columns.size()) t.columns[i++].push_back(std::stod(cell));
    if (i != t.columns.size()) throw std::runtime_error(path.string() + " has a short row");
  }
  return t;
}

}  // namespace

std::string_view version() { return PIDEQ_VERSION; }

Json resolve(const CommandOptions& opts) {
  std::vector<std::string> overrides = opts.overrides;
  if (const char* env = std::getenv("PIDEQ_LAB_SEED"); env != nullptr && *env != '\0') {
    char* end = nullptr;
    errno = 0;
    const unsigned long long seed = std::strtoull(env, &end, 10);
    if (errno != 0 || end == env || *end != '\0' || *env == '-') {
      throw ConfigError("PIDEQ_LAB_SEED must be a nonnegative integer");
    }
    overrides.push_back("seed=" + std::to_string(seed));
  }
  const fs::path* path = opts.config ? &*opts.config : nullptr;
  return config::resolve_document(path, overrides);
}

void prepare_output_dir(const fs::path& dir, bool force) {
  if (dir.empty()) throw ConfigError("an output directory is required");
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw ConfigError(dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir) && !force) {
      throw ConfigError(dir.string() + " is not empty; pass --force to write into it");
    }
  }
  fs::create_directories(dir);
}

GroupOutcome run_group(const Json& resolved, const fs::path& dir, int n_runs, int jobs, std::ostream* log) {
  const config::ExperimentConfig cfg = config::from_json(resolved);
  const physics::IvpSpec ivp = cfg.ivp();
  const std::string hash = config::config_hash(resolved);
  const auto kind = cfg.train.model;
  fs::create_directories(dir);
  write_json(dir / "config.resolved.json", resolved);

  Json manifest = base_manifest(config::run_id(kind, cfg.train.seed, hash), resolved);
  manifest["n_runs"] = n_runs;
  write_json(dir / "manifest.json", manifest);

  training::TrainConfig tc = cfg.train;
  tc.output_dir = dir;
  say(log, "training " + std::to_string(n_runs) + " run(s) of " + std::string(training::to_string(kind)) + " in " +
               dir.string());
  GroupOutcome out;
  out.report = training::seed_sweep(tc, n_runs, ivp, jobs,
                                    [&](std::uint64_t seed) { return config::run_id(kind, seed, hash); });

  {
    auto os = open_out(dir / "aggregate.csv");
    training::write_aggregate_csv(os, out.report);
  }
  if (!out.report.envelope.empty()) write_group_plots(dir, out.report, cfg);

  Json runs = Json::array();
  for (std::size_t i = 0; i < out.report.runs.size(); ++i) {
    const auto& r = out.report.runs[i];
    const std::string id = config::run_id(kind, r.seed, hash);
    out.run_ids.push_back(id);
    Json entry;
    entry["run_id"] = id;
    entry["seed"] = r.seed;
    entry["status"] = out.report.failed[i] ? "failed" : "ok";
    entry["diagnostic"] = r.diagnostic;
    entry["epochs_run"] = r.epochs_run;
    entry["final_iae"] = r.final_iae;
    entry["best_iae"] = r.best_iae;
    entry["best_epoch"] = r.best_epoch;
    entry["mean_solver_iterations"] = r.mean_forward_iterations();
    entry["mean_solver_evaluations"] = r.mean_forward_evaluations();
    if (const auto* p = std::get_if<models::PideqParams>(&r.final_params); p && p->A.size() > 0) {
      entry["null_rows"] = models::count_null_rows(p->A, cfg.null_row_threshold);
    }
    runs.push_back(entry);
    if (out.report.failed[i]) {
      out.all_ok = false;
      say(log, "run " + id + " failed: " + r.diagnostic);
    } else {
      say(log, "run " + id + " final IAE " + fmt(r.final_iae));
    }
  }
  manifest["runs"] = runs;
  manifest["median_run"] = out.report.median_run ? Json(out.run_ids[*out.report.median_run]) : Json(nullptr);
  finalize_manifest(manifest, dir, out.all_ok ? "ok" : "failed");
  return out;
}

SweepKind parse_sweep_kind(std::string_view name) {
  if (name == "states") return SweepKind::States;
  if (name == "kappa") return SweepKind::Kappa;
  if (name == "solver") return SweepKind::Solver;
  throw ConfigError("unknown sweep kind '" + std::string(name) + "' (expected states, kappa or solver)");
}

std::string_view to_string(SweepKind kind) {
  switch (kind) {
    case SweepKind::States: return "states";
    case SweepKind::Kappa: return "kappa";
    default: return "solver";
  }
}

int cmd_reference(const CommandOptions& opts) {
  const Json resolved = resolve(opts);
  const config::ExperimentConfig cfg = config::from_json(resolved);
  prepare_output_dir(opts.out, opts.force);
  write_json(opts.out / "config.resolved.json", resolved);
  Json manifest = base_manifest("reference-" + config::config_hash(resolved), resolved);
  write_json(opts.out / "manifest.json", manifest);

  const reference::Trajectory traj = reference::integrate(cfg.ivp(), cfg.train.reference_steps);
  {
    auto os = open_out(opts.out / "reference.csv");
    reference::write_csv(os, traj);
  }
  plot::Figure fig;
  fig.title = "Reference trajectory in state space";
  fig.x_label = "y1";
  fig.y_label = "y2";
  plot::Series s;
  s.label = "RK4";
  for (const auto& y : traj.states) {
    s.x.push_back(y(0));
    s.y.push_back(y(1));
  }
  fig.series.push_back(std::move(s));
  plot::write_svg(opts.out / "state_space.svg", fig);
  finalize_manifest(manifest, opts.out, "ok");
  say(opts.log, "wrote " + std::to_string(traj.size()) + " reference states to " + (opts.out / "reference.csv").string());
  return kSuccess;
}

int cmd_train(const CommandOptions& opts) {
  const Json resolved = resolve(opts);
  const config::ExperimentConfig cfg = config::from_json(resolved);
  prepare_output_dir(opts.out, opts.force);
  const GroupOutcome outcome = run_group(resolved, opts.out, cfg.runs, opts.jobs, opts.log);
  return outcome.all_ok ? kSuccess : kNumericalFailure;
}

int cmd_sweep(SweepKind kind, const CommandOptions& opts) {
  const Json base = resolve(opts);
  const config::ExperimentConfig cfg = config::from_json(base);
  prepare_output_dir(opts.out, opts.force);

  struct Point {
    std::string label;
    std::string value;
    Json doc;
    int runs;
  };
  std::vector<Point> points;
  auto make = [&](const std::string& value, const std::function<void(Json&)>& edit, int runs) {
    Json doc = base;
    doc["model"] = "pideq";
    edit(doc);
    doc = config::to_json(config::from_json(doc));
    points.push_back({std::string(to_string(kind)) + "-" + value, value, doc, runs});
  };
  switch (kind) {
    case SweepKind::States:
      for (int n : cfg.sweep.states) make(std::to_string(n), [n](Json& d) { d["n_z"] = n; }, cfg.runs);
      break;
    case SweepKind::Kappa:
      for (double k : cfg.sweep.kappa) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%g", k);
        make(buf, [k](Json& d) { d["kappa"] = k; }, k == 0.0 ? cfg.sweep.kappa_zero_runs : cfg.runs);
      }
      break;
    case SweepKind::Solver:
      for (auto m : cfg.sweep.solvers) {
        const std::string name(rootfind::to_string(m));
        make(name, [name](Json& d) { d["solver"]["method"] = name; }, cfg.runs);
      }
      break;
  }

  Json manifest = base_manifest("sweep-" + std::string(to_string(kind)) + "-" + config::config_hash(base), base);
  manifest["points"] = Json::array();
  write_json(opts.out / "config.resolved.json", base);
  write_json(opts.out / "manifest.json", manifest);

  auto summary = open_out(opts.out / "summary.csv");
  summary << "point,value,runs,failed,final_iae_mean,final_iae_min,final_iae_max,final_iae_median,"
             "mean_solver_iters,mean_solver_evals,epochs_to_threshold\n";
  auto overlay = open_out(opts.out / "overlay.csv");
  overlay << "point,epoch,iae_mean,iae_min,iae_max,solver_iters_mean\n";

  plot::Figure iae_fig;
  iae_fig.title = "IAE by " + std::string(to_string(kind)) + " (" + std::to_string(cfg.moving_average) +
                  "-epoch moving average)";
  iae_fig.x_label = "epoch";
  iae_fig.y_label = "mean IAE";
  iae_fig.log_y = true;
  plot::Figure iter_fig = iae_fig;
  iter_fig.title = "Forward solver iterations by " + std::string(to_string(kind));
  iter_fig.y_label = "mean iterations per point";
  iter_fig.log_y = false;

  bool all_ok = true;
  for (const auto& p : points) {
    const GroupOutcome g = run_group(p.doc, opts.out / p.label, p.runs, opts.jobs, opts.log);
    all_ok = all_ok && g.all_ok;
    const auto iaes = g.report.final_iaes();
    double iters = 0.0, evals = 0.0;
    std::size_t ok = 0;
    for (std::size_t i = 0; i < g.report.runs.size(); ++i) {
      if (g.report.failed[i]) continue;
      iters += g.report.runs[i].mean_forward_iterations();
      evals += g.report.runs[i].mean_forward_evaluations();
      ++ok;
    }
    std::string threshold_epoch;
    for (const auto& env : g.report.envelope) {
      if (env.mean.iae <= cfg.sweep.iae_threshold) {
        threshold_epoch = std::to_string(env.epoch);
        break;
      }
    }
    double lo = std::nan(""), hi = std::nan(""), mean = std::nan("");
    if (!iaes.empty()) {
      lo = *std::min_element(iaes.begin(), iaes.end());
      hi = *std::max_element(iaes.begin(), iaes.end());
      mean = 0.0;
      for (double v : iaes) mean += v;
      mean /= static_cast<double>(iaes.size());
    }
    const double denom = ok ? static_cast<double>(ok) : std::nan("");
    summary << p.label << ',' << p.value << ',' << p.runs << ',' << (g.report.runs.size() - ok) << ',' << fmt(mean)
            << ',' << fmt(lo) << ',' << fmt(hi) << ',' << fmt(lower_median(iaes)) << ',' << fmt(iters / denom) << ','
            << fmt(evals / denom) << ',' << threshold_epoch << '\n';

    const Envelope e = envelope_of(g.report, &training::CurveRecord::iae);
    const Envelope it = envelope_of(g.report, &training::CurveRecord::solver_iters);
    for (std::size_t k = 0; k < e.epoch.size(); ++k) {
      overlay << p.label << ',' << static_cast<int>(e.epoch[k]) << ',' << fmt(e.mean[k]) << ',' << fmt(e.lo[k]) << ','
              << fmt(e.hi[k]) << ',' << fmt(it.mean[k]) << '\n';
    }
    const std::size_t w = window_records(cfg);
    iae_fig.series.push_back({p.label, e.epoch, smooth(e.mean, w), {}, {}, false});
    iter_fig.series.push_back({p.label, it.epoch, smooth(it.mean, w), {}, {}, false});

    Json entry;
    entry["point"] = p.label;
    entry["runs"] = p.runs;
    entry["status"] = g.all_ok ? "ok" : "failed";
    entry["median_run"] = g.report.median_run ? Json(g.run_ids[*g.report.median_run]) : Json(nullptr);
    manifest["points"].push_back(entry);
  }
  summary.close();
  overlay.close();
  plot::write_svg(opts.out / "iae.svg", iae_fig);
  plot::write_svg(opts.out / "solver_iters.svg", iter_fig);
  finalize_manifest(manifest, opts.out, all_ok ? "ok" : "failed");
  return all_ok ? kSuccess : kNumericalFailure;
}

int cmd_report(const std::vector<fs::path>& group_dirs, const CommandOptions& opts) {
  if (group_dirs.empty()) throw ConfigError("report needs at least one run directory");
  prepare_output_dir(opts.out, opts.force);

  struct Group {
    std::string label;
    config::ExperimentConfig cfg;
    Json manifest;
    Table aggregate;
    fs::path median_dir;
  };
  std::vector<Group> groups;
  Json skipped = Json::array();
  for (const auto& dir : group_dirs) {
    std::string missing;
    for (const char* f : {"manifest.json", "config.resolved.json", "aggregate.csv"}) {
      if (!fs::exists(dir / f)) missing += std::string(missing.empty() ? "" : ", ") + f;
    }
    Group g;
    g.label = dir.filename().empty() ? dir.parent_path().filename().string() : dir.filename().string();
    if (missing.empty()) {
      try {
        g.manifest = read_json(dir / "manifest.json");
        g.cfg = config::from_json(read_json(dir / "config.resolved.json"));
        g.aggregate = read_table(dir / "aggregate.csv");
        const Json& median = g.manifest.value("median_run", Json(nullptr));
        if (!median.is_string()) {
          missing = "median run";
        } else {
          g.median_dir = dir / median.get<std::string>();
          if (!fs::exists(g.median_dir / "checkpoint_final.txt")) missing = median.get<std::string>() + "/checkpoint_final.txt";
        }
      } catch (const std::exception& e) {
        missing = e.what();
      }
    }
    if (!missing.empty()) {
      say(opts.log, "skipping " + dir.string() + ": missing " + missing);
      skipped.push_back({{"dir", dir.string()}, {"missing", missing}});
      continue;
    }
    groups.push_back(std::move(g));
  }

  Json manifest = base_manifest("report", Json::object());
  manifest["groups"] = Json::array();
  manifest["skipped"] = skipped;
  write_json(opts.out / "manifest.json", manifest);
  if (groups.empty()) {
    finalize_manifest(manifest, opts.out, "failed");
    throw ConfigError("none of the given run directories has complete artifacts");
  }

  auto summary = open_out(opts.out / "summary.csv");
  summary << "group,model,runs,successful,final_iae_mean,final_iae_min,final_iae_max,median_run,median_final_iae\n";
  auto curves = open_out(opts.out / "iae_overlay.csv");
  curves << "group,epoch,iae_mean,iae_min,iae_max\n";
  plot::Figure fig;
  fig.title = "IAE learning curves";
  fig.x_label = "epoch";
  fig.y_label = "mean IAE";
  fig.log_y = true;

  // Trajectories share the grid of the first group.
  const physics::IvpSpec ivp = groups.front().cfg.ivp();
  const int n_points = groups.front().cfg.train.iae_points;
  const reference::Trajectory ref =
      training::reference_on_grid(ivp, groups.front().cfg.train.reference_steps, n_points);
  std::vector<reference::Trajectory> predictions;

  for (const auto& g : groups) {
    std::vector<double> finals;
    for (const auto& r : g.manifest.at("runs")) {
      if (r.value("status", "") == "ok") finals.push_back(r.at("final_iae").get<double>());
    }
    double mean = std::nan(""), lo = std::nan(""), hi = std::nan("");
    if (!finals.empty()) {
      mean = 0.0;
      for (double v : finals) mean += v;
      mean /= static_cast<double>(finals.size());
      lo = *std::min_element(finals.begin(), finals.end());
      hi = *std::max_element(finals.begin(), finals.end());
    }
    const models::ModelParams params = models::load_checkpoint(g.median_dir / "checkpoint_final.txt");
    const auto& forward = g.cfg.train.solver;
    predictions.push_back(reference::evaluate_on_grid(
        [&](double t) { return models::predict(params, t, forward); }, ivp, n_points));
    const double median_iae = reference::iae(predictions.back(), ref).iae;
    summary << g.label << ',' << training::to_string(g.cfg.train.model) << ',' << g.manifest.at("runs").size() << ','
            << finals.size() << ',' << fmt(mean) << ',' << fmt(lo) << ',' << fmt(hi) << ','
            << g.median_dir.filename().string() << ',' << fmt(median_iae) << '\n';

    const auto& epochs = g.aggregate.column("epoch");
    const auto& im = g.aggregate.column("iae_mean");
    const auto& il = g.aggregate.column("iae_min");
    const auto& ih = g.aggregate.column("iae_max");
    for (std::size_t k = 0; k < epochs.size(); ++k) {
      curves << g.label << ',' << static_cast<long>(epochs[k]) << ',' << fmt(im[k]) << ',' << fmt(il[k]) << ','
             << fmt(ih[k]) << '\n';
    }
    const std::size_t w = window_records(g.cfg);
    fig.series.push_back({g.label, epochs, smooth(im, w), smooth(il, w), smooth(ih, w), false});
    manifest["groups"].push_back({{"group", g.label}, {"median_run", g.median_dir.filename().string()}});
  }
  summary.close();
  curves.close();
  plot::write_svg(opts.out / "iae.svg", fig);

  auto pred_csv = open_out(opts.out / "predictions.csv");
  pred_csv << "t,rk4_y1,rk4_y2";
  for (const auto& g : groups) pred_csv << ',' << g.label << "_y1," << g.label << "_y2";
  pred_csv << '\n';
  for (std::size_t k = 0; k < ref.size(); ++k) {
    pred_csv << fmt(ref.times[k]) << ',' << fmt(ref.states[k](0)) << ',' << fmt(ref.states[k](1));
    for (const auto& p : predictions) pred_csv << ',' << fmt(p.states[k](0)) << ',' << fmt(p.states[k](1));
    pred_csv << '\n';
  }
  pred_csv.close();

  plot::Figure traj;
  traj.title = "Median-run predictions against RK4";
  traj.x_label = "t";
  traj.y_label = "state";
  auto column = [](const reference::Trajectory& tr, int i) {
    std::vector<double> v;
    for (const auto& y : tr.states) v.push_back(y(i));
    return v;
  };
  for (int i = 0; i < 2; ++i) {
    const std::string suffix = i == 0 ? " y1" : " y2";
    traj.series.push_back({"RK4" + suffix, ref.times, column(ref, i), {}, {}, false});
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
      traj.series.push_back({groups[gi].label + suffix, predictions[gi].times, column(predictions[gi], i), {}, {}, true});
    }
  }
  plot::write_svg(opts.out / "prediction.svg", traj);
  finalize_manifest(manifest, opts.out, skipped.empty() ? "ok" : "partial");
  return kSuccess;
}

int guarded(std::ostream* log, const std::function<int()>& body) {
  try {
    return body();
  } catch (const NumericalError& e) {
    say(log, std::string("numerical failure: ") + e.what());
    return kNumericalFailure;
  } catch (const std::invalid_argument& e) {
    say(log, std::string("error: ") + e.what());
    return kUsageError;
  } catch (const std::exception& e) {
    say(log, std::string("failure: ") + e.what());
    return kNumericalFailure;
  }
}

}  // namespace pideq::experiments
