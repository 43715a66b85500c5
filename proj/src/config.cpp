#include "pideq/config.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "pideq/errors.hpp"

namespace pideq::config {

namespace {

class Reader {
 public:
  Reader(const Json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(where() + " must be an object");
    for (auto it = obj_.begin(); it != obj_.end(); ++it) keys_.push_back(it.key());
  }

  template <typename T>
  void read(const char* key, T& out) {
    auto it = obj_.find(key);
    if (it == obj_.end()) return;
    used_.emplace_back(key);
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(join(key) + " has the wrong type");
    }
  }

  void read_method(const char* key, rootfind::Method& out) {
    std::string name(rootfind::to_string(out));
    read(key, name);
    out = rootfind::parse_method(name);
  }

  Reader child(const char* key) {
    auto it = obj_.find(key);
    used_.emplace_back(key);
    static const Json empty = Json::object();
    return Reader(it == obj_.end() ? empty : *it, join(key));
  }

  void finish() const {
    for (const auto& k : keys_) {
      if (std::find(used_.begin(), used_.end(), k) == used_.end()) throw ConfigError("unknown key " + join(k));
    }
  }

 private:
  [[nodiscard]] std::string where() const { return path_.empty() ? std::string("document") : path_; }
  [[nodiscard]] std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const Json& obj_;
  std::string path_;
  std::vector<std::string> keys_;
  std::vector<std::string> used_;
};

void merge_strict(Json& dst, const Json& src, const std::string& path) {
  if (!src.is_object()) throw ConfigError((path.empty() ? std::string("document") : path) + " must be an object");
  for (auto it = src.begin(); it != src.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    auto d = dst.find(it.key());
    if (d == dst.end()) throw ConfigError("unknown key " + key);
    if (d->is_object()) {
      merge_strict(*d, *it, key);
    } else {
      *d = *it;
    }
  }
}

}  // namespace

physics::IvpSpec ExperimentConfig::ivp() const {
  if (y0.size() != 2) throw ConfigError("ivp.y0 must have two entries");
  return physics::make_vdp_ivp(vdp, t0, horizon, Eigen::Vector2d(y0[0], y0[1]));
}

void ExperimentConfig::validate() const {
  train.validate();
  (void)ivp();
  if (runs < 1) throw ConfigError("runs must be at least 1");
  if (!(null_row_threshold > 0.0)) throw ConfigError("null_row_threshold must be positive");
  if (moving_average < 1) throw ConfigError("moving_average must be at least 1");
  if (sweep.kappa_zero_runs < 1) throw ConfigError("sweep.kappa_zero_runs must be at least 1");
  if (!(sweep.iae_threshold > 0.0)) throw ConfigError("sweep.iae_threshold must be positive");
  for (int s : sweep.states) {
    if (s < 1) throw ConfigError("sweep.states entries must be positive");
  }
  for (double k : sweep.kappa) {
    if (!(k >= 0.0) || !std::isfinite(k)) throw ConfigError("sweep.kappa entries must be nonnegative");
  }
}

Json to_json(const ExperimentConfig& cfg) {
  const auto& t = cfg.train;
  Json doc;
  doc["model"] = std::string(training::to_string(t.model));
  doc["n_z"] = t.n_z;
  doc["hidden_layers"] = t.hidden_layers;
  doc["epochs"] = t.epochs;
  doc["collocation_points"] = t.collocation_n;
  doc["seed"] = t.seed;
  doc["runs"] = cfg.runs;
  doc["eval_every"] = t.eval_every;
  doc["lambda"] = t.weights.lambda;
  doc["kappa"] = t.weights.kappa;
  doc["adam"] = {{"learning_rate", t.adam.lr},
                 {"beta1", t.adam.beta1},
                 {"beta2", t.adam.beta2},
                 {"epsilon", t.adam.epsilon}};
  doc["solver"] = {{"method", std::string(rootfind::to_string(t.solver.method))},
                   {"tolerance", t.solver.tolerance},
                   {"max_iterations", t.solver.max_iterations},
                   {"anderson_memory", t.solver.anderson_memory},
                   {"anderson_damping", t.solver.anderson_damping},
                   {"anderson_regularization", t.solver.anderson_regularization},
                   {"divergence_threshold", t.solver.divergence_threshold}};
  doc["backward"] = {{"tolerance", t.backward.tolerance}, {"max_iterations", t.backward.max_iterations}};
  doc["ivp"] = {{"mu", cfg.vdp.mu}, {"t0", cfg.t0}, {"horizon", cfg.horizon}, {"y0", cfg.y0}};
  doc["reference"] = {{"steps", t.reference_steps}, {"iae_points", t.iae_points}};
  doc["null_row_threshold"] = cfg.null_row_threshold;
  doc["moving_average"] = cfg.moving_average;
  Json solvers = Json::array();
  for (auto m : cfg.sweep.solvers) solvers.push_back(std::string(rootfind::to_string(m)));
  doc["sweep"] = {{"states", cfg.sweep.states},
                  {"kappa", cfg.sweep.kappa},
                  {"solvers", solvers},
                  {"kappa_zero_runs", cfg.sweep.kappa_zero_runs},
                  {"iae_threshold", cfg.sweep.iae_threshold}};
  return doc;
}

Json default_document() { return to_json(ExperimentConfig{}); }

ExperimentConfig from_json(const Json& doc) {
  ExperimentConfig cfg;
  auto& t = cfg.train;
  Reader r(doc, "");
  std::string model(training::to_string(t.model));
  r.read("model", model);
  t.model = training::parse_model_kind(model);
  r.read("n_z", t.n_z);
  r.read("hidden_layers", t.hidden_layers);
  r.read("epochs", t.epochs);
  r.read("collocation_points", t.collocation_n);
  r.read("seed", t.seed);
  r.read("runs", cfg.runs);
  r.read("eval_every", t.eval_every);
  r.read("lambda", t.weights.lambda);
  r.read("kappa", t.weights.kappa);
  {
    Reader a = r.child("adam");
    a.read("learning_rate", t.adam.lr);
    a.read("beta1", t.adam.beta1);
    a.read("beta2", t.adam.beta2);
    a.read("epsilon", t.adam.epsilon);
    a.finish();
  }
  {
    Reader s = r.child("solver");
    s.read_method("method", t.solver.method);
    s.read("tolerance", t.solver.tolerance);
    s.read("max_iterations", t.solver.max_iterations);
    s.read("anderson_memory", t.solver.anderson_memory);
    s.read("anderson_damping", t.solver.anderson_damping);
    s.read("anderson_regularization", t.solver.anderson_regularization);
    s.read("divergence_threshold", t.solver.divergence_threshold);
    s.finish();
  }
  {
    Reader b = r.child("backward");
    b.read("tolerance", t.backward.tolerance);
    b.read("max_iterations", t.backward.max_iterations);
    b.finish();
  }
  {
    Reader v = r.child("ivp");
    v.read("mu", cfg.vdp.mu);
    v.read("t0", cfg.t0);
    v.read("horizon", cfg.horizon);
    v.read("y0", cfg.y0);
    v.finish();
  }
  {
    Reader ref = r.child("reference");
    ref.read("steps", t.reference_steps);
    ref.read("iae_points", t.iae_points);
    ref.finish();
  }
  r.read("null_row_threshold", cfg.null_row_threshold);
  r.read("moving_average", cfg.moving_average);
  {
    Reader s = r.child("sweep");
    s.read("states", cfg.sweep.states);
    s.read("kappa", cfg.sweep.kappa);
    std::vector<std::string> names;
    for (auto m : cfg.sweep.solvers) names.emplace_back(rootfind::to_string(m));
    s.read("solvers", names);
    cfg.sweep.solvers.clear();
    for (const auto& n : names) cfg.sweep.solvers.push_back(rootfind::parse_method(n));
    s.read("kappa_zero_runs", cfg.sweep.kappa_zero_runs);
    s.read("iae_threshold", cfg.sweep.iae_threshold);
    s.finish();
  }
  r.finish();
  cfg.validate();
  return cfg;
}

void apply_override(Json& doc, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override must look like KEY=VALUE: " + std::string(assignment));
  }
  const std::string key(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));
  Json value = Json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  Json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown key " + key);
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (node->is_object()) throw ConfigError(key + " is a section; override its fields instead");
  *node = std::move(value);
}

Json resolve_document(const std::filesystem::path* path, const std::vector<std::string>& overrides) {
  Json doc = default_document();
  if (path != nullptr) {
    std::ifstream in(*path);
    if (!in) throw ConfigError("cannot read config " + path->string());
    Json file = Json::parse(in, nullptr, false);
    if (file.is_discarded()) throw ConfigError("config " + path->string() + " is not valid JSON");
    merge_strict(doc, file, "");
  }
  for (const auto& o : overrides) apply_override(doc, o);
  return to_json(from_json(doc));
}

std::string config_hash(const Json& resolved) {
  Json copy = resolved;
  copy.erase("seed");
  const std::string text = copy.dump();
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08" PRIx32, static_cast<std::uint32_t>(h ^ (h >> 32)));
  return buf;
}

std::string run_id(training::ModelKind kind, std::uint64_t seed, const std::string& hash) {
  return std::string(training::to_string(kind)) + "-" + std::to_string(seed) + "-" + hash;
}

}  // namespace pideq::config
