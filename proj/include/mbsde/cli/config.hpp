#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mbsde/errors.hpp"
#include "mbsde/terminal.hpp"

namespace mbsde::cli {

using json = nlohmann::json;

/// Reads one JSON object, remembering which keys were consumed so the rest
/// can be rejected.
class Section {
 public:
  Section(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }

  double number(const std::string& key, double fallback) {
    used_.insert(key);
    if (!has(key)) return fallback;
    const auto& v = j_.at(key);
    if (!v.is_number()) throw ConfigError(path(key) + ": expected a number");
    return v.get<double>();
  }

  std::size_t count(const std::string& key, std::size_t fallback) {
    used_.insert(key);
    if (!has(key)) return fallback;
    return as_count(j_.at(key), path(key));
  }

  std::uint64_t seed(const std::string& key, std::uint64_t fallback) {
    used_.insert(key);
    if (!has(key)) return fallback;
    const auto& v = j_.at(key);
    if (!v.is_number_unsigned()) throw ConfigError(path(key) + ": expected a nonnegative integer");
    return v.get<std::uint64_t>();
  }

  bool flag(const std::string& key, bool fallback) {
    used_.insert(key);
    if (!has(key)) return fallback;
    const auto& v = j_.at(key);
    if (!v.is_boolean()) throw ConfigError(path(key) + ": expected true or false");
    return v.get<bool>();
  }

  std::string text(const std::string& key, const std::string& fallback,
                   const std::set<std::string>& allowed = {}) {
    used_.insert(key);
    if (!has(key)) return fallback;
    const auto& v = j_.at(key);
    if (!v.is_string()) throw ConfigError(path(key) + ": expected a string");
    auto s = v.get<std::string>();
    if (!allowed.empty() && !allowed.count(s)) {
      std::string options;
      for (const auto& a : allowed) options += (options.empty() ? "" : ", ") + a;
      throw ConfigError(path(key) + ": '" + s + "' is not one of {" + options + "}");
    }
    return s;
  }

  std::string required_text(const std::string& key) {
    if (!has(key)) throw ConfigError(path(key) + ": required");
    return text(key, "");
  }

  std::vector<double> numbers(const std::string& key, std::vector<double> fallback) {
    used_.insert(key);
    if (!has(key)) return fallback;
    const auto& v = j_.at(key);
    if (!v.is_array()) throw ConfigError(path(key) + ": expected an array of numbers");
    std::vector<double> out;
    for (const auto& e : v) {
      if (!e.is_number()) throw ConfigError(path(key) + ": expected an array of numbers");
      out.push_back(e.get<double>());
    }
    return out;
  }

  std::vector<std::size_t> counts(const std::string& key, std::vector<std::size_t> fallback) {
    used_.insert(key);
    if (!has(key)) return fallback;
    const auto& v = j_.at(key);
    if (!v.is_array()) throw ConfigError(path(key) + ": expected an array of positive integers");
    std::vector<std::size_t> out;
    for (const auto& e : v) out.push_back(as_count(e, path(key)));
    return out;
  }

  std::vector<std::string> texts(const std::string& key) {
    used_.insert(key);
    if (!has(key)) return {};
    const auto& v = j_.at(key);
    if (!v.is_array()) throw ConfigError(path(key) + ": expected an array of strings");
    std::vector<std::string> out;
    for (const auto& e : v) {
      if (!e.is_string()) throw ConfigError(path(key) + ": expected an array of strings");
      out.push_back(e.get<std::string>());
    }
    return out;
  }

  ParamMap params(const std::string& key) {
    used_.insert(key);
    ParamMap out;
    if (!has(key)) return out;
    const auto& v = j_.at(key);
    if (!v.is_object()) throw ConfigError(path(key) + ": expected an object of numbers");
    for (const auto& [name, value] : v.items()) {
      if (!value.is_number()) throw ConfigError(path(key) + "." + name + ": expected a number");
      out[name] = value.get<double>();
    }
    return out;
  }

  /// Nested object, or an empty one when absent.
  Section child(const std::string& key) {
    used_.insert(key);
    static const json empty = json::object();
    return Section(has(key) ? j_.at(key) : empty, path(key));
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!used_.count(key)) throw ConfigError(where_ + ": unknown key '" + key + "'");
    }
  }

 private:
  std::string path(const std::string& key) const { return where_ + "." + key; }

  static std::size_t as_count(const json& v, const std::string& where) {
    if (!v.is_number_unsigned() || v.get<std::uint64_t>() == 0) {
      throw ConfigError(where + ": expected a positive integer");
    }
    return static_cast<std::size_t>(v.get<std::uint64_t>());
  }

  const json& j_;
  std::string where_;
  std::set<std::string> used_;
};

struct ModelConfig {
  std::string engine = "lattice";  ///< lattice | montecarlo
  double T = 1.0;
  std::size_t steps = 64;
  std::size_t d = 1;
  std::size_t paths = 100000;
  std::uint64_t seed = 1;
  std::string scheme = "auto";          ///< auto | full | recombining
  std::string increments = "gaussian";  ///< gaussian | rademacher
  std::string basis = "default";        ///< default | polynomial | piecewise_constant
  std::size_t degree = 3;
  std::size_t bins = 16;
  std::string density_form = "product";  ///< product | exponential
};

struct TerminalConfig {
  std::string name = "tanh_WT";
  ParamMap params;
};

struct RandomBoundConfig {
  std::string kind = "abs_tanh";
  double scale = 0.5;
  double budget = 0.5;
};

struct GeneratorConfig {
  std::string name = "zero";
  ParamMap params;
  std::vector<std::string> transforms;
  std::optional<RandomBoundConfig> random_bound;
};

struct SolverConfig {
  double tol = 1e-9;
  std::size_t max_iter = 200;
  double damping = 1.0;
  bool auto_damping = true;
  double min_damping = 1.0 / 1024.0;
  double clip = 0.95;
  double z_eps = 1e-12;
  bool allow_unbounded_terminal = false;
  std::size_t bootstrap = 200;
  double min_ess_fraction = 0.01;
};

struct OracleConfig {
  std::string name;  ///< conditional_mean | girsanov_shift | exp_transform
  std::vector<std::size_t> levels{32, 64, 128, 256};
  double tolerance = 1e-12;    ///< exact oracles
  double gap_constant = 1.28;  ///< exp_transform tolerance is gap_constant / K
};

struct StabilityConfig {
  std::string scenario = "constant";  ///< constant | truncation | mollification | terminal_shift
  std::vector<double> ns;
  double p = 2.0;
  double q = 2.0;
  double weak_threshold = 1e-6;
  double z_gap_threshold = 1e-3;
  double z_delta = 1e-6;
  double moment_drift = 0.01;
  double z_probe_min = 0.05;
};

struct BmoConfig {
  std::optional<double> K;  ///< formulas at this K; absent: use the solved norm
  double quantile = 0.999;
  std::optional<double> Y_sup;  ///< absent: the terminal bound
};

struct RegularizeConfig {
  std::vector<std::size_t> ns{1, 2, 3};
  std::vector<std::size_t> ms{1, 2, 3};
  std::vector<double> eps{0.01};
  std::size_t points = 500;
  double z_max = 5.0;
  double y = 0.0;
  double K_y = 1.0;
};

struct BenchConfig {
  std::vector<std::size_t> threads{1, 8};
  std::size_t repeats = 3;
};

inline const std::set<std::string>& commands() {
  static const std::set<std::string> c{"solve", "oracle", "stability", "bmo", "regularize", "bench"};
  return c;
}

struct RunConfig {
  std::string command = "solve";
  ModelConfig model;
  TerminalConfig terminal;
  GeneratorConfig generator;
  SolverConfig solver;
  OracleConfig oracle;
  StabilityConfig stability;
  BmoConfig bmo;
  RegularizeConfig regularize;
  BenchConfig bench;
};

inline std::vector<double> default_ns(const std::string& scenario) {
  if (scenario == "truncation") return {1, 2, 3, 4, 6, 8};
  if (scenario == "mollification") return {1e-2, 1e-3, 1e-4, 1e-5, 1e-6};
  if (scenario == "terminal_shift") return {0.1, 0.05, 0.02, 0.0};
  return {1, 2, 3, 4};
}

/// Parses a config for `command`. A report.json written by the tool is also
/// accepted: its embedded config is used. `seed_override` replaces
/// model.seed before defaults are echoed.
inline RunConfig parse_config(const json& doc, const std::string& command,
                              std::optional<std::uint64_t> seed_override = std::nullopt) {
  if (!commands().count(command)) throw ConfigError("unknown command '" + command + "'");
  const json* root = &doc;
  if (doc.is_object() && doc.contains("config") && doc.contains("command")) root = &doc.at("config");

  RunConfig rc;
  rc.command = command;
  Section top(*root, "config");

  {
    auto s = top.child("model");
    auto& m = rc.model;
    m.engine = s.text("engine", m.engine, {"lattice", "montecarlo"});
    m.T = s.number("T", m.T);
    m.steps = s.count("steps", m.steps);
    m.d = s.count("d", m.d);
    m.paths = s.count("paths", m.paths);
    m.seed = s.seed("seed", m.seed);
    m.scheme = s.text("scheme", m.scheme, {"auto", "full", "recombining"});
    m.increments = s.text("increments", m.increments, {"gaussian", "rademacher"});
    m.basis = s.text("basis", m.basis, {"default", "polynomial", "piecewise_constant"});
    m.degree = s.count("degree", m.degree);
    m.bins = s.count("bins", m.bins);
    m.density_form = s.text("density_form", m.density_form, {"product", "exponential"});
    s.finish();
    if (!(m.T > 0.0)) throw ConfigError("config.model.T: must be positive");
    if (seed_override) m.seed = *seed_override;
  }
  {
    auto s = top.child("terminal");
    rc.terminal.name = s.text("name", rc.terminal.name);
    rc.terminal.params = s.params("params");
    s.finish();
  }
  {
    auto s = top.child("generator");
    auto& g = rc.generator;
    g.name = s.text("name", g.name);
    g.params = s.params("params");
    g.transforms = s.texts("transforms");
    if (s.has("random_bound") || g.name == "random_bound_linear") {
      auto b = s.child("random_bound");
      RandomBoundConfig rb;
      rb.kind = b.text("kind", rb.kind, {"constant", "abs_tanh", "indicator", "running_max"});
      rb.scale = b.number("scale", rb.scale);
      rb.budget = b.number("budget", rb.budget);
      b.finish();
      g.random_bound = rb;
    } else {
      s.child("random_bound");
    }
    s.finish();
  }
  {
    auto s = top.child("solver");
    auto& o = rc.solver;
    o.tol = s.number("tol", rc.model.engine == "lattice" ? 1e-9 : 1e-4);
    o.max_iter = s.count("max_iter", o.max_iter);
    o.damping = s.number("damping", o.damping);
    o.auto_damping = s.flag("auto_damping", o.auto_damping);
    o.min_damping = s.number("min_damping", o.min_damping);
    o.clip = s.number("clip", o.clip);
    o.z_eps = s.number("z_eps", o.z_eps);
    o.allow_unbounded_terminal = s.flag("allow_unbounded_terminal", o.allow_unbounded_terminal);
    o.bootstrap = s.count("bootstrap", o.bootstrap);
    o.min_ess_fraction = s.number("min_ess_fraction", o.min_ess_fraction);
    s.finish();
  }

  // Scenario blocks: only the one belonging to the command is allowed.
  for (const std::string block : {"oracle", "stability", "bmo", "regularize", "bench"}) {
    if (block != command && root->contains(block)) {
      throw ConfigError("config." + block + ": not used by the '" + command + "' command");
    }
  }
  if (command == "oracle") {
    auto s = top.child("oracle");
    auto& o = rc.oracle;
    o.name = s.text("name", "", {"conditional_mean", "girsanov_shift", "exp_transform"});
    if (o.name.empty()) throw ConfigError("config.oracle.name: required");
    o.levels = s.counts("levels", o.levels);
    o.tolerance = s.number("tolerance", o.tolerance);
    o.gap_constant = s.number("gap_constant", o.gap_constant);
    s.finish();
    if (o.levels.empty()) throw ConfigError("config.oracle.levels: empty");
  } else if (command == "stability") {
    auto s = top.child("stability");
    auto& o = rc.stability;
    o.scenario = s.text("scenario", o.scenario, {"constant", "truncation", "mollification", "terminal_shift"});
    o.ns = s.numbers("ns", default_ns(o.scenario));
    o.p = s.number("p", o.p);
    o.q = s.number("q", o.q);
    o.weak_threshold = s.number("weak_threshold", o.weak_threshold);
    o.z_gap_threshold = s.number("z_gap_threshold", o.z_gap_threshold);
    o.z_delta = s.number("z_delta", o.z_delta);
    o.moment_drift = s.number("moment_drift", o.moment_drift);
    o.z_probe_min = s.number("z_probe_min", o.z_probe_min);
    s.finish();
  } else if (command == "bmo") {
    auto s = top.child("bmo");
    auto& o = rc.bmo;
    if (s.has("K")) o.K = s.number("K", 0.0);
    else s.number("K", 0.0);
    o.quantile = s.number("quantile", o.quantile);
    if (s.has("Y_sup")) o.Y_sup = s.number("Y_sup", 0.0);
    else s.number("Y_sup", 0.0);
    s.finish();
  } else if (command == "regularize") {
    auto s = top.child("regularize");
    auto& o = rc.regularize;
    o.ns = s.counts("ns", o.ns);
    o.ms = s.counts("ms", o.ms);
    o.eps = s.numbers("eps", o.eps);
    o.points = s.count("points", o.points);
    o.z_max = s.number("z_max", o.z_max);
    o.y = s.number("y", o.y);
    o.K_y = s.number("K_y", o.K_y);
    s.finish();
    if (o.points < 2) throw ConfigError("config.regularize.points: need at least 2");
  } else if (command == "bench") {
    auto s = top.child("bench");
    auto& o = rc.bench;
    o.threads = s.counts("threads", o.threads);
    o.repeats = s.count("repeats", o.repeats);
    s.finish();
    if (o.threads.empty()) throw ConfigError("config.bench.threads: empty");
  }
  top.finish();
  return rc;
}

/// Config with every default filled in; feeding it back reproduces the run.
inline json echo(const RunConfig& rc) {
  json j;
  const auto& m = rc.model;
  j["model"] = {{"engine", m.engine},     {"T", m.T},
                {"steps", m.steps},       {"d", m.d},
                {"paths", m.paths},       {"seed", m.seed},
                {"scheme", m.scheme},     {"increments", m.increments},
                {"basis", m.basis},       {"degree", m.degree},
                {"bins", m.bins},         {"density_form", m.density_form}};
  j["terminal"] = {{"name", rc.terminal.name}, {"params", json::object()}};
  for (const auto& [k, v] : rc.terminal.params) j["terminal"]["params"][k] = v;
  const auto& g = rc.generator;
  j["generator"] = {{"name", g.name}, {"params", json::object()}, {"transforms", g.transforms}};
  for (const auto& [k, v] : g.params) j["generator"]["params"][k] = v;
  if (g.random_bound) {
    j["generator"]["random_bound"] = {
        {"kind", g.random_bound->kind}, {"scale", g.random_bound->scale}, {"budget", g.random_bound->budget}};
  }
  const auto& s = rc.solver;
  j["solver"] = {{"tol", s.tol},
                 {"max_iter", s.max_iter},
                 {"damping", s.damping},
                 {"auto_damping", s.auto_damping},
                 {"min_damping", s.min_damping},
                 {"clip", s.clip},
                 {"z_eps", s.z_eps},
                 {"allow_unbounded_terminal", s.allow_unbounded_terminal},
                 {"bootstrap", s.bootstrap},
                 {"min_ess_fraction", s.min_ess_fraction}};
  if (rc.command == "oracle") {
    const auto& o = rc.oracle;
    j["oracle"] = {{"name", o.name}, {"levels", o.levels}, {"tolerance", o.tolerance}, {"gap_constant", o.gap_constant}};
  } else if (rc.command == "stability") {
    const auto& o = rc.stability;
    j["stability"] = {{"scenario", o.scenario},
                      {"ns", o.ns},
                      {"p", o.p},
                      {"q", o.q},
                      {"weak_threshold", o.weak_threshold},
                      {"z_gap_threshold", o.z_gap_threshold},
                      {"z_delta", o.z_delta},
                      {"moment_drift", o.moment_drift},
                      {"z_probe_min", o.z_probe_min}};
  } else if (rc.command == "bmo") {
    const auto& o = rc.bmo;
    j["bmo"] = {{"K", o.K ? json(*o.K) : json(nullptr)},
                {"quantile", o.quantile},
                {"Y_sup", o.Y_sup ? json(*o.Y_sup) : json(nullptr)}};
  } else if (rc.command == "regularize") {
    const auto& o = rc.regularize;
    j["regularize"] = {{"ns", o.ns}, {"ms", o.ms}, {"eps", o.eps}, {"points", o.points},
                       {"z_max", o.z_max}, {"y", o.y}, {"K_y", o.K_y}};
  } else if (rc.command == "bench") {
    j["bench"] = {{"threads", rc.bench.threads}, {"repeats", rc.bench.repeats}};
  }
  return j;
}

inline json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
}

}  // namespace mbsde::cli
