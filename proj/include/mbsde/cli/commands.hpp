#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mbsde/bmo.hpp"
#include "mbsde/cli/config.hpp"
#include "mbsde/cli/output.hpp"
#include "mbsde/generator_catalog.hpp"
#include "mbsde/lattice.hpp"
#include "mbsde/montecarlo.hpp"
#include "mbsde/stability.hpp"

namespace mbsde::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitRejected = 2;  ///< ran fine, but the model says no

inline constexpr const char* kVersion = "1.0.0";

struct Context {
  RunConfig rc;
  std::filesystem::path out_dir;
  std::ostream& out;
  std::ostream& err;
};

struct Problem {
  GeneratorG g;
  TerminalCondition xi;
};

inline Problem build_problem(const RunConfig& rc) {
  RandomBoundPtr rb;
  if (rc.generator.random_bound) {
    const auto& b = *rc.generator.random_bound;
    rb = make_random_bound(b.kind, b.scale, b.budget);
  }
  auto g = make_generator(rc.generator.name, rc.generator.params, rc.model.d, rb);
  g = apply_transforms(std::move(g), rc.generator.transforms);
  return {std::move(g), terminal_builtin(rc.terminal.name, rc.terminal.params)};
}

inline TreeScheme resolve_scheme(const RunConfig& rc, const Problem& pb) {
  if (rc.model.scheme == "full") return TreeScheme::full;
  if (rc.model.scheme == "recombining") return TreeScheme::recombining;
  return lattice::preferred_scheme(pb.g, pb.xi);
}

inline LatticeModel make_model(const RunConfig& rc, const Problem& pb, std::size_t steps) {
  return build_lattice(rc.model.T, steps, resolve_scheme(rc, pb));
}

inline lattice::SolverOptions lattice_options(const SolverConfig& s) {
  lattice::SolverOptions o;
  o.tol = s.tol;
  o.max_iter = s.max_iter;
  o.damping = s.damping;
  o.auto_damping = s.auto_damping;
  o.min_damping = s.min_damping;
  o.clip = s.clip;
  o.z_eps = s.z_eps;
  o.allow_unbounded_terminal = s.allow_unbounded_terminal;
  return o;
}

inline mc::McOptions mc_options(const RunConfig& rc) {
  const auto& s = rc.solver;
  mc::McOptions o;
  o.tol = s.tol;
  o.max_iter = s.max_iter;
  o.damping = s.damping;
  o.auto_damping = s.auto_damping;
  o.min_damping = s.min_damping;
  o.clip = s.clip;
  o.z_eps = s.z_eps;
  o.allow_unbounded_terminal = s.allow_unbounded_terminal;
  o.bootstrap = s.bootstrap;
  o.min_ess_fraction = s.min_ess_fraction;
  o.form = rc.model.density_form == "exponential" ? mc::DensityForm::exponential : mc::DensityForm::product;
  return o;
}

inline mc::RegressionBasis make_basis(const ModelConfig& m) {
  if (m.basis == "polynomial") return mc::RegressionBasis::polynomial(m.d, m.degree);
  if (m.basis == "piecewise_constant") return mc::RegressionBasis::piecewise_constant(m.d, m.bins);
  return mc::RegressionBasis::default_for(m.d);
}

inline PathEnsemble make_ensemble(const ModelConfig& m, std::size_t steps) {
  const auto law = m.increments == "rademacher" ? IncrementLaw::rademacher : IncrementLaw::gaussian;
  return simulate_paths(TimeGrid(m.T, steps), m.d, m.paths, m.seed, law);
}

// ---------------------------------------------------------------------------
// One solve on either engine, summarized for the report.

struct SolveOutcome {
  json summary;
  json engine;
  std::vector<lattice::TraceRow> trace;
  bool converged = false;
  bool clip_active = false;
  double y0 = kNaN;
  double residual = kNaN;
  std::size_t iterations = 0;
  std::optional<LatticeModel> model;
  std::optional<lattice::MeasureSolutionResult> lattice;
  std::optional<PathEnsemble> ensemble;
  std::optional<mc::RegressionBasis> basis;
  std::optional<mc::McSolveReport> mc;
};

inline SolveOutcome solve_problem(const RunConfig& rc, const Problem& pb, std::size_t steps) {
  SolveOutcome o;
  if (rc.model.engine == "lattice") {
    o.model.emplace(make_model(rc, pb, steps));
    o.lattice.emplace(lattice::solve_measure_solution(pb.g, pb.xi, *o.model, lattice_options(rc.solver)));
    const auto& r = *o.lattice;
    o.summary = {{"y0", num(r.y0())},
                 {"residual", num(r.residual)},
                 {"a_residual", num(r.a_residual)},
                 {"max_residual", num(r.max_residual)},
                 {"iterations", r.iterations},
                 {"converged", r.converged},
                 {"clip_active", r.clip_active}};
    o.engine = {{"engine", "lattice"}, {"scheme", to_string(o.model->scheme())}, {"steps", steps}};
    o.trace = r.trace;
    o.converged = r.converged;
    o.clip_active = r.clip_active;
    o.y0 = r.y0();
    o.residual = r.residual;
    o.iterations = r.iterations;
    return o;
  }
  o.ensemble.emplace(make_ensemble(rc.model, steps));
  o.basis.emplace(make_basis(rc.model));
  o.mc.emplace(mc::mc_solve(pb.g, pb.xi, *o.ensemble, *o.basis, mc_options(rc)));
  const auto& r = *o.mc;
  json r2 = json::array(), cond = json::array();
  for (double v : r.r2) r2.push_back(num(v));
  for (double v : r.condition) cond.push_back(num(v));
  o.summary = {{"y0", num(r.y0)},
               {"y0_direct", num(r.y0_direct)},
               {"y0_ci", num(r.y0_ci)},
               {"residual", num(r.residual)},
               {"residual_ci", num(r.residual_ci)},
               {"a_residual", num(r.a_residual)},
               {"max_residual", num(r.max_residual)},
               {"iterations", r.iterations},
               {"converged", r.converged},
               {"clip_active", r.clip_active},
               {"ess", num(r.ess)},
               {"weight_mean", num(r.weight_mean)},
               {"weight_mean_flag", r.weight_mean_flag},
               {"e_rep", num(r.e_rep)},
               {"floored_multipliers", r.floored_multipliers},
               {"r2", r2},
               {"condition", cond}};
  o.engine = {{"engine", "montecarlo"},
              {"steps", steps},
              {"paths", rc.model.paths},
              {"seed", rc.model.seed},
              {"increments", rc.model.increments},
              {"basis", r.basis},
              {"density_form", to_string(mc_options(rc).form)}};
  o.trace = r.trace;
  o.converged = r.converged;
  o.clip_active = r.clip_active;
  o.y0 = r.y0;
  o.residual = r.residual;
  o.iterations = r.iterations;
  return o;
}

inline void warn_diagnostics(const Context& cx, const SolveOutcome& o) {
  if (o.converged && o.clip_active) {
    cx.err << "warning: the density clip is active at convergence; the time grid is too coarse for this generator\n";
  }
  if (o.mc && o.mc->weight_mean_flag) {
    cx.err << "warning: mean of the terminal density is " << o.mc->weight_mean
           << ", more than 5/sqrt(N) away from 1\n";
  }
}

inline json make_report(const Context& cx, json result, json engine) {
  engine["threads"] = thread_count();
  engine["version"] = kVersion;
  return {{"command", cx.rc.command}, {"config", echo(cx.rc)}, {"engine", std::move(engine)},
          {"result", std::move(result)}};
}

inline void write_report(const Context& cx, json report, double wall_seconds) {
  report["wall_clock_s"] = wall_seconds;
  std::filesystem::create_directories(cx.out_dir);
  write_text(cx.out_dir / "report.json", report.dump(2) + "\n");
}

inline std::string fmt(double v) { return format_number(v); }

// ---------------------------------------------------------------------------
// solve

inline int cmd_solve(const Context& cx, json& report) {
  const Problem pb = build_problem(cx.rc);
  const auto o = solve_problem(cx.rc, pb, cx.rc.model.steps);
  warn_diagnostics(cx, o);
  std::filesystem::create_directories(cx.out_dir);
  write_text(cx.out_dir / "trace.csv", trace_table(o.trace).str());
  report = make_report(cx, o.summary, o.engine);
  cx.out << "Y0 = " << fmt(o.y0) << "\nresidual = " << fmt(o.residual) << "\niterations = " << o.iterations
         << "\nstatus = " << (o.converged ? "converged" : "not converged") << "\n";
  if (!o.converged) {
    cx.err << "solver did not reach tol = " << cx.rc.solver.tol << " within " << cx.rc.solver.max_iter
           << " iterations (final residual " << fmt(o.residual) << ")\n";
    return kExitRejected;
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// oracle

namespace detail {

inline double binomial_pmf(std::size_t n, std::size_t j, double q) {
  const double nn = static_cast<double>(n), jj = static_cast<double>(j);
  double lp = std::lgamma(nn + 1) - std::lgamma(jj + 1) - std::lgamma(nn - jj + 1);
  if (j > 0) lp += jj * std::log(q);
  if (j < n) lp += (nn - jj) * std::log1p(-q);
  return std::exp(lp);
}

/// E[h(W_T) | W_{t_k} = w] under up-probability q, summed over the binomial
/// law of the remaining moves.
template <typename H>
double binomial_expectation(std::size_t remaining, double w, double sqrt_dt, double q, H&& h) {
  double s = 0.0;
  for (std::size_t j = 0; j <= remaining; ++j) {
    const double wt = w + (2.0 * static_cast<double>(j) - static_cast<double>(remaining)) * sqrt_dt;
    s += binomial_pmf(remaining, j, q) * h(wt);
  }
  return s;
}

inline double xi_at(const TerminalCondition& xi, double T, std::size_t K, double w) {
  return xi(State{T, K, std::span<const double>(&w, 1), kNaN});
}

}  // namespace detail

/// Applicability of the chosen oracle to the configured generator. Returns
/// the constant drift b (girsanov_shift) or gamma (exp_transform).
inline double oracle_parameter(const RunConfig& rc, const Problem& pb) {
  const auto& name = rc.oracle.name;
  const auto& gname = rc.generator.name;
  const bool plain = rc.generator.transforms.empty();
  auto param = [&](const std::string& key, double fallback) {
    const auto it = rc.generator.params.find(key);
    return it == rc.generator.params.end() ? fallback : it->second;
  };
  if (rc.model.d != 1) throw DomainError("oracle: comparisons are one-dimensional (model.d = 1)");
  if (pb.xi.path_dependent) throw DomainError("oracle: the terminal must be a function of W_T");
  if (name == "conditional_mean") {
    const bool zero = gname == "zero" || (gname == "constant_b" && param("b", 0.2) == 0.0);
    if (!plain || !zero) {
      throw DomainError("oracle mismatch: conditional_mean needs g = 0, but the generator is '" + pb.g.label() + "'");
    }
    return 0.0;
  }
  if (name == "girsanov_shift") {
    if (!plain || (gname != "zero" && gname != "constant_b")) {
      throw DomainError("oracle mismatch: girsanov_shift needs a generator constant in (y, z), but '" +
                        pb.g.label() + "' is not");
    }
    return gname == "zero" ? 0.0 : param("b", 0.2);
  }
  if (!plain || gname != "half_z" || param("gamma", 0.5) == 0.0) {
    throw DomainError("oracle mismatch: exp_transform needs g = gamma z with gamma != 0, but the generator is '" +
                      pb.g.label() + "'");
  }
  return param("gamma", 0.5);
}

struct OracleRow {
  std::size_t K = 0;
  double solver = kNaN;
  double oracle = kNaN;
  double gap = kNaN;
  double tolerance = kNaN;
  bool converged = false;
  bool pass = false;
};

inline OracleRow oracle_level(const RunConfig& rc, const Problem& pb, double param, std::size_t K) {
  const auto& name = rc.oracle.name;
  const double T = rc.model.T;
  OracleRow row;
  row.K = K;
  row.tolerance = name == "exp_transform" ? rc.oracle.gap_constant / static_cast<double>(K) : rc.oracle.tolerance;
  const auto o = solve_problem(rc, pb, K);
  row.converged = o.converged;
  row.solver = o.y0;

  if (o.lattice) {
    const auto& model = *o.model;
    const auto& res = *o.lattice;
    const double sdt = model.sqrt_dt();
    auto xi = [&](double w) { return detail::xi_at(pb.xi, T, K, w); };
    if (name == "conditional_mean") {
      row.gap = 0.0;
      for (std::size_t k = 0; k <= K; ++k) {
        for (std::size_t i = 0; i < model.node_count(k); ++i) {
          const double e = detail::binomial_expectation(K - k, model.w(k, i), sdt, 0.5, xi);
          if (k == 0) row.oracle = e;
          row.gap = std::max(row.gap, std::abs(res.y(k, i) - e));
        }
      }
    } else if (name == "girsanov_shift") {
      row.oracle = detail::binomial_expectation(K, 0.0, sdt, 0.5 * (1.0 + param * sdt), xi);
      row.gap = std::abs(row.solver - row.oracle);
      for (std::size_t k = 0; k < K; ++k) {
        for (double z : res.zeta().slice(k)) row.gap = std::max(row.gap, std::abs(z - param));
      }
    } else {
      const double m = detail::binomial_expectation(K, 0.0, sdt, 0.5,
                                                    [&](double w) { return std::exp(2.0 * param * xi(w)); });
      row.oracle = std::log(m) / (2.0 * param);
      row.gap = std::abs(row.solver - row.oracle);
    }
  } else {
    // Same paths, independent estimator; tolerance widened by 3 CI.
    const auto& ens = *o.ensemble;
    const std::size_t N = ens.paths();
    std::vector<double> vals(N);
    const double shift = name == "girsanov_shift" ? param * T : 0.0;
    for (std::size_t p = 0; p < N; ++p) {
      const double x = detail::xi_at(pb.xi, T, K, ens.w(p, K)[0] + shift);
      vals[p] = name == "exp_transform" ? std::exp(2.0 * param * x) : x;
    }
    const double m = deterministic_sum(N, [&](std::size_t p) { return vals[p]; }) / static_cast<double>(N);
    row.oracle = name == "exp_transform" ? std::log(m) / (2.0 * param) : m;
    row.gap = std::abs(row.solver - row.oracle);
    row.tolerance = (name == "exp_transform" ? row.tolerance : 0.0) + 3.0 * o.mc->y0_ci;
  }
  row.pass = row.converged && row.gap <= row.tolerance;
  return row;
}

/// Least-squares slope of -log(gap) against log(K).
inline double empirical_order(const std::vector<OracleRow>& rows) {
  std::vector<double> x, y;
  for (const auto& r : rows) {
    if (r.gap > 0.0 && std::isfinite(r.gap)) {
      x.push_back(std::log(static_cast<double>(r.K)));
      y.push_back(-std::log(r.gap));
    }
  }
  if (x.size() < 2) return kNaN;
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
  }
  const double den = n * sxx - sx * sx;
  return den == 0.0 ? kNaN : (n * sxy - sx * sy) / den;
}

inline int cmd_oracle(const Context& cx, json& report) {
  const Problem pb = build_problem(cx.rc);
  const double param = oracle_parameter(cx.rc, pb);
  std::vector<OracleRow> rows;
  CsvTable table({"K", "solver", "oracle", "gap", "tolerance", "status"});
  json jrows = json::array();
  bool all = true;
  for (std::size_t K : cx.rc.oracle.levels) {
    const auto r = oracle_level(cx.rc, pb, param, K);
    rows.push_back(r);
    all = all && r.pass;
    table.row().add(r.K).add(r.solver).add(r.oracle).add(r.gap).add(r.tolerance).add_text(r.pass ? "PASS" : "FAIL");
    jrows.push_back({{"K", r.K},
                     {"solver", num(r.solver)},
                     {"oracle", num(r.oracle)},
                     {"gap", num(r.gap)},
                     {"tolerance", num(r.tolerance)},
                     {"converged", r.converged},
                     {"status", r.pass ? "PASS" : "FAIL"}});
    cx.out << "K = " << r.K << "  solver = " << fmt(r.solver) << "  oracle = " << fmt(r.oracle)
           << "  gap = " << fmt(r.gap) << "  " << (r.pass ? "PASS" : "FAIL") << "\n";
  }
  const double order = empirical_order(rows);
  std::filesystem::create_directories(cx.out_dir);
  write_text(cx.out_dir / "table.csv", table.str());
  json engine = {{"engine", cx.rc.model.engine}};
  report = make_report(cx, {{"oracle", cx.rc.oracle.name}, {"rows", jrows}, {"empirical_order", num(order)},
                            {"passed", all}},
                       engine);
  if (rows.size() >= 2) cx.out << "empirical order = " << fmt(order) << "\n";
  cx.out << (all ? "PASS" : "FAIL") << "\n";
  return all ? kExitOk : kExitRejected;
}

// ---------------------------------------------------------------------------
// stability

inline stability::SequenceScenario make_scenario(const RunConfig& rc, const Problem& pb) {
  const auto& s = rc.stability;
  auto sc = [&]() {
    if (s.scenario == "truncation") return stability::truncation_scenario(pb.g, pb.xi, s.ns);
    if (s.scenario == "mollification") return stability::mollification_scenario(pb.g, pb.xi, s.ns);
    if (s.scenario == "terminal_shift") return stability::terminal_shift_scenario(pb.g, pb.xi, s.ns);
    return stability::constant_scenario(pb.g, pb.xi, s.ns.size());
  }();
  sc.p = s.p;
  sc.q = s.q;
  sc.weak_threshold = s.weak_threshold;
  sc.z_gap_threshold = s.z_gap_threshold;
  sc.z_delta = s.z_delta;
  sc.moment_drift = s.moment_drift;
  sc.z_probe_min = s.z_probe_min;
  sc.solver = lattice_options(rc.solver);
  return sc;
}

inline int cmd_stability(const Context& cx, json& report) {
  if (cx.rc.model.engine != "lattice") throw DomainError("stability: runs on the lattice engine");
  const Problem pb = build_problem(cx.rc);
  const auto sc = make_scenario(cx.rc, pb);
  const auto model = make_model(cx.rc, pb, cx.rc.model.steps);
  const auto rep = stability::run_stability(sc, model);

  std::vector<std::string> header{"n",        "converged", "iterations", "y0",      "residual",
                                  "a_residual", "moment_p", "moment_neg", "xi_error", "y_error",
                                  "g_error",  "max_weak_gap", "z_gap"};
  for (const auto& f : rep.functional_names) header.push_back("weak_" + f);
  CsvTable table(header);
  json jrows = json::array();
  for (const auto& r : rep.rows) {
    table.row().add(r.n).add(r.converged).add(r.iterations).add(r.y0).add(r.residual).add(r.a_residual);
    table.add(r.moment_p).add(r.moment_neg).add(r.xi_error).add(r.y_error).add(r.g_error);
    table.add(r.max_weak_gap).add(r.z_gap);
    json gaps = json::array();
    for (std::size_t f = 0; f < rep.functional_names.size(); ++f) {
      const double v = f < r.weak_gaps.size() ? r.weak_gaps[f] : kNaN;
      table.add(v);
      gaps.push_back(num(v));
    }
    jrows.push_back({{"n", r.n},
                     {"converged", r.converged},
                     {"iterations", r.iterations},
                     {"y0", num(r.y0)},
                     {"residual", num(r.residual)},
                     {"a_residual", num(r.a_residual)},
                     {"moment_p", num(r.moment_p)},
                     {"moment_neg", num(r.moment_neg)},
                     {"xi_error", num(r.xi_error)},
                     {"y_error", num(r.y_error)},
                     {"g_error", num(r.g_error)},
                     {"weak_gaps", gaps},
                     {"max_weak_gap", num(r.max_weak_gap)},
                     {"z_gap", num(r.z_gap)}});
  }
  std::filesystem::create_directories(cx.out_dir);
  write_text(cx.out_dir / "table.csv", table.str());
  json result = {{"scenario", rep.name},
                 {"functionals", rep.functional_names},
                 {"rows", jrows},
                 {"limit", {{"y0", num(rep.limit.y0())},
                            {"residual", num(rep.limit.residual)},
                            {"a_residual", num(rep.limit.a_residual)},
                            {"converged", rep.limit.converged},
                            {"moment_p", num(rep.limit_moment_p)},
                            {"moment_neg", num(rep.limit_moment_neg)}}},
                 {"moments_ok", rep.moments_ok},
                 {"errors_ok", rep.errors_ok},
                 {"gaps_ok", rep.gaps_ok},
                 {"limit_ok", rep.limit_ok},
                 {"partial", rep.partial},
                 {"failing_n", num(rep.failing_n)},
                 {"passed", rep.passed}};
  report = make_report(cx, result, {{"engine", "lattice"}, {"scheme", to_string(model.scheme())}});
  if (rep.partial) {
    cx.err << "stability: member n = " << fmt(rep.failing_n) << " did not converge; report is partial\n";
  }
  cx.out << "stability " << rep.name << ": " << (rep.passed ? "PASS" : "FAIL") << "\n";
  return rep.passed ? kExitOk : kExitRejected;
}

// ---------------------------------------------------------------------------
// bmo

inline json formulas_json(double K, std::ostream& out) {
  const auto nm = bmo::negative_moment_bound(K);
  out << "r = " << fmt(nm.r) << "\nC = " << fmt(nm.C) << "\n";
  json j = {{"K", K}, {"r", nm.r}, {"C", nm.C}};
  try {
    const auto rh = bmo::reverse_holder_exponent(K);
    j["reverse_holder"] = {{"p", rh.p}, {"p_minus_one", rh.p_minus_one}, {"p_star_minus_one", rh.p_star_minus_one},
                           {"bound", num(rh.bound)}};
    out << "p = " << fmt(rh.p) << "\nreverse_holder_bound = " << fmt(rh.bound) << "\n";
  } catch (const DomainError& e) {
    j["reverse_holder"] = nullptr;
    j["reverse_holder_note"] = e.what();
  }
  return j;
}

inline int cmd_bmo(const Context& cx, json& report) {
  const auto& b = cx.rc.bmo;
  if (b.K) {
    const json result = formulas_json(*b.K, cx.out);
    report = make_report(cx, result, {{"engine", "formulas"}});
    return kExitOk;
  }
  const Problem pb = build_problem(cx.rc);
  const auto o = solve_problem(cx.rc, pb, cx.rc.model.steps);
  warn_diagnostics(cx, o);
  std::filesystem::create_directories(cx.out_dir);
  write_text(cx.out_dir / "trace.csv", trace_table(o.trace).str());
  const auto norm = o.lattice ? bmo::bmo_norm(*o.model, o.lattice->z)
                              : bmo::bmo_norm(*o.ensemble, o.mc->z, *o.basis, b.quantile);
  cx.out << "bmo_norm = " << fmt(norm.value) << " (" << norm.describe() << ")\n";
  json result = {{"solve", o.summary},
                 {"norm", {{"value", norm.value}, {"method", norm.describe()}, {"worst_step", norm.worst_step}}}};
  result["formulas"] = formulas_json(std::max(norm.value, 1e-12), cx.out);
  bool ok = o.converged;
  try {
    const LatticeModel model = o.model ? *o.model : make_model(cx.rc, pb, cx.rc.model.steps);
    const double Y_sup = b.Y_sup ? *b.Y_sup : pb.xi.bound;
    const auto in = bmo::apriori_inputs(pb.g, model, Y_sup);
    const auto rep = bmo::make_report(norm, in);
    const bool within = norm.value <= rep.apriori.K_bound;
    result["apriori"] = {{"C", in.C},
                         {"norm_psi", in.norm_psi},
                         {"norm_phi", in.norm_phi},
                         {"Y_sup", num(in.Y_sup)},
                         {"beta", rep.apriori.beta},
                         {"K_bound", num(rep.apriori.K_bound)},
                         {"within_bound", within}};
    cx.out << "apriori_bound = " << fmt(rep.apriori.K_bound) << (within ? " (holds)" : " (VIOLATED)") << "\n";
    ok = ok && within;
    if (const auto* lin = std::get_if<Linear>(&pb.g.growth()); lin && lin->phi) {
      const auto bc = bmo::random_bound_budget_check(model, *lin->phi);
      result["random_bound"] = {{"norm", bc.norm}, {"budget", num(bc.budget)}, {"passed", bc.passed}};
      ok = ok && bc.passed;
    }
  } catch (const Error& e) {
    result["apriori"] = nullptr;
    result["apriori_note"] = e.what();
    cx.err << "note: no a priori bound: " << e.what() << "\n";
  }
  result["passed"] = ok;
  report = make_report(cx, result, o.engine);
  return ok ? kExitOk : kExitRejected;
}

// ---------------------------------------------------------------------------
// regularize

inline int cmd_regularize(const Context& cx, json& report) {
  const auto& r = cx.rc.regularize;
  if (cx.rc.model.d != 1) throw DomainError("regularize: tabulates on a line (model.d = 1)");
  const Problem pb = build_problem(cx.rc);
  const GeneratorF f = g_to_f(pb.g);
  auto ns = r.ns, ms = r.ms;
  std::sort(ns.begin(), ns.end());
  std::sort(ms.begin(), ms.end());

  std::vector<std::string> header{"z", "f"};
  std::vector<GeneratorF> cols;
  for (std::size_t n : ns) {
    InfConvolutionSpec spec;
    spec.n = n;
    spec.K_y = r.K_y;
    cols.push_back(inf_convolve(f, spec));
    header.push_back("f_" + std::to_string(n));
  }
  for (std::size_t n : ns) {
    for (std::size_t m : ms) {
      cols.push_back(truncate_nm(f, {n, m}).f);
      header.push_back("f_" + std::to_string(n) + "_" + std::to_string(m));
    }
  }
  const bool bounded = std::holds_alternative<Bounded>(f.growth());
  for (double e : r.eps) {
    MollifierSpec spec;
    spec.eps = e;
    spec.allow_unbounded = !bounded;  // tabulation only
    cols.push_back(mollify(f, spec));
    header.push_back("mollified_" + fmt(e));
  }

  const ProbeState ps{0.0, 0, Vec{0.0}, 0.0};
  const State s = ps.view();
  CsvTable table(header);
  const std::size_t P = r.points;
  double worst_n = -kInf, worst_top = -kInf, worst_inside = 0.0, worst_m = -kInf, worst_trunc_n = -kInf;
  std::vector<double> v(cols.size());
  for (std::size_t i = 0; i < P; ++i) {
    const double z = -r.z_max + 2.0 * r.z_max * static_cast<double>(i) / static_cast<double>(P - 1);
    const double fz = f(s, r.y, z);
    table.row().add(z).add(fz);
    for (std::size_t c = 0; c < cols.size(); ++c) {
      v[c] = cols[c](s, r.y, z);
      table.add(v[c]);
    }
    // f_n <= f_{n+1} <= f, and f_n = f on |z| <= n.
    for (std::size_t a = 0; a < ns.size(); ++a) {
      if (a + 1 < ns.size()) worst_n = std::max(worst_n, v[a] - v[a + 1]);
      worst_top = std::max(worst_top, v[a] - fz);
      if (std::abs(z) <= static_cast<double>(ns[a]) && std::abs(r.y) <= r.K_y) {
        worst_inside = std::max(worst_inside, std::abs(v[a] - fz));
      }
    }
    // f_nm nondecreasing in m, nonincreasing in n.
    const std::size_t base = ns.size();
    for (std::size_t a = 0; a < ns.size(); ++a) {
      for (std::size_t bm = 0; bm < ms.size(); ++bm) {
        const double here = v[base + a * ms.size() + bm];
        if (bm + 1 < ms.size()) worst_m = std::max(worst_m, here - v[base + a * ms.size() + bm + 1]);
        if (a + 1 < ns.size()) worst_trunc_n = std::max(worst_trunc_n, v[base + (a + 1) * ms.size() + bm] - here);
      }
    }
  }
  std::filesystem::create_directories(cx.out_dir);
  write_text(cx.out_dir / "table.csv", table.str());
  const bool inf_ok = worst_n <= 0.0 && worst_top <= 0.0 && worst_inside <= 1e-12;
  const bool trunc_ok = worst_m <= 0.0 && worst_trunc_n <= 0.0;
  json result = {{"points", P},
                 {"columns", header},
                 {"inf_convolution", {{"worst_increase_violation", num(worst_n)},
                                      {"worst_above_f", num(worst_top)},
                                      {"worst_gap_inside", worst_inside},
                                      {"passed", inf_ok}}},
                 {"truncation", {{"worst_m_violation", num(worst_m)},
                                 {"worst_n_violation", num(worst_trunc_n)},
                                 {"passed", trunc_ok}}},
                 {"passed", inf_ok && trunc_ok}};
  report = make_report(cx, result, {{"engine", "tabulation"}});
  cx.out << "inf-convolution family: " << (inf_ok ? "PASS" : "FAIL") << "\ntruncation family: "
         << (trunc_ok ? "PASS" : "FAIL") << "\n";
  return inf_ok && trunc_ok ? kExitOk : kExitRejected;
}

// ---------------------------------------------------------------------------
// bench

inline int cmd_bench(const Context& cx, json& report) {
  const Problem pb = build_problem(cx.rc);
  const std::size_t saved = thread_count();
  CsvTable table({"threads", "repeat", "wall_s", "y0", "residual", "iterations"});
  bool identical = true;
  std::optional<SolveOutcome> first;
  json timings = json::array();
  for (std::size_t t : cx.rc.bench.threads) {
    set_thread_count(t);
    double total = 0.0;
    for (std::size_t rep = 0; rep < cx.rc.bench.repeats; ++rep) {
      const auto t0 = std::chrono::steady_clock::now();
      auto o = solve_problem(cx.rc, pb, cx.rc.model.steps);
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      total += wall;
      table.row().add(t).add(rep).add(wall).add(o.y0).add(o.residual).add(o.iterations);
      if (!first) {
        first.emplace(std::move(o));
      } else {
        identical = identical && o.summary == first->summary && o.trace.size() == first->trace.size();
      }
    }
    timings.push_back({{"threads", t}, {"mean_wall_s", total / static_cast<double>(cx.rc.bench.repeats)}});
    cx.out << "threads = " << t << "  mean wall = " << fmt(total / static_cast<double>(cx.rc.bench.repeats))
           << " s\n";
  }
  set_thread_count(saved);
  std::filesystem::create_directories(cx.out_dir);
  write_text(cx.out_dir / "table.csv", table.str());
  report = make_report(cx, {{"solve", first->summary}, {"identical_across_threads", identical}}, first->engine);
  report["timings"] = timings;
  cx.out << "results identical across thread counts: " << (identical ? "yes" : "NO") << "\n";
  return identical ? kExitOk : kExitRejected;
}

// ---------------------------------------------------------------------------
// Entry point shared by the executable and the tests.

struct ThreadScope {
  std::size_t saved = thread_count();
  ~ThreadScope() { set_thread_count(saved); }
};

inline std::optional<std::size_t> env_threads() {
  const char* v = std::getenv("MEASURE_BSDE_THREADS");
  if (!v || !*v) return std::nullopt;
  try {
    std::size_t used = 0;
    const long n = std::stol(v, &used);
    if (used == std::string(v).size() && n > 0) return static_cast<std::size_t>(n);
  } catch (const std::exception&) {
  }
  throw ConfigError(std::string("MEASURE_BSDE_THREADS='") + v + "' is not a positive integer");
}

/// `args` excludes the program name.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  CLI::App app{"Measure-solution BSDE solver", "measure_bsde"};
  app.require_subcommand(1);
  std::string config_path, out_dir = ".";
  std::uint64_t seed = 0;
  std::size_t threads = 0;
  const std::pair<const char*, const char*> subs[] = {
      {"solve", "solve one problem; writes report.json and trace.csv"},
      {"oracle", "compare against a closed-form oracle over refinement levels"},
      {"stability", "run a sequence scenario through the stability harness"},
      {"bmo", "BMO norm, a priori bound and moment exponents"},
      {"regularize", "tabulate inf-convolution, truncation and mollification families"},
      {"bench", "time the solve under several thread counts"},
  };
  std::vector<CLI::Option*> seed_opts, thread_opts;
  for (const auto& [name, desc] : subs) {
    auto* sub = app.add_subcommand(name, desc);
    sub->add_option("config", config_path, "JSON config file")->required();
    sub->add_option("--out", out_dir, "output directory");
    seed_opts.push_back(sub->add_option("--seed", seed, "override model.seed"));
    thread_opts.push_back(
        sub->add_option("--threads", threads, "worker threads (default: MEASURE_BSDE_THREADS or 1)")
            ->check(CLI::PositiveNumber));
  }
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitError;
  }
  std::string command;
  for (auto* sub : app.get_subcommands()) command = sub->get_name();
  bool seed_given = false, threads_given = false;
  for (auto* o : seed_opts) seed_given = seed_given || o->count() > 0;
  for (auto* o : thread_opts) threads_given = threads_given || o->count() > 0;

  ThreadScope scope;
  try {
    if (threads_given) {
      set_thread_count(threads);
    } else if (const auto t = env_threads()) {
      set_thread_count(*t);
    }
    const json doc = load_json_file(config_path);
    Context cx{parse_config(doc, command, seed_given ? std::optional<std::uint64_t>(seed) : std::nullopt),
               out_dir, out, err};
    const auto t0 = std::chrono::steady_clock::now();
    json report;
    int code = kExitOk;
    if (command == "solve") code = cmd_solve(cx, report);
    else if (command == "oracle") code = cmd_oracle(cx, report);
    else if (command == "stability") code = cmd_stability(cx, report);
    else if (command == "bmo") code = cmd_bmo(cx, report);
    else if (command == "regularize") code = cmd_regularize(cx, report);
    else code = cmd_bench(cx, report);
    write_report(cx, std::move(report),
                 std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    return code;
  } catch (const ImportanceWeightError& e) {
    err << "error: " << e.what() << "\n";
    return kExitRejected;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitError;
  }
}

}  // namespace mbsde::cli
