#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mbsde/core.hpp"
#include "mbsde/generators.hpp"
#include "mbsde/lattice.hpp"
#include "mbsde/terminal.hpp"

namespace mbsde::stability {

/// One problem (g_n, xi_n) of a sequence.
struct Member {
  GeneratorG g;
  TerminalCondition xi;
};

using MemberBuilder = std::function<Member(double n)>;

/// Node functional X evaluated at step `step` (a fraction of K resolved at
/// run time when `fraction` > 0).
struct TestFunctional {
  std::string name;
  double fraction = 1.0;  ///< step = round(fraction * K)
  std::function<double(const State&)> h;
};

/// xi itself; min(W_T, 1); clamp(W, -3, 3)^2 at K/3, 2K/3, K; 1{W_T > 0}.
inline std::vector<TestFunctional> default_functionals(const TerminalCondition& xi) {
  auto sq = [](const State& s) {
    const double w = std::clamp(s.w1(), -3.0, 3.0);
    return w * w;
  };
  return {
      {"xi", 1.0, xi.evaluate},
      {"min_WT_1", 1.0, [](const State& s) { return std::min(s.w1(), 1.0); }},
      {"clamped_sq_third", 1.0 / 3.0, sq},
      {"clamped_sq_two_thirds", 2.0 / 3.0, sq},
      {"clamped_sq_T", 1.0, sq},
      {"indicator_WT_pos", 1.0, [](const State& s) { return s.w1() > 0.0 ? 1.0 : 0.0; }},
  };
}

struct SequenceScenario {
  SequenceScenario(std::string name_, MemberBuilder member_, std::vector<double> ns_, Member limit_)
      : name(std::move(name_)), member(std::move(member_)), ns(std::move(ns_)), limit(std::move(limit_)) {}

  std::string name;
  MemberBuilder member;
  std::vector<double> ns;
  Member limit;
  double p = 2.0;
  double q = 2.0;
  std::vector<TestFunctional> functionals;  ///< empty: default_functionals(limit.xi)
  bool almost = false;                      ///< compacts avoid z = 0; limit judged by a_residual
  double z_probe_min = 0.05;
  double weak_threshold = 1e-6;
  double z_gap_threshold = 1e-3;
  double z_delta = 1e-6;
  double moment_drift = 0.01;
  lattice::SolverOptions solver;
};

struct StabilityRow {
  double n = 0.0;
  bool converged = false;
  std::size_t iterations = 0;
  double y0 = kNaN;
  double residual = kNaN;
  double a_residual = kNaN;
  double moment_p = kNaN;    ///< E[R^p]
  double moment_neg = kNaN;  ///< E_Q[R^{-p}] = E[R^{1-p}]
  double xi_error = kNaN;    ///< ||xi_n - xi||_{L^{2q}}
  double y_error = kNaN;     ///< (E sum |Y^n - Y|^2 dt)^{1/2}
  double g_error = kNaN;     ///< max over probe compacts of |g_n - g|
  std::vector<double> weak_gaps;
  double max_weak_gap = kNaN;
  double z_gap = kNaN;  ///< (P x dt)(|Z^n - Z| > delta) / T
};

struct StabilityReport {
  std::string name;
  std::vector<std::string> functional_names;
  std::vector<StabilityRow> rows;
  lattice::MeasureSolutionResult limit;
  double limit_moment_p = kNaN;
  double limit_moment_neg = kNaN;
  bool moments_ok = false;
  bool errors_ok = false;
  bool gaps_ok = false;
  bool limit_ok = false;
  bool passed = false;
  bool partial = false;  ///< a member failed to converge
  double failing_n = kNaN;
};

namespace detail {

inline std::size_t resolve_step(double fraction, std::size_t K) {
  const auto s = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(K)));
  return std::min(s, K);
}

/// Every row in the last third stays within (1 + drift) of the running max
/// of the rows before it.
inline bool bounded_by_running_max(const std::vector<double>& v, double drift) {
  if (v.empty()) return true;
  const std::size_t n = v.size();
  const std::size_t first = n - std::max<std::size_t>(1, (n + 2) / 3);
  double run = v[0];
  for (std::size_t i = 1; i < n; ++i) {
    if (i >= first && !(v[i] <= (1.0 + drift) * run)) return false;
    run = std::max(run, v[i]);
  }
  return true;
}

inline bool nonincreasing(const std::vector<double>& v, double slack = 1e-12) {
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (!(v[i] <= v[i - 1] + slack)) return false;
  }
  return true;
}

}  // namespace detail

/// Solves the limit problem once, then each member, and checks the
/// hypotheses (moments, xi, Y and g convergence) and the conclusions (weak
/// convergence of Q_n, Z^n -> Z in P x dt measure).
inline StabilityReport run_stability(const SequenceScenario& sc, const LatticeModel& model) {
  if (!(sc.p > 1.0 && sc.q > 1.0) || std::abs(1.0 / sc.p + 1.0 / sc.q - 1.0) > 1e-12) {
    throw DomainError("stability: p and q must be conjugate exponents > 1");
  }
  if (sc.ns.empty()) throw DomainError("stability: empty n range");
  const std::size_t K = model.steps();
  const double dt = model.dt();
  const double T = model.grid().horizon();
  StabilityReport rep;
  rep.name = sc.name;
  const auto functionals = sc.functionals.empty() ? default_functionals(sc.limit.xi) : sc.functionals;
  for (const auto& f : functionals) rep.functional_names.push_back(f.name);

  rep.limit = lattice::solve_measure_solution(sc.limit.g, sc.limit.xi, model, sc.solver);
  const auto& lim = rep.limit;
  rep.limit_moment_p = lattice::density_moment(model, lim.zeta(), sc.p);
  rep.limit_moment_neg = lattice::density_moment(model, lim.zeta(), 1.0 - sc.p);
  const auto lim_leaves = lattice::terminal_values(model, sc.limit.xi);
  std::vector<double> lim_weak;
  for (const auto& f : functionals) {
    const std::size_t j = detail::resolve_step(f.fraction, K);
    lim_weak.push_back(lattice::q_expectation(model, lim.zeta(), j, [&](std::size_t k, std::size_t i) {
      double w;
      return f.h(model.state(k, i, w));
    }));
  }
  const double K_y = std::max(1.0, std::isfinite(sc.limit.xi.bound) ? sc.limit.xi.bound : 1.0);
  ProbeGrid probes = ProbeGrid::standard(sc.limit.g.dim(), K_y);
  if (sc.almost) probes = probes.excluding_small_z(sc.z_probe_min);

  for (double n : sc.ns) {
    const Member mem = sc.member(n);
    StabilityRow row;
    row.n = n;
    const auto res = lattice::solve_measure_solution(mem.g, mem.xi, model, sc.solver);
    row.converged = res.converged;
    row.iterations = res.iterations;
    row.y0 = res.y0();
    row.residual = res.residual;
    row.a_residual = res.a_residual;
    if (!res.converged) {
      rep.rows.push_back(row);
      rep.partial = true;
      rep.failing_n = n;
      break;
    }
    row.moment_p = lattice::density_moment(model, res.zeta(), sc.p);
    row.moment_neg = lattice::density_moment(model, res.zeta(), 1.0 - sc.p);
    const auto leaves = lattice::terminal_values(model, mem.xi);
    const double xi_moment = lattice_expectation(model, [&](std::size_t i) {
      return std::pow(std::abs(leaves[i] - lim_leaves[i]), 2.0 * sc.q);
    });
    row.xi_error = std::pow(xi_moment, 1.0 / (2.0 * sc.q));
    row.y_error = std::sqrt(lattice_expected_sum(model, 0, K - 1, [&](std::size_t k, std::size_t i) {
      const double e = res.y(k, i) - lim.y(k, i);
      return e * e * dt;
    }));
    row.g_error = sup_error_delta(sc.limit.g, mem.g, probes);
    row.max_weak_gap = 0.0;
    for (std::size_t f = 0; f < functionals.size(); ++f) {
      const std::size_t j = detail::resolve_step(functionals[f].fraction, K);
      const double v = lattice::q_expectation(model, res.zeta(), j, [&](std::size_t k, std::size_t i) {
        double w;
        return functionals[f].h(model.state(k, i, w));
      });
      row.weak_gaps.push_back(std::abs(v - lim_weak[f]));
      row.max_weak_gap = std::max(row.max_weak_gap, row.weak_gaps.back());
    }
    row.z_gap = lattice_expected_sum(model, 0, K - 1, [&](std::size_t k, std::size_t i) {
                  return std::abs(res.z(k, i) - lim.z(k, i)) > sc.z_delta ? dt : 0.0;
                }) /
                T;
    rep.rows.push_back(row);
  }

  std::vector<double> mp, mn, xe, ye;
  for (const auto& r : rep.rows) {
    if (!r.converged) continue;
    mp.push_back(r.moment_p);
    mn.push_back(r.moment_neg);
    xe.push_back(r.xi_error);
    ye.push_back(r.y_error);
  }
  auto sup = [](const std::vector<double>& v) { return v.empty() ? kInf : *std::max_element(v.begin(), v.end()); };
  rep.moments_ok = detail::bounded_by_running_max(mp, sc.moment_drift) &&
                   detail::bounded_by_running_max(mn, sc.moment_drift) &&
                   rep.limit_moment_p <= (1.0 + sc.moment_drift) * sup(mp) &&
                   rep.limit_moment_neg <= (1.0 + sc.moment_drift) * sup(mn);
  rep.errors_ok = detail::nonincreasing(xe) && detail::nonincreasing(ye);
  if (!rep.rows.empty() && rep.rows.back().converged) {
    const auto& last = rep.rows.back();
    rep.gaps_ok = last.max_weak_gap < sc.weak_threshold && last.z_gap < sc.z_gap_threshold;
  }
  rep.limit_ok = sc.almost ? (lim.a_residual <= sc.solver.tol) : lim.converged;
  rep.passed = !rep.partial && rep.moments_ok && rep.errors_ok && rep.gaps_ok && rep.limit_ok;
  return rep;
}

// ---------------------------------------------------------------------------
// Scenario builders.

/// g_n = truncate(n, n) of f = z.g.
inline SequenceScenario truncation_scenario(const GeneratorG& g, const TerminalCondition& xi,
                                            std::vector<double> ns) {
  const GeneratorF f = g_to_f(g);
  auto builder = [f, xi](double n) {
    const auto c = static_cast<std::size_t>(std::llround(n));
    if (c == 0 || std::abs(n - static_cast<double>(c)) > 1e-9) {
      throw DomainError("truncation scenario: n must be a positive integer");
    }
    return Member{truncate_nm(f, {c, c}).g, xi};
  };
  return SequenceScenario("truncation", builder, std::move(ns), Member{g, xi});
}

/// g_n = mollify(eps_n) of g; the compacts avoid z = 0 (almost-measure limit).
inline SequenceScenario mollification_scenario(const GeneratorG& g, const TerminalCondition& xi,
                                               std::vector<double> eps) {
  auto builder = [g, xi](double e) {
    MollifierSpec spec;
    spec.eps = e;
    return Member{mollify(g, spec), xi};
  };
  SequenceScenario sc("mollification", builder, std::move(eps), Member{g, xi});
  sc.almost = true;
  return sc;
}

/// xi_n = xi + a_n with g fixed.
inline SequenceScenario terminal_shift_scenario(const GeneratorG& g, const TerminalCondition& xi,
                                                std::vector<double> shifts) {
  auto builder = [g, xi](double a) { return Member{g, shifted(xi, a)}; };
  return SequenceScenario("terminal_shift", builder, std::move(shifts), Member{g, xi});
}

/// g_n = g, xi_n = xi.
inline SequenceScenario constant_scenario(const GeneratorG& g, const TerminalCondition& xi, std::size_t count) {
  std::vector<double> ns;
  for (std::size_t i = 1; i <= count; ++i) ns.push_back(static_cast<double>(i));
  auto builder = [g, xi](double) { return Member{g, xi}; };
  return SequenceScenario("constant", builder, std::move(ns), Member{g, xi});
}

// ---------------------------------------------------------------------------
// Monotone truncation family g_nm: Y^{nm} nondecreasing in m, nonincreasing
// in n, node-wise.

struct MonotoneFamilyReport {
  std::vector<std::size_t> ns;
  std::vector<std::size_t> ms;
  std::vector<double> y0;              ///< row-major over (n, m)
  double worst_m_violation = 0.0;      ///< max of Y^{n,m} - Y^{n,m+1}
  double worst_n_violation = 0.0;      ///< max of Y^{n+1,m} - Y^{n,m}
  std::vector<double> m_stabilization; ///< per n: max node gap between the last two m
  bool all_converged = true;
  bool passed = false;
};

inline MonotoneFamilyReport monotone_family_check(const GeneratorF& f, const TerminalCondition& xi,
                                                  const LatticeModel& model, std::vector<std::size_t> ns,
                                                  std::vector<std::size_t> ms,
                                                  const lattice::SolverOptions& opts = {}, double tol = 1e-10) {
  if (ns.empty() || ms.empty()) throw DomainError("monotone_family_check: empty n or m list");
  std::sort(ns.begin(), ns.end());
  std::sort(ms.begin(), ms.end());
  MonotoneFamilyReport rep;
  rep.ns = ns;
  rep.ms = ms;
  std::vector<std::vector<NodeProcess>> ys(ns.size());
  for (std::size_t a = 0; a < ns.size(); ++a) {
    for (std::size_t b = 0; b < ms.size(); ++b) {
      const auto res = lattice::solve_measure_solution(truncate_nm(f, {ns[a], ms[b]}).g, xi, model, opts);
      rep.all_converged = rep.all_converged && res.converged;
      rep.y0.push_back(res.y0());
      ys[a].push_back(res.y);
    }
  }
  auto max_diff = [&](const NodeProcess& lhs, const NodeProcess& rhs) {
    double worst = -kInf;
    for (std::size_t k = 0; k <= model.steps(); ++k) {
      const auto& l = lhs.slice(k);
      const auto& r = rhs.slice(k);
      for (std::size_t i = 0; i < l.size(); ++i) worst = std::max(worst, l[i] - r[i]);
    }
    return worst;
  };
  for (std::size_t a = 0; a < ns.size(); ++a) {
    for (std::size_t b = 0; b + 1 < ms.size(); ++b) {
      rep.worst_m_violation = std::max(rep.worst_m_violation, max_diff(ys[a][b], ys[a][b + 1]));
    }
    if (ms.size() >= 2) {
      const double up = max_diff(ys[a][ms.size() - 1], ys[a][ms.size() - 2]);
      const double down = max_diff(ys[a][ms.size() - 2], ys[a][ms.size() - 1]);
      rep.m_stabilization.push_back(std::max(up, down));
    }
  }
  for (std::size_t a = 0; a + 1 < ns.size(); ++a) {
    for (std::size_t b = 0; b < ms.size(); ++b) {
      rep.worst_n_violation = std::max(rep.worst_n_violation, max_diff(ys[a + 1][b], ys[a][b]));
    }
  }
  rep.passed = rep.all_converged && rep.worst_m_violation <= tol && rep.worst_n_violation <= tol;
  return rep;
}

}  // namespace mbsde::stability
