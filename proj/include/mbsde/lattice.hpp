#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mbsde/core.hpp"
#include "mbsde/generators.hpp"
#include "mbsde/terminal.hpp"

namespace mbsde::lattice {

struct SolverOptions {
  double tol = 1e-9;
  std::size_t max_iter = 200;
  double damping = 1.0;  ///< theta in zeta <- (1-theta) zeta + theta g(.,Y,Z)
  bool auto_damping = true;  ///< halve theta whenever the residual increases
  double min_damping = 1.0 / 1024.0;
  double clip = 0.95;  ///< enforce |zeta| sqrt(dt) <= clip
  double z_eps = 1e-12;  ///< |Z| <= z_eps counts as Z = 0 for the a-residual mask
  bool allow_unbounded_terminal = false;  ///< test-only
};

struct TraceRow {
  std::size_t iter = 0;
  double residual = 0.0;
  double a_residual = 0.0;
  double y0 = 0.0;
  double damping = 1.0;
};

/// Discrete density: one-step multipliers 1 + zeta_k dW_k and R_k = prod.
struct DensityProcess {
  NodeProcess zeta;        ///< steps 0..K-1
  NodeProcess cumulative;  ///< R_k, steps 0..K
};

struct MeasureSolutionResult {
  DensityProcess density;
  NodeProcess y;  ///< steps 0..K
  NodeProcess z;  ///< steps 0..K-1
  double residual = kInf;    ///< dP x dt L2 norm of zeta - g(.,Y,Z)
  double a_residual = kInf;  ///< same on {Z != 0}
  double max_residual = kInf;
  std::size_t iterations = 0;
  bool converged = false;
  bool clip_active = false;  ///< clip bound binding at the final iterate
  bool minimal_family = false;  ///< built from a monotone regularization family
  std::vector<TraceRow> trace;

  double y0() const { return y(0, 0); }
  const NodeProcess& zeta() const { return density.zeta; }
};

inline double q_up(double zeta, double sqrt_dt) { return 0.5 * (1.0 + zeta * sqrt_dt); }

inline void check_multiplier(double zeta, double sqrt_dt) {
  if (!(std::abs(zeta) * sqrt_dt < 1.0)) {
    throw InvalidDensityError("density: one-step multiplier 1 +- zeta sqrt(dt) is not positive (zeta = " +
                              std::to_string(zeta) + ")");
  }
}

/// R_0 = 1, R_{k+1} = R_k (1 + zeta_k dW_k). The cumulative density is a
/// node quantity only on the full tree; on the recombining tree it stays
/// empty and R-functionals go through density_moment / q_expectation.
inline DensityProcess make_density(const LatticeModel& model, NodeProcess zeta) {
  const std::size_t K = model.steps();
  const double sdt = model.sqrt_dt();
  for (std::size_t k = 0; k < K; ++k) {
    for (double v : zeta.slice(k)) check_multiplier(v, sdt);
  }
  DensityProcess out{std::move(zeta), NodeProcess()};
  if (model.scheme() != TreeScheme::full) return out;
  out.cumulative = NodeProcess(model, K, 1, 1.0);
  for (std::size_t k = 0; k < K; ++k) {
    const auto& zs = out.zeta.slice(k);
    auto& next = out.cumulative.slice(k + 1);
    const auto& cur = out.cumulative.slice(k);
    parallel_for(model.node_count(k), [&](std::size_t i) {
      const double r = cur[i];
      next[model.child(k, i, true)] = r * (1.0 + zs[i] * sdt);
      next[model.child(k, i, false)] = r * (1.0 - zs[i] * sdt);
    });
  }
  return out;
}

/// E[R_K^p] under P by backward induction on the one-step multipliers, so it
/// works on both tree schemes. p = 1 gives E[R_K] = 1; p = 1 - s gives
/// E_Q[R_K^{-s}].
inline double density_moment(const LatticeModel& model, const NodeProcess& zeta, double p) {
  const std::size_t K = model.steps();
  const double sdt = model.sqrt_dt();
  std::vector<double> acc(model.node_count(K), 1.0);
  for (std::size_t k = K; k-- > 0;) {
    std::vector<double> next(model.node_count(k));
    const auto& zs = zeta.slice(k);
    parallel_for(next.size(), [&](std::size_t i) {
      check_multiplier(zs[i], sdt);
      const double up = std::pow(1.0 + zs[i] * sdt, p);
      const double down = std::pow(1.0 - zs[i] * sdt, p);
      next[i] = 0.5 * (up * acc[model.child(k, i, true)] + down * acc[model.child(k, i, false)]);
    });
    acc.swap(next);
  }
  return acc[0];
}

/// Leaf values xi(path) on the lattice.
inline std::vector<double> terminal_values(const LatticeModel& model, const TerminalCondition& xi) {
  const std::size_t K = model.steps();
  if (xi.path_dependent && model.scheme() != TreeScheme::full) {
    throw DomainError("terminal '" + xi.name + "' is path-dependent and needs the full tree");
  }
  std::vector<double> out(model.node_count(K));
  parallel_for(out.size(), [&](std::size_t i) {
    double wbuf = 0.0;
    out[i] = xi(model.state(K, i, wbuf));
  });
  return out;
}

/// E_Q[X_k | F_j'] for j <= j' <= k, with X given at step k and Q defined by
/// zeta (nullptr: historical measure). Slices below j are left empty.
inline NodeProcess conditional_expectation(const LatticeModel& model,
                                           const std::vector<double>& values_at_k, std::size_t k,
                                           const NodeProcess* zeta, std::size_t j) {
  if (j > k || k > model.steps()) throw DomainError("conditional_expectation: need j <= k <= K");
  if (values_at_k.size() != model.node_count(k)) {
    throw DomainError("conditional_expectation: value count does not match step k");
  }
  const double sdt = model.sqrt_dt();
  NodeProcess out(model, k, 1);
  out.slice(k) = values_at_k;
  for (std::size_t s = k; s-- > j;) {
    if (zeta) {
      for (double v : zeta->slice(s)) check_multiplier(v, sdt);
    }
    const auto& next = out.slice(s + 1);
    auto& cur = out.slice(s);
    parallel_for(model.node_count(s), [&](std::size_t i) {
      const double qu = zeta ? q_up((*zeta)(s, i), sdt) : 0.5;
      cur[i] = qu * next[model.child(s, i, true)] + (1.0 - qu) * next[model.child(s, i, false)];
    });
  }
  for (std::size_t s = 0; s < j; ++s) out.slice(s).clear();
  return out;
}

/// E_Q[h(j, .)] for a node function at step j.
template <typename H>
double q_expectation(const LatticeModel& model, const NodeProcess& zeta, std::size_t j, H&& h) {
  std::vector<double> values(model.node_count(j));
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = h(j, i);
  return conditional_expectation(model, values, j, &zeta, 0)(0, 0);
}

/// Z with Y_{k+1} - Y_k = Z_k (dW_k - zeta_k dt) on both branches. Binary
/// branching makes Z = (Y_up - Y_down) / (2 sqrt(dt)); the martingale
/// property of Y under Q is checked and violations above `tol` (relative)
/// raise ContractError.
inline NodeProcess martingale_representation(const LatticeModel& model, const NodeProcess& y,
                                             const NodeProcess* zeta, double tol = 1e-9) {
  const std::size_t K = model.steps();
  if (y.last_step() < K) throw DomainError("martingale_representation: Y must cover steps 0..K");
  const double sdt = model.sqrt_dt();
  NodeProcess z(model, K - 1, 1);
  double worst = 0.0;
  std::size_t worst_step = 0;
  for (std::size_t k = 0; k < K; ++k) {
    const auto& next = y.slice(k + 1);
    const auto& cur = y.slice(k);
    auto& zs = z.slice(k);
    std::vector<double> viol(model.node_count(k));
    parallel_for(model.node_count(k), [&](std::size_t i) {
      const double yu = next[model.child(k, i, true)];
      const double yd = next[model.child(k, i, false)];
      const double qu = zeta ? q_up((*zeta)(k, i), sdt) : 0.5;
      zs[i] = (yu - yd) / (2.0 * sdt);
      const double mean = qu * yu + (1.0 - qu) * yd;
      viol[i] = std::abs(cur[i] - mean) / std::max({1.0, std::abs(yu), std::abs(yd)});
    });
    for (double v : viol) {
      if (v > worst) {
        worst = v;
        worst_step = k;
      }
    }
  }
  if (worst > tol) {
    throw ContractError("martingale_representation: input is not a Q-martingale (max violation " +
                        std::to_string(worst) + " at step " + std::to_string(worst_step) + ")");
  }
  return z;
}

struct Residuals {
  double residual = 0.0;
  double a_residual = 0.0;
  double max_residual = 0.0;
  double zero_z_fraction = 0.0;  ///< (P x dt)-measure of {|Z| <= z_eps}, divided by T
};

namespace detail {

inline void require_scalar(const GeneratorG& g) {
  if (g.dim() != 1) throw DomainError("lattice engine supports d = 1 only (use montecarlo)");
}

/// g(state, Y_k, Z_k) at every nonterminal node.
inline NodeProcess drift_target(const LatticeModel& model, const GeneratorG& g,
                                const NodeProcess& y, const NodeProcess& z) {
  const std::size_t K = model.steps();
  NodeProcess out(model, K - 1, 1);
  for (std::size_t k = 0; k < K; ++k) {
    auto& os = out.slice(k);
    const auto& ys = y.slice(k);
    const auto& zs = z.slice(k);
    parallel_for(model.node_count(k), [&](std::size_t i) {
      double wbuf = 0.0;
      const State s = model.state(k, i, wbuf);
      os[i] = g(s, ys[i], zs[i]);
    });
  }
  return out;
}

/// Backward pass under zeta: Y from the leaves, Z from the branch spread.
inline void backward_pass(const LatticeModel& model, const std::vector<double>& leaves,
                          const NodeProcess& zeta, NodeProcess& y, NodeProcess& z) {
  const std::size_t K = model.steps();
  const double sdt = model.sqrt_dt();
  y.slice(K) = leaves;
  for (std::size_t k = K; k-- > 0;) {
    const auto& next = y.slice(k + 1);
    auto& cur = y.slice(k);
    auto& zs = z.slice(k);
    const auto& zeta_s = zeta.slice(k);
    parallel_for(model.node_count(k), [&](std::size_t i) {
      const double yu = next[model.child(k, i, true)];
      const double yd = next[model.child(k, i, false)];
      const double qu = q_up(zeta_s[i], sdt);
      cur[i] = qu * yu + (1.0 - qu) * yd;
      zs[i] = (yu - yd) / (2.0 * sdt);
    });
  }
}

}  // namespace detail

/// Residual of the measure-solution identity zeta = g(.,Y,Z) in L2(dP x dt),
/// plain and restricted to {Z != 0}.
inline Residuals evaluate_residuals(const LatticeModel& model, const NodeProcess& zeta,
                                    const NodeProcess& y, const NodeProcess& z,
                                    const GeneratorG& g, double z_eps) {
  detail::require_scalar(g);
  const std::size_t K = model.steps();
  const double dt = model.dt();
  const NodeProcess target = detail::drift_target(model, g, y, z);
  Residuals r;
  const double sq = lattice_expected_sum(model, 0, K - 1, [&](std::size_t k, std::size_t i) {
    const double e = zeta(k, i) - target(k, i);
    return e * e * dt;
  });
  const double asq = lattice_expected_sum(model, 0, K - 1, [&](std::size_t k, std::size_t i) {
    if (std::abs(z(k, i)) <= z_eps) return 0.0;
    const double e = zeta(k, i) - target(k, i);
    return e * e * dt;
  });
  const double zero_mass = lattice_expected_sum(model, 0, K - 1, [&](std::size_t k, std::size_t i) {
    return std::abs(z(k, i)) <= z_eps ? dt : 0.0;
  });
  r.residual = std::sqrt(sq);
  r.a_residual = std::sqrt(asq);
  r.zero_z_fraction = zero_mass / model.grid().horizon();
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t i = 0; i < model.node_count(k); ++i) {
      r.max_residual = std::max(r.max_residual, std::abs(zeta(k, i) - target(k, i)));
    }
  }
  return r;
}

/// Damped fixed-point iteration zeta <- (1-theta) zeta + theta g(.,Y,Z),
/// starting from the historical measure (zeta = 0). Each sweep recomputes
/// Y = E_Q[xi | F] and Z by exact backward induction. Non-convergence is
/// reported, not thrown.
inline MeasureSolutionResult solve_measure_solution(const GeneratorG& g, const TerminalCondition& xi,
                                                    const LatticeModel& model,
                                                    const SolverOptions& opts = {}) {
  detail::require_scalar(g);
  if (!xi.bounded() && !opts.allow_unbounded_terminal) {
    throw DomainError("terminal '" + xi.name + "' is unbounded (test-only)");
  }
  if (g.traits().path_dependent && model.scheme() != TreeScheme::full) {
    throw DomainError("generator '" + g.label() + "' is path-dependent and needs the full tree");
  }
  if (!(opts.clip > 0.0 && opts.clip < 1.0)) throw DomainError("solver: clip must lie in (0, 1)");
  if (!(opts.damping > 0.0 && opts.damping <= 1.0)) throw DomainError("solver: damping must lie in (0, 1]");
  if (opts.max_iter == 0) throw DomainError("solver: max_iter must be positive");

  const std::size_t K = model.steps();
  const double dt = model.dt();
  const double sdt = model.sqrt_dt();
  const double zeta_cap = opts.clip / sdt;
  const std::vector<double> leaves = terminal_values(model, xi);

  MeasureSolutionResult res;
  NodeProcess zeta(model, K - 1, 1, 0.0);
  res.y = NodeProcess(model, K, 1);
  res.z = NodeProcess(model, K - 1, 1);
  double theta = opts.damping;
  double previous = kInf;
  NodeProcess target;
  for (std::size_t iter = 1; iter <= opts.max_iter; ++iter) {
    detail::backward_pass(model, leaves, zeta, res.y, res.z);
    target = detail::drift_target(model, g, res.y, res.z);
    const Residuals r = evaluate_residuals(model, zeta, res.y, res.z, g, opts.z_eps);
    res.residual = r.residual;
    res.a_residual = r.a_residual;
    res.max_residual = r.max_residual;
    res.iterations = iter;
    res.trace.push_back({iter, r.residual, r.a_residual, res.y(0, 0), theta});
    if (r.residual <= opts.tol) {
      res.converged = true;
      break;
    }
    if (iter == opts.max_iter) break;
    if (opts.auto_damping && r.residual > previous) theta = std::max(opts.min_damping, 0.5 * theta);
    previous = r.residual;
    for (std::size_t k = 0; k < K; ++k) {
      auto& zs = zeta.slice(k);
      const auto& ts = target.slice(k);
      for (std::size_t i = 0; i < zs.size(); ++i) {
        zs[i] = std::clamp((1.0 - theta) * zs[i] + theta * ts[i], -zeta_cap, zeta_cap);
      }
    }
  }
  for (std::size_t k = 0; k < K && !res.clip_active; ++k) {
    for (double v : target.slice(k)) {
      if (std::abs(v) > zeta_cap) {
        res.clip_active = true;
        break;
      }
    }
  }
  (void)dt;
  res.density = make_density(model, std::move(zeta));
  return res;
}

/// Largest branch-wise defect of the classical BSDE step
/// Y_k - Y_{k+1} = f(.,Y_k,Z_k) dt - Z_k dW_k with f = z . g.
inline double classical_solution_defect(const LatticeModel& model, const MeasureSolutionResult& res,
                                        const GeneratorG& g) {
  const std::size_t K = model.steps();
  const double dt = model.dt();
  const double sdt = model.sqrt_dt();
  double worst = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t i = 0; i < model.node_count(k); ++i) {
      double wbuf = 0.0;
      const State s = model.state(k, i, wbuf);
      const double yk = res.y(k, i);
      const double zk = res.z(k, i);
      const double f = zk * g(s, yk, zk);
      for (bool up : {true, false}) {
        const double dw = up ? sdt : -sdt;
        const double lhs = yk - res.y(k + 1, model.child(k, i, up));
        worst = std::max(worst, std::abs(lhs - (f * dt - zk * dw)));
      }
    }
  }
  return worst;
}

struct RepresentationReport {
  double identity_defect = 0.0;   ///< max |Z - (eta - V zeta)/(R (1 - zeta^2 dt))|
  double continuous_gap = 0.0;    ///< max |Z - (eta - V zeta)/R|, O(dt)
  double isometry_lhs = 0.0;      ///< E_Q[(sum Z dW^Q)^2]
  double isometry_rhs = 0.0;      ///< E_Q[sum Z^2 (1 - zeta^2 dt) dt]
  double isometry_rhs_continuous = 0.0;  ///< E_Q[sum Z^2 dt]
  double isometry_defect = 0.0;
  std::size_t worst_step = 0;
  std::size_t worst_node = 0;
  bool passed = false;
};

/// Checks Z = (eta - V zeta)/R with V = E[xi R_K | F] and eta the P-integrand
/// of V, together with the isometry for sum Z dW^Q. On the binary tree both
/// identities hold exactly with the one-step factor (1 - zeta^2 dt); the
/// continuous-time forms are reported as gaps.
inline RepresentationReport representation_identity_check(const LatticeModel& model,
                                                          const MeasureSolutionResult& res,
                                                          const TerminalCondition& xi,
                                                          double tol = 1e-9) {
  if (model.scheme() != TreeScheme::full) {
    throw DomainError("representation_identity_check needs the full tree (R_K on leaves)");
  }
  const std::size_t K = model.steps();
  const double dt = model.dt();
  const double sdt = model.sqrt_dt();
  const auto& R = res.density.cumulative;
  const auto& zeta = res.density.zeta;
  const std::vector<double> leaves = terminal_values(model, xi);
  std::vector<double> vK(leaves.size());
  for (std::size_t i = 0; i < leaves.size(); ++i) vK[i] = leaves[i] * R(K, i);
  const NodeProcess V = conditional_expectation(model, vK, K, nullptr, 0);

  RepresentationReport rep;
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t i = 0; i < model.node_count(k); ++i) {
      const double eta =
          (V(k + 1, model.child(k, i, true)) - V(k + 1, model.child(k, i, false))) / (2.0 * sdt);
      const double zt = zeta(k, i);
      const double num = eta - V(k, i) * zt;
      const double exact = num / (R(k, i) * (1.0 - zt * zt * dt));
      const double cont = num / R(k, i);
      const double scale = std::max(1.0, std::abs(res.z(k, i)));
      const double defect = std::abs(res.z(k, i) - exact) / scale;
      if (defect > rep.identity_defect) {
        rep.identity_defect = defect;
        rep.worst_step = k;
        rep.worst_node = i;
      }
      rep.continuous_gap = std::max(rep.continuous_gap, std::abs(res.z(k, i) - cont));
    }
  }
  const double y0 = res.y0();
  rep.isometry_lhs = lattice_expectation(model, [&](std::size_t i) {
    const double e = leaves[i] - y0;
    return R(K, i) * e * e;
  });
  rep.isometry_rhs = lattice_expected_sum(model, 0, K - 1, [&](std::size_t k, std::size_t i) {
    const double zt = zeta(k, i);
    const double zk = res.z(k, i);
    return R(k, i) * zk * zk * (1.0 - zt * zt * dt) * dt;
  });
  rep.isometry_rhs_continuous = lattice_expected_sum(model, 0, K - 1, [&](std::size_t k, std::size_t i) {
    const double zk = res.z(k, i);
    return R(k, i) * zk * zk * dt;
  });
  rep.isometry_defect =
      std::abs(rep.isometry_lhs - rep.isometry_rhs) / std::max(1.0, std::abs(rep.isometry_lhs));
  rep.passed = rep.identity_defect <= tol && rep.isometry_defect <= tol;
  return rep;
}

struct ComparisonViolation {
  std::size_t step = 0;
  std::size_t node = 0;
  double excess = 0.0;  ///< Y_low - Y_high
};

struct ComparisonReport {
  MeasureSolutionResult low;
  MeasureSolutionResult high;
  double max_excess = -kInf;  ///< max over nodes of Y_low - Y_high
  std::vector<ComparisonViolation> violations;
  bool passed = false;
};

/// Solves the problems (hat f_low, xi_low) and (hat f_high, xi_high) and
/// checks Y_low <= Y_high + tol at every node. The ordering preconditions
/// f_low <= f_high (on probes) and xi_low <= xi_high (on leaves) are checked
/// first.
inline ComparisonReport comparison_experiment(const GeneratorF& f_low, const GeneratorF& f_high,
                                              const TerminalCondition& xi_low,
                                              const TerminalCondition& xi_high,
                                              const LatticeModel& model, const SolverOptions& opts = {},
                                              double tol = 1e-10) {
  const double K_y = std::max({1.0, std::isfinite(xi_low.bound) ? xi_low.bound : 1.0,
                               std::isfinite(xi_high.bound) ? xi_high.bound : 1.0});
  const ProbeGrid probes = ProbeGrid::standard(f_low.dim(), K_y);
  for (const auto& p : probes.points) {
    const State s = probes.state_of(p);
    if (f_low(s, p.y, p.z) > f_high(s, p.y, p.z) + 1e-12) {
      throw DomainError("comparison_experiment: f_low > f_high on a probe");
    }
  }
  const auto lo_leaves = terminal_values(model, xi_low);
  const auto hi_leaves = terminal_values(model, xi_high);
  for (std::size_t i = 0; i < lo_leaves.size(); ++i) {
    if (lo_leaves[i] > hi_leaves[i] + 1e-12) {
      throw DomainError("comparison_experiment: xi_low > xi_high on a leaf");
    }
  }
  ComparisonReport rep;
  rep.low = solve_measure_solution(hat_generator(f_low), xi_low, model, opts);
  rep.high = solve_measure_solution(hat_generator(f_high), xi_high, model, opts);
  for (std::size_t k = 0; k <= model.steps(); ++k) {
    for (std::size_t i = 0; i < model.node_count(k); ++i) {
      const double excess = rep.low.y(k, i) - rep.high.y(k, i);
      rep.max_excess = std::max(rep.max_excess, excess);
      if (excess > tol) rep.violations.push_back({k, i, excess});
    }
  }
  rep.passed = rep.low.converged && rep.high.converged && rep.violations.empty();
  return rep;
}

/// Chooses the recombining tree when every ingredient is Markov in (t, W_t).
inline TreeScheme preferred_scheme(const GeneratorG& g, const TerminalCondition& xi) {
  return (g.traits().path_dependent || xi.path_dependent) ? TreeScheme::full
                                                          : TreeScheme::recombining;
}

}  // namespace mbsde::lattice
