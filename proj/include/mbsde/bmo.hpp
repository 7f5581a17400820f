#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mbsde/core.hpp"
#include "mbsde/generators.hpp"
#include "mbsde/lattice.hpp"
#include "mbsde/montecarlo.hpp"
#include "mbsde/paths.hpp"

namespace mbsde::bmo {

// ---------------------------------------------------------------------------
// Norm estimates. ||Z||_BMO = sup_t ||E[int_t^T |Z|^2 ds | F_t]||_inf^{1/2}.

enum class NormMethod { lattice_exact, mc_quantile };

struct NormEstimate {
  double value = 0.0;
  NormMethod method = NormMethod::lattice_exact;
  double quantile = 1.0;  ///< only for mc_quantile
  std::size_t worst_step = 0;

  std::string describe() const {
    if (method == NormMethod::lattice_exact) return "lattice_exact";
    return "mc_quantile(" + std::to_string(quantile) + ")";
  }
};

/// Remaining conditional energy E[sum_{j>=k} |Z_j|^2 dt | F_k] at every node.
inline NodeProcess remaining_energy(const LatticeModel& model, const NodeProcess& z) {
  const std::size_t K = model.steps();
  if (z.last_step() + 1 < K) throw DomainError("bmo_norm: Z must cover steps 0..K-1");
  const double dt = model.dt();
  NodeProcess e(model, K, 1, 0.0);
  for (std::size_t k = K; k-- > 0;) {
    auto& cur = e.slice(k);
    const auto& next = e.slice(k + 1);
    parallel_for(cur.size(), [&](std::size_t i) {
      const auto zi = z.at(k, i);
      double zz = 0.0;
      for (double v : zi) zz += v * v;
      cur[i] = zz * dt + 0.5 * (next[model.child(k, i, true)] + next[model.child(k, i, false)]);
    });
  }
  return e;
}

/// Exact lattice norm: max over nodes of the remaining energy, square-rooted.
inline NormEstimate bmo_norm(const LatticeModel& model, const NodeProcess& z) {
  const auto e = remaining_energy(model, z);
  NormEstimate out;
  double best = 0.0;
  for (std::size_t k = 0; k < model.steps(); ++k) {
    for (double v : e.slice(k)) {
      if (v > best) {
        best = v;
        out.worst_step = k;
      }
    }
  }
  out.value = std::sqrt(best);
  return out;
}

namespace detail {

inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) return kNaN;
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(lo), v.end());
  const double a = v[lo];
  if (hi == lo) return a;
  const double b = *std::min_element(v.begin() + static_cast<std::ptrdiff_t>(lo) + 1, v.end());
  return a + (pos - static_cast<double>(lo)) * (b - a);
}

}  // namespace detail

/// Monte Carlo proxy: remaining energy by backward regression, q-quantile
/// over paths per step, max over steps. A finite sample cannot reach an
/// essential sup, so this is a lower proxy.
inline NormEstimate bmo_norm(const PathEnsemble& ens, const PathProcess& z, const mc::RegressionBasis& basis,
                             double q = 0.999) {
  if (!(q > 0.0 && q <= 1.0)) throw DomainError("bmo_norm: quantile must lie in (0, 1]");
  const std::size_t N = ens.paths(), K = ens.steps();
  if (z.paths() != N || z.steps() < K) throw DomainError("bmo_norm: Z does not match the ensemble");
  const double dt = ens.grid().dt();
  std::vector<double> e(N, 0.0);
  NormEstimate out;
  out.method = NormMethod::mc_quantile;
  out.quantile = q;
  double best = 0.0;
  for (std::size_t k = K; k-- > 0;) {
    std::vector<double> cond(N, 0.0);
    if (k + 1 < K) {
      const mc::StepRegression reg(ens, basis, k);
      cond = reg.fit({&e})[0];
    }
    for (std::size_t p = 0; p < N; ++p) {
      const auto zp = z.at(p, k);
      double zz = 0.0;
      for (double v : zp) zz += v * v;
      e[p] = zz * dt + std::max(0.0, cond[p]);
    }
    const double qk = detail::quantile(e, q);
    if (qk > best) {
      best = qk;
      out.worst_step = k;
    }
  }
  out.value = std::sqrt(best);
  return out;
}

// ---------------------------------------------------------------------------
// Exponential-moment constants.

struct NegativeMoment {
  double r = 0.0;
  double C = 0.0;
};

/// r = 1/4 - sqrt(1/16 + 1/(4K^2)), C = sqrt(2): E[E(M)_T^r] <= C whenever
/// ||Z||_BMO <= K.
inline NegativeMoment negative_moment_bound(double K) {
  if (!(K > 0.0) || !std::isfinite(K)) throw DomainError("negative_moment_bound: K must be positive");
  return {0.25 - std::sqrt(1.0 / 16.0 + 1.0 / (4.0 * K * K)), std::sqrt(2.0)};
}

/// Phi as a function of p - 1, accurate when p is very close to 1.
inline double phi_pm1(double pm1) {
  if (!(pm1 > 0.0)) throw DomainError("phi: p must exceed 1");
  const double p = 1.0 + pm1;
  // ln((2p-1)/(2(p-1))) = ln(1 + 2 pm1) - ln 2 - ln pm1
  const double l = std::log1p(2.0 * pm1) - std::log(2.0) - std::log(pm1);
  return std::sqrt(1.0 + l / (p * p)) - 1.0;
}

inline double phi(double p) { return phi_pm1(p - 1.0); }

/// 2 / (1 - 2(p-1)/(2p-1) exp(p^2 K (2+K))), kInf where the denominator is
/// not positive.
inline double reverse_holder_bound_pm1(double pm1, double K) {
  if (!(pm1 > 0.0)) throw DomainError("reverse_holder_bound: p must exceed 1");
  if (!(K >= 0.0)) throw DomainError("reverse_holder_bound: K must be nonnegative");
  const double p = 1.0 + pm1;
  const double x = std::log(2.0) + std::log(pm1) - std::log1p(2.0 * pm1) + p * p * K * (2.0 + K);
  if (!(x < 0.0)) return kInf;
  return 2.0 / -std::expm1(x);
}

inline double reverse_holder_bound(double p, double K) { return reverse_holder_bound_pm1(p - 1.0, K); }

struct ReverseHolder {
  double p = kNaN;
  double p_minus_one = kNaN;  ///< kept separately: p - 1 can underflow p's precision
  double p_star = kNaN;       ///< root of Phi(p) = K (bound blows up there)
  double p_star_minus_one = kNaN;
  double bound = kInf;
};

/// Exponent p > 1 with K < Phi(p). Phi decreases from +inf at p = 1; the
/// root p* is found by bisection on ln(p - 1) in [ln 1e-300, ln 63] and the
/// midpoint p = 1 + (p* - 1)/2 is returned, where the bound is finite.
inline ReverseHolder reverse_holder_exponent(double K) {
  if (!(K > 0.0) || !std::isfinite(K)) throw DomainError("reverse_holder_exponent: K must be positive");
  double lo = std::log(1e-300), hi = std::log(63.0);
  if (!(phi_pm1(std::exp(lo)) > K)) {
    throw DomainError("reverse_holder_exponent: no admissible p > 1 + 1e-300 for K = " + std::to_string(K));
  }
  ReverseHolder out;
  double star;
  if (phi_pm1(std::exp(hi)) > K) {
    star = std::exp(hi);
  } else {
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      if (phi_pm1(std::exp(mid)) > K) {
        lo = mid;
      } else {
        hi = mid;
      }
    }
    star = std::exp(lo);
  }
  out.p_star_minus_one = star;
  out.p_star = 1.0 + star;
  out.p_minus_one = 0.5 * star;
  out.p = 1.0 + out.p_minus_one;
  out.bound = reverse_holder_bound_pm1(out.p_minus_one, K);
  return out;
}

// ---------------------------------------------------------------------------
// A priori bound on ||Z||_BMO for Y_t = Y_T + int X ds - int Z dW with
// X <= psi^2 + |Z| phi + C |Z|^2 and |Y| <= Y_sup.

struct Apriori {
  double beta = 3.0;
  double K_bound = 0.0;
};

/// beta = 2C + 3. Taking conditional expectations of the exp(beta Y) Ito
/// identity and bounding e^{beta Y} between e^{-beta Y_sup} and e^{beta Y_sup}:
///   K^2 = e^{b}(e^{b} - e^{-b}) / beta + e^{2b} (||psi||^2 + ||phi||^2 / 2),
/// b = beta Y_sup, norms in BMO.
inline Apriori apriori_z_bound(double C, double norm_psi, double norm_phi, double Y_sup) {
  if (!(C >= 0.0 && norm_psi >= 0.0 && norm_phi >= 0.0 && Y_sup >= 0.0)) {
    throw DomainError("apriori_z_bound: inputs must be nonnegative");
  }
  Apriori out;
  out.beta = 2.0 * C + 3.0;
  const double b = out.beta * Y_sup;
  const double k2 = std::exp(b) * (std::exp(b) - std::exp(-b)) / out.beta +
                    std::exp(2.0 * b) * (norm_psi * norm_psi + 0.5 * norm_phi * norm_phi);
  out.K_bound = std::sqrt(k2);
  return out;
}

/// Lattice BMO norm of a random bound phi viewed as a process.
inline double random_bound_norm(const LatticeModel& model, const RandomBound& phi) {
  const std::size_t K = model.steps();
  if (phi.path_dependent && model.scheme() != TreeScheme::full) {
    throw DomainError("random bound '" + phi.kind + "' is path-dependent; use the full tree");
  }
  NodeProcess values(model, K, 1);
  for (std::size_t k = 0; k < K; ++k) {
    auto& sl = values.slice(k);
    parallel_for(sl.size(), [&](std::size_t i) {
      double w;
      sl[i] = phi(model.state(k, i, w));
    });
  }
  return bmo_norm(model, values).value;
}

struct BudgetCheck {
  double norm = 0.0;
  double budget = kInf;
  bool passed = true;
};

inline BudgetCheck random_bound_budget_check(const LatticeModel& model, const RandomBound& phi) {
  BudgetCheck out;
  out.norm = random_bound_norm(model, phi);
  out.budget = phi.budget;
  out.passed = out.norm <= phi.budget * (1.0 + 1e-12);
  return out;
}

/// Inputs (C, psi, phi, Y_sup) for apriori_z_bound read off the growth tag:
/// f = z.g, so |g| <= C(|z| + phi) gives |f| <= C|z|^2 + |z| (C phi), and
/// |g| <= M gives |f| <= |z| M.
struct AprioriInputs {
  double C = 0.0;
  double norm_psi = 0.0;
  double norm_phi = 0.0;
  double Y_sup = 0.0;
};

inline AprioriInputs apriori_inputs(const GeneratorG& g, const LatticeModel& model, double Y_sup) {
  AprioriInputs in;
  in.Y_sup = Y_sup;
  const double sqrtT = std::sqrt(model.grid().horizon());
  if (const auto* lin = std::get_if<Linear>(&g.growth())) {
    in.C = lin->C;
    in.norm_phi = lin->phi ? lin->C * random_bound_norm(model, *lin->phi) : 0.0;
  } else if (const auto* bd = std::get_if<Bounded>(&g.growth())) {
    in.norm_phi = bd->M * sqrtT;
  } else {
    throw DomainError("apriori bound: generator '" + g.label() + "' has no growth tag");
  }
  return in;
}

// ---------------------------------------------------------------------------
// Assembled report.

struct BmoReport {
  NormEstimate norm;
  NegativeMoment negative_moment;
  ReverseHolder reverse_holder;
  Apriori apriori;
  AprioriInputs apriori_inputs;
};

/// Derived exponents at K = max(norm, 1e-12) so they stay finite for Z = 0.
inline BmoReport make_report(const NormEstimate& norm, const AprioriInputs& in) {
  BmoReport r;
  r.norm = norm;
  const double K = std::max(norm.value, 1e-12);
  r.negative_moment = negative_moment_bound(K);
  r.reverse_holder = reverse_holder_exponent(K);
  r.apriori_inputs = in;
  r.apriori = apriori_z_bound(in.C, in.norm_psi, in.norm_phi, in.Y_sup);
  return r;
}

// ---------------------------------------------------------------------------
// Dual L^p characterization on a finite sample space.

struct DualLpRow {
  double n = 0.0;
  double m = 0.0;
  double ratio = 0.0;  ///< E[Y X] / E[X^q]^{1/q}
};

struct DualLpReport {
  double lhs = 0.0;          ///< E[Y^p]^{1/p}
  double witness_sup = 0.0;  ///< max ratio over the grid
  double gap = 0.0;          ///< lhs - witness_sup
  double final_gap = 0.0;    ///< at the largest (n, m)
  bool holder_ok = true;     ///< no ratio exceeds lhs
  std::vector<DualLpRow> rows;
};

/// Witness X_{nm} = (1/m + min(Y, n))^{p-1}.
inline DualLpReport dual_lp_check(const std::vector<double>& values, const std::vector<double>& probs, double p,
                                  std::vector<double> ns = {1, 2, 3, 5, 10, 100, 1e4},
                                  std::vector<double> ms = {1, 10, 100, 1e3, 1e4, 1e6}) {
  if (!(p > 1.0)) throw DomainError("dual_lp_check: p must exceed 1");
  if (values.size() != probs.size() || values.empty()) throw DomainError("dual_lp_check: size mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i] < 0.0) throw DomainError("dual_lp_check: Y must be nonnegative");
    if (probs[i] < 0.0) throw DomainError("dual_lp_check: negative probability");
    total += probs[i];
  }
  if (std::abs(total - 1.0) > 1e-12) throw DomainError("dual_lp_check: probabilities must sum to 1");
  const double q = p / (p - 1.0);
  DualLpReport out;
  double s = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) s += probs[i] * std::pow(values[i], p);
  out.lhs = std::pow(s, 1.0 / p);
  std::sort(ns.begin(), ns.end());
  std::sort(ms.begin(), ms.end());
  for (double n : ns) {
    for (double m : ms) {
      double num = 0.0, den = 0.0;
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double x = std::pow(1.0 / m + std::min(values[i], n), p - 1.0);
        num += probs[i] * values[i] * x;
        den += probs[i] * std::pow(x, q);
      }
      const double ratio = num / std::pow(den, 1.0 / q);
      out.rows.push_back({n, m, ratio});
      out.witness_sup = std::max(out.witness_sup, ratio);
      if (ratio > out.lhs * (1.0 + 1e-12) + 1e-300) out.holder_ok = false;
    }
  }
  out.gap = out.lhs - out.witness_sup;
  out.final_gap = out.lhs - out.rows.back().ratio;
  return out;
}

// ---------------------------------------------------------------------------
// Lower semicontinuity along a sequence.

struct FatouReport {
  double limit_norm = 0.0;
  std::vector<double> norms;
  double tail_min = kInf;  ///< min over the last third of the sequence
  bool passed = false;
};

inline FatouReport fatou_bmo_check(const LatticeModel& model, const std::vector<NodeProcess>& sequence,
                                   const NodeProcess& limit, double tol = 1e-9) {
  if (sequence.empty()) throw DomainError("fatou_bmo_check: empty sequence");
  FatouReport out;
  out.limit_norm = bmo_norm(model, limit).value;
  for (const auto& z : sequence) out.norms.push_back(bmo_norm(model, z).value);
  const std::size_t n = out.norms.size();
  const std::size_t first = n - std::max<std::size_t>(1, (n + 2) / 3);
  for (std::size_t i = first; i < n; ++i) out.tail_min = std::min(out.tail_min, out.norms[i]);
  out.passed = out.limit_norm <= out.tail_min + tol;
  return out;
}

// ---------------------------------------------------------------------------
// Exponential moments of stochastic exponentials on the lattice.

/// E[E(Z.W)_K^power] with E = prod exp(Z dW - Z^2 dt / 2), by node-local
/// backward induction (Z is a node function, d = 1).
inline double exponential_moment(const LatticeModel& model, const NodeProcess& z, double power) {
  const std::size_t K = model.steps();
  const double sdt = model.sqrt_dt(), dt = model.dt();
  std::vector<double> v(model.node_count(K), 1.0);
  for (std::size_t k = K; k-- > 0;) {
    std::vector<double> next(model.node_count(k));
    parallel_for(next.size(), [&](std::size_t i) {
      const double zi = z(k, i);
      const double a = power * zi * sdt;
      const double up = v[model.child(k, i, true)];
      const double dn = v[model.child(k, i, false)];
      next[i] = 0.5 * (std::exp(a) * up + std::exp(-a) * dn) * std::exp(-0.5 * power * zi * zi * dt);
    });
    v.swap(next);
  }
  return v[0];
}

struct ZFamilyMember {
  std::string name;
  std::function<double(double t, double w)> z;
};

/// Ten bounded Markov integrands with finite lattice norms.
inline std::vector<ZFamilyMember> standard_z_family() {
  return {
      {"const_0.5", [](double, double) { return 0.5; }},
      {"const_1", [](double, double) { return 1.0; }},
      {"const_2", [](double, double) { return 2.0; }},
      {"half_tanh", [](double, double w) { return 0.5 * std::tanh(w); }},
      {"sin", [](double, double w) { return std::sin(w); }},
      {"indicator", [](double, double w) { return w > 0.0 ? 1.0 : 0.0; }},
      {"cos_2w", [](double, double w) { return 0.8 * std::cos(2.0 * w); }},
      {"clamped_w", [](double, double w) { return std::clamp(w, -1.0, 1.0); }},
      {"linear_time", [](double t, double) { return 1.5 * t; }},
      {"capped_square", [](double, double w) { return 0.3 * (1.0 + std::min(w * w, 4.0)); }},
  };
}

inline NodeProcess sample_z(const LatticeModel& model, const std::function<double(double, double)>& f) {
  const std::size_t K = model.steps();
  NodeProcess z(model, K > 0 ? K - 1 : 0, 1);
  for (std::size_t k = 0; k < K; ++k) {
    auto& sl = z.slice(k);
    for (std::size_t i = 0; i < sl.size(); ++i) sl[i] = f(model.grid().time(k), model.w(k, i));
  }
  return z;
}

struct MomentCheckRow {
  std::string name;
  double norm = 0.0;
  double r = 0.0;
  double C = 0.0;
  double moment_r = 0.0;  ///< E[E^r]
  double p = 0.0;
  double bound_p = 0.0;
  double moment_p = 0.0;  ///< E[E^p]
  bool passed_r = false;
  bool passed_p = false;
};

/// Each member is checked against the constants at K = its exact norm.
inline std::vector<MomentCheckRow> moment_family_check(const LatticeModel& model,
                                                       const std::vector<ZFamilyMember>& family,
                                                       double slack = 0.0) {
  std::vector<MomentCheckRow> rows;
  for (const auto& m : family) {
    const auto z = sample_z(model, m.z);
    MomentCheckRow row;
    row.name = m.name;
    row.norm = bmo_norm(model, z).value;
    const auto nm = negative_moment_bound(row.norm);
    row.r = nm.r;
    row.C = nm.C;
    row.moment_r = exponential_moment(model, z, nm.r);
    row.passed_r = row.moment_r <= nm.C + slack;
    const auto rh = reverse_holder_exponent(row.norm);
    row.p = rh.p;
    row.bound_p = rh.bound;
    row.moment_p = exponential_moment(model, z, rh.p);
    row.passed_p = row.moment_p <= rh.bound + slack;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace mbsde::bmo
