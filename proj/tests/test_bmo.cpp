#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "mbsde/bmo.hpp"
#include "mbsde/generator_catalog.hpp"

using namespace mbsde;
using namespace mbsde::bmo;

namespace {

// Frozen from a 50-digit evaluation of the printed formulas.
constexpr double kPhi2 = 0.049459993056925013;
constexpr double kBound2At004 = 26.308784383290179;
constexpr double kP004 = 1.5618954272337;
constexpr double kBoundP004 = 5.6448300152696;
constexpr double kP1 = 1.0113385801785;
constexpr double kBoundP1 = 3.8235167505102;

NodeProcess constant_z(const LatticeModel& m, double c) { return sample_z(m, [c](double, double) { return c; }); }

}  // namespace

TEST(NegativeMoment, FormulaValues) {
  const auto a = negative_moment_bound(1.0);
  EXPECT_NEAR(a.r, (1.0 - std::sqrt(5.0)) / 4.0, 1e-15);
  EXPECT_NEAR(a.C, std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(negative_moment_bound(2.0).r, 0.25 - std::sqrt(0.125), 1e-15);
  EXPECT_NEAR(negative_moment_bound(2.0).r, -0.10355339059327376, 1e-15);
  EXPECT_LT(negative_moment_bound(1e-6).r, -1e5);
  EXPECT_THROW(negative_moment_bound(0.0), DomainError);
  EXPECT_THROW(negative_moment_bound(-1.0), DomainError);
}

TEST(NegativeMoment, IncreasingInK) {
  double prev = -kInf;
  for (double K = 0.05; K < 20.0; K *= 1.3) {
    const double r = negative_moment_bound(K).r;
    EXPECT_LT(r, 0.0);
    EXPECT_GT(r, prev);
    prev = r;
  }
}

TEST(ReverseHolder, PhiAndBoundValues) {
  EXPECT_NEAR(phi(2.0), kPhi2, 1e-15);
  EXPECT_NEAR(phi(2.0), std::sqrt(1.0 + std::log(1.5) / 4.0) - 1.0, 1e-15);
  EXPECT_NEAR(reverse_holder_bound(2.0, 0.04), kBound2At004, 1e-11);
  EXPECT_NEAR(reverse_holder_bound(2.0, 0.04), 2.0 / (1.0 - (2.0 / 3.0) * std::exp(4.0 * 0.04 * 2.04)), 1e-11);
  // p = 2 is admissible at K = 0.04 and the bound there is finite.
  EXPECT_GT(phi(2.0), 0.04);
  EXPECT_TRUE(std::isfinite(reverse_holder_bound(2.0, 0.04)));
  EXPECT_EQ(reverse_holder_bound(2.0, 1.0), kInf);
  EXPECT_THROW(phi(1.0), DomainError);
}

TEST(ReverseHolder, ExponentValues) {
  const auto a = reverse_holder_exponent(0.04);
  EXPECT_NEAR(a.p, kP004, 1e-11);
  EXPECT_NEAR(a.bound, kBoundP004, 1e-9);
  EXPECT_NEAR(phi_pm1(a.p_star_minus_one), 0.04, 1e-12);
  const auto b = reverse_holder_exponent(1.0);
  EXPECT_NEAR(b.p, kP1, 1e-11);
  EXPECT_NEAR(b.bound, kBoundP1, 1e-9);
  const auto c = reverse_holder_exponent(10.0);
  EXPECT_GT(c.p_minus_one, 0.0);
  EXPECT_LT(c.p_minus_one, 1e-30);
  EXPECT_TRUE(std::isfinite(c.bound));
  EXPECT_GT(c.bound, 0.0);
  EXPECT_THROW(reverse_holder_exponent(0.0), DomainError);
}

TEST(ReverseHolder, MonotoneInK) {
  double prev = kInf;
  for (double K = 0.01; K < 15.0; K *= 1.25) {
    const auto rh = reverse_holder_exponent(K);
    EXPECT_LE(rh.p_minus_one, prev);
    EXPECT_GT(phi_pm1(rh.p_minus_one), K);
    EXPECT_TRUE(std::isfinite(rh.bound));
    prev = rh.p_minus_one;
  }
}

TEST(Apriori, BetaAndConstant) {
  EXPECT_DOUBLE_EQ(apriori_z_bound(0.0, 0.0, 0.0, 1.0).beta, 3.0);
  EXPECT_DOUBLE_EQ(apriori_z_bound(1.0, 0.0, 0.0, 1.0).beta, 5.0);
  const auto zero = apriori_z_bound(0.0, 0.0, 0.0, 0.0);
  EXPECT_TRUE(std::isfinite(zero.K_bound));
  EXPECT_GE(zero.K_bound, 0.0);
  // Hand assembly at C = 0.5, psi = 0.2, phi = 0.3, Y_sup = 0.5: beta = 4, b = 2.
  const double b = 2.0;
  const double k2 = std::exp(b) * (std::exp(b) - std::exp(-b)) / 4.0 + std::exp(2 * b) * (0.04 + 0.045);
  EXPECT_NEAR(apriori_z_bound(0.5, 0.2, 0.3, 0.5).K_bound, std::sqrt(k2), 1e-12);
  EXPECT_THROW(apriori_z_bound(-1.0, 0.0, 0.0, 0.0), DomainError);
}

TEST(BmoNorm, ConstantsAndZero) {
  const auto m = build_lattice(1.0, 10, TreeScheme::recombining);
  EXPECT_NEAR(bmo_norm(m, constant_z(m, 1.0)).value, 1.0, 1e-14);
  EXPECT_EQ(bmo_norm(m, constant_z(m, 0.0)).value, 0.0);
  const auto m2 = build_lattice(4.0, 10, TreeScheme::recombining);
  EXPECT_NEAR(bmo_norm(m2, constant_z(m2, 0.5)).value, 1.0, 1e-14);
}

TEST(BmoNorm, LinearInWExact) {
  // Z_k = 2 W_k on 8 steps; the energy is largest at the extreme node
  // W_k = k sqrt(dt): 4 dt^2 [(8-k) k^2 + (8-k)(7-k)/2].
  double expected = 0.0;
  for (int k = 0; k < 8; ++k) {
    const double e = 4.0 / 64.0 * ((8 - k) * k * k + (8 - k) * (7 - k) / 2.0);
    expected = std::max(expected, e);
  }
  expected = std::sqrt(expected);
  for (auto scheme : {TreeScheme::full, TreeScheme::recombining}) {
    const auto m = build_lattice(1.0, 8, scheme);
    const auto z = sample_z(m, [](double, double w) { return 2.0 * w; });
    const auto est = bmo_norm(m, z);
    EXPECT_NEAR(est.value, expected, 1e-13);
    EXPECT_EQ(est.worst_step, 5u);
    EXPECT_EQ(est.method, NormMethod::lattice_exact);
  }
}

TEST(BmoNorm, MonteCarloProxyMatchesLattice) {
  const auto m = build_lattice(1.0, 8, TreeScheme::recombining);
  const double exact = bmo_norm(m, sample_z(m, [](double, double w) { return 2.0 * w; })).value;
  // Coin-flip increments share the lattice's law; 64 cells separate every level.
  const auto ens = simulate_paths(TimeGrid(1.0, 8), 1, 100000, 3, IncrementLaw::rademacher);
  PathProcess z(ens.paths(), 8, 1);
  for (std::size_t p = 0; p < ens.paths(); ++p) {
    for (std::size_t k = 0; k < 8; ++k) z(p, k) = 2.0 * ens.w(p, k)[0];
  }
  const auto est = bmo_norm(ens, z, mc::RegressionBasis::piecewise_constant(1, 64));
  EXPECT_EQ(est.method, NormMethod::mc_quantile);
  EXPECT_NEAR(est.value, exact, 0.05 * exact);
  EXPECT_LE(est.value, exact * 1.05);
  PathProcess ones(ens.paths(), 8, 1, 1.0);
  EXPECT_NEAR(bmo_norm(ens, ones, mc::RegressionBasis::piecewise_constant(1, 64)).value, 1.0, 1e-12);
}

TEST(DualLp, TwoPointExample) {
  const auto r = dual_lp_check({1.0, 3.0}, {0.5, 0.5}, 2.0);
  EXPECT_NEAR(r.lhs, std::sqrt(5.0), 1e-14);
  EXPECT_TRUE(r.holder_ok);
  EXPECT_GE(r.gap, -1e-12);
  EXPECT_LT(r.final_gap, 1e-3);
  for (const auto& row : r.rows) {
    if (row.n >= 3 && row.m >= 1e3) {
      EXPECT_NEAR(row.ratio, std::sqrt(5.0), 1e-3);
    }
  }
  // Gap shrinks along the grid.
  EXPECT_LT(r.final_gap, r.lhs - r.rows.front().ratio);
}

TEST(DualLp, DegenerateCases) {
  const auto z = dual_lp_check({0.0, 0.0}, {0.3, 0.7}, 3.0);
  EXPECT_EQ(z.lhs, 0.0);
  EXPECT_EQ(z.witness_sup, 0.0);
  const auto c = dual_lp_check({2.5, 2.5, 2.5}, {0.2, 0.3, 0.5}, 1.5);
  EXPECT_NEAR(c.lhs, 2.5, 1e-14);
  EXPECT_NEAR(c.witness_sup, 2.5, 1e-14);
  EXPECT_THROW(dual_lp_check({1.0}, {1.0}, 1.0), DomainError);
  EXPECT_THROW(dual_lp_check({-1.0}, {1.0}, 2.0), DomainError);
}

TEST(DualLp, HolderHoldsOnRandomLaws) {
  std::mt19937_64 gen(5);
  std::uniform_real_distribution<double> u(0.0, 4.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> y(6), pr(6);
    double s = 0.0;
    for (int i = 0; i < 6; ++i) {
      y[i] = u(gen);
      pr[i] = 0.1 + u(gen);
      s += pr[i];
    }
    for (auto& x : pr) x /= s;
    double t = 0.0;
    for (double x : pr) t += x;
    pr.back() += 1.0 - t;
    const auto r = dual_lp_check(y, pr, 1.0 + u(gen));
    EXPECT_TRUE(r.holder_ok);
    EXPECT_LT(r.final_gap, 1e-3 * std::max(1.0, r.lhs));
  }
}

TEST(Fatou, ConstantSequence) {
  const auto m = build_lattice(1.0, 4);
  const auto z = sample_z(m, [](double, double w) { return std::sin(w) + 0.5; });
  const auto rep = fatou_bmo_check(m, {z, z, z}, z);
  EXPECT_TRUE(rep.passed);
  EXPECT_DOUBLE_EQ(rep.tail_min, rep.limit_norm);
}

TEST(Fatou, AlternatingPerturbation) {
  const auto m = build_lattice(1.0, 4);
  const auto z = constant_z(m, 1.0);
  std::vector<NodeProcess> seq;
  for (int n = 1; n <= 12; ++n) {
    seq.push_back(sample_z(m, [n](double t, double) {
      const int k = static_cast<int>(std::lround(t * 4.0));
      return 1.0 + (k % 2 == 0 ? 1.0 : -1.0) / n;
    }));
  }
  const auto rep = fatou_bmo_check(m, seq, z);
  EXPECT_TRUE(rep.passed);
  // Energy of 1 + s/n with alternating s over 4 steps: 1 + 1/n^2.
  EXPECT_NEAR(rep.norms[3], std::sqrt(1.0 + 1.0 / 16.0), 1e-14);
}

TEST(Fatou, TruncationIncreasesToLimit) {
  const auto m = build_lattice(1.0, 6);
  const auto z = sample_z(m, [](double, double w) { return 2.0 * w; });
  std::vector<NodeProcess> seq;
  // max |2W| on 6 steps is 2 sqrt(6) < 8, so the last third equals the limit.
  for (double n : {0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0}) {
    seq.push_back(sample_z(m, [n](double, double w) { return std::clamp(2.0 * w, -n, n); }));
  }
  const auto rep = fatou_bmo_check(m, seq, z);
  EXPECT_TRUE(rep.passed);
  for (std::size_t i = 1; i < rep.norms.size(); ++i) EXPECT_GE(rep.norms[i], rep.norms[i - 1]);
  EXPECT_NEAR(rep.norms.back(), rep.limit_norm, 1e-14);
}

TEST(RandomBound, BudgetCheck) {
  const auto m = build_lattice(1.0, 32, TreeScheme::recombining);
  EXPECT_TRUE(random_bound_budget_check(m, *make_random_bound("abs_tanh", 0.5, 0.5)).passed);
  EXPECT_TRUE(random_bound_budget_check(m, *make_random_bound("indicator", 0.5, 0.5)).passed);
  EXPECT_FALSE(random_bound_budget_check(m, *make_random_bound("constant", 1.0, 0.5)).passed);
  EXPECT_NEAR(random_bound_norm(m, *make_random_bound("constant", 0.3, 1.0)), 0.3, 1e-14);
  EXPECT_THROW(random_bound_norm(m, *make_random_bound("running_max", 0.5, 0.5)), DomainError);
  const auto full = build_lattice(1.0, 10);
  EXPECT_TRUE(random_bound_budget_check(full, *make_random_bound("running_max", 0.5, 0.5)).passed);
}

TEST(ExponentialMoment, ConstantClosedForm) {
  const auto m = build_lattice(1.0, 16, TreeScheme::recombining);
  const double c = 0.7, r = -0.4;
  const double dt = 1.0 / 16.0;
  const double one = std::cosh(r * c * std::sqrt(dt)) * std::exp(-0.5 * r * c * c * dt);
  EXPECT_NEAR(exponential_moment(m, constant_z(m, c), r), std::pow(one, 16), 1e-13);
  EXPECT_NEAR(exponential_moment(m, constant_z(m, 0.0), 3.0), 1.0, 1e-15);
}

TEST(ExponentialMoment, DiscretizationSlackShrinks) {
  // Continuous value for constant c: exp(r (r - 1) c^2 T / 2).
  const double c = 1.0, r = negative_moment_bound(1.0).r;
  const double cont = std::exp(r * (r - 1.0) * c * c / 2.0);
  double prev = kInf;
  for (std::size_t K : {16u, 32u, 64u, 128u}) {
    const auto m = build_lattice(1.0, K, TreeScheme::recombining);
    const double err = std::abs(exponential_moment(m, constant_z(m, c), r) - cont);
    EXPECT_LT(err, prev);
    prev = err;
  }
}

TEST(MomentFamily, NegativeAndReverseHolderBoundsHold) {
  const auto m = build_lattice(1.0, 64, TreeScheme::recombining);
  const auto rows = moment_family_check(m, standard_z_family());
  ASSERT_EQ(rows.size(), 10u);
  for (const auto& row : rows) {
    EXPECT_TRUE(row.passed_r) << row.name << " " << row.moment_r << " > " << row.C;
    EXPECT_TRUE(row.passed_p) << row.name << " " << row.moment_p << " > " << row.bound_p;
    EXPECT_GT(row.p, 1.0);
  }
}

TEST(Apriori, InputsFromGrowthTags) {
  const auto m = build_lattice(1.0, 32, TreeScheme::recombining);
  const auto half = apriori_inputs(make_generator("half_z", {{"gamma", 0.5}}, 1), m, 1.0);
  EXPECT_DOUBLE_EQ(half.C, 0.5);
  EXPECT_DOUBLE_EQ(half.norm_phi, 0.0);
  const auto shift = apriori_inputs(make_generator("constant_b", {{"b", 0.2}}, 1), m, 1.0);
  EXPECT_DOUBLE_EQ(shift.C, 0.0);
  EXPECT_NEAR(shift.norm_phi, 0.2, 1e-15);
  const auto rb = apriori_inputs(
      make_generator("random_bound_linear", {{"a", 0.5}}, 1, make_random_bound("constant", 0.4, 0.5)), m, 1.0);
  EXPECT_DOUBLE_EQ(rb.C, 1.0);
  EXPECT_NEAR(rb.norm_phi, 0.4, 1e-14);
}

TEST(Apriori, ConvergedSolutionRespectsBound) {
  const auto m = build_lattice(1.0, 64, TreeScheme::recombining);
  const auto g = make_generator("half_z", {{"gamma", 0.5}}, 1);
  const auto xi = terminal_builtin("tanh_WT");
  const auto res = lattice::solve_measure_solution(g, xi, m);
  ASSERT_TRUE(res.converged);
  const auto in = apriori_inputs(g, m, xi.bound);
  const auto rep = make_report(bmo_norm(m, res.z), in);
  EXPECT_LE(rep.norm.value, rep.apriori.K_bound);
  EXPECT_DOUBLE_EQ(rep.apriori.beta, 4.0);
  EXPECT_LT(rep.negative_moment.r, 0.0);
  EXPECT_GT(rep.reverse_holder.p, 1.0);
}
