#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "mbsde/generator_catalog.hpp"
#include "mbsde/lattice.hpp"
#include "mbsde/montecarlo.hpp"

using namespace mbsde;
using namespace mbsde::mc;

namespace {

struct ThreadGuard {
  std::size_t saved = thread_count();
  ~ThreadGuard() { set_thread_count(saved); }
};

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

TEST(EffectiveSampleSize, SmallExamples) {
  const std::vector<double> ones(10, 1.0);
  EXPECT_DOUBLE_EQ(effective_sample_size(ones), 10.0);
  const std::vector<double> spike{1.0, 0.0, 0.0, 0.0};
  EXPECT_DOUBLE_EQ(effective_sample_size(spike), 1.0);
  const std::vector<double> two{1.0, 2.0};
  EXPECT_DOUBLE_EQ(effective_sample_size(two), 9.0 / 5.0);
}

TEST(RegressionBasis, SizesAndCells) {
  EXPECT_EQ(RegressionBasis::polynomial(1, 3).size(), 4u);
  EXPECT_EQ(RegressionBasis::polynomial(2, 3).size(), 10u);
  EXPECT_EQ(RegressionBasis::polynomial(3, 2).size(), 10u);
  const auto pc = RegressionBasis::piecewise_constant(2, 4);
  EXPECT_EQ(pc.size(), 16u);
  const double a[2] = {-10.0, -10.0};
  const double b[2] = {10.0, 10.0};
  const double c[2] = {0.1, -0.1};
  EXPECT_EQ(pc.cell(a), 0u);
  EXPECT_EQ(pc.cell(b), 15u);
  // x0 in bin 2, x1 in bin 1.
  EXPECT_EQ(pc.cell(c), 2u + 4u * 1u);
  EXPECT_EQ(RegressionBasis::default_for(2).family(), RegressionBasis::Family::polynomial);
  EXPECT_EQ(RegressionBasis::default_for(3).family(), RegressionBasis::Family::piecewise_constant);
  EXPECT_THROW(RegressionBasis::piecewise_constant(6, 16), BasisError);
}

TEST(StepRegression, ReproducesSpannedTargets) {
  const auto ens = simulate_paths(TimeGrid(1.0, 4), 1, 20000, 3);
  const auto basis = RegressionBasis::polynomial(1, 3);
  const StepRegression reg(ens, basis, 2);
  std::vector<double> y(ens.paths());
  for (std::size_t p = 0; p < ens.paths(); ++p) {
    const double w = std::clamp(ens.w(p, 2)[0] / std::sqrt(0.5), -3.0, 3.0);
    y[p] = 2.0 - w + 0.5 * w * w * w;
  }
  const auto fit = reg.fit({&y});
  for (std::size_t p = 0; p < ens.paths(); p += 97) EXPECT_NEAR(fit[0][p], y[p], 1e-9);
  EXPECT_NEAR(r_squared(y, fit[0]), 1.0, 1e-12);
  std::vector<double> resid(ens.paths());
  for (std::size_t p = 0; p < ens.paths(); ++p) resid[p] = y[p] - fit[0][p];
  EXPECT_LT(reg.orthogonality(resid), 1e-9);
  EXPECT_GE(reg.condition_number(), 1.0);
}

TEST(StepRegression, StepZeroIsSampleMean) {
  const auto ens = simulate_paths(TimeGrid(1.0, 3), 1, 5000, 9);
  const StepRegression reg(ens, RegressionBasis::polynomial(1, 3), 0);
  std::vector<double> y(ens.paths());
  for (std::size_t p = 0; p < ens.paths(); ++p) y[p] = std::cos(ens.w(p, 3)[0]);
  const auto fit = reg.fit({&y});
  EXPECT_NEAR(fit[0][17], mean(y), 1e-13);
}

TEST(StepRegression, Guards) {
  const auto small = simulate_paths(TimeGrid(1.0, 4), 1, 60, 1);
  EXPECT_THROW(StepRegression(small, RegressionBasis::polynomial(1, 3), 2), BasisError);
  // Under coin-flip increments W_1 takes two values: degree 3 is singular.
  const auto coins = simulate_paths(TimeGrid(1.0, 4), 1, 4000, 1, IncrementLaw::rademacher);
  EXPECT_THROW(StepRegression(coins, RegressionBasis::polynomial(1, 3), 1), BasisError);
  EXPECT_NO_THROW(StepRegression(coins, RegressionBasis::polynomial(1, 1), 1));
}

TEST(WeightedProjection, UnitWeightsGiveMeanAtStepZero) {
  const auto ens = simulate_paths(TimeGrid(1.0, 2), 1, 3000, 4);
  std::vector<double> v(ens.paths()), w(ens.paths(), 1.0), w2(ens.paths());
  for (std::size_t p = 0; p < ens.paths(); ++p) {
    v[p] = ens.w(p, 2)[0];
    w2[p] = 1.0 + 0.5 * std::tanh(v[p]);
  }
  const auto a = weighted_projection(v, w, ens, RegressionBasis::polynomial(1, 2), 0);
  EXPECT_NEAR(a[0], mean(v), 1e-13);
  // Bayes ratio sum(w v) / sum(w).
  const auto b = weighted_projection(v, w2, ens, RegressionBasis::polynomial(1, 2), 0);
  double num = 0.0, den = 0.0;
  for (std::size_t p = 0; p < ens.paths(); ++p) {
    num += w2[p] * v[p];
    den += w2[p];
  }
  EXPECT_NEAR(b[0], num / den, 1e-12);
  w[5] = 0.0;
  EXPECT_THROW(weighted_projection(v, w, ens, RegressionBasis::polynomial(1, 2), 0), InvalidDensityError);
}

TEST(ExtractZ, LinearTargetHasUnitZ) {
  const auto ens = simulate_paths(TimeGrid(1.0, 8), 1, 60000, 21);
  const std::size_t k = 4;
  std::vector<double> y(ens.paths());
  for (std::size_t p = 0; p < ens.paths(); ++p) y[p] = ens.w(p, k + 1)[0];
  const auto z = extract_z(y, nullptr, ens, RegressionBasis::polynomial(1, 2), k);
  double s = 0.0;
  for (std::size_t p = 0; p < ens.paths(); ++p) s += z(p, 0);
  EXPECT_NEAR(s / static_cast<double>(ens.paths()), 1.0, 0.02);
}

TEST(McSolve, ConstantTerminalIsExact) {
  const auto ens = simulate_paths(TimeGrid(1.0, 6), 1, 8000, 5);
  const auto g = make_generator("zero", {}, 1);
  const auto xi = terminal_builtin("constant", {{"c", 0.7}});
  const auto rep = mc_solve(g, xi, ens, RegressionBasis::polynomial(1, 3));
  EXPECT_TRUE(rep.converged);
  for (std::size_t p = 0; p < ens.paths(); p += 101) {
    for (std::size_t k = 0; k <= 6; ++k) EXPECT_NEAR(rep.y(p, k), 0.7, 1e-12);
  }
  EXPECT_NEAR(rep.y0_direct, 0.7, 1e-13);
  EXPECT_NEAR(rep.e_rep, 0.0, 1e-3);
}

TEST(McSolve, SingleStepIsSampleMean) {
  const auto ens = simulate_paths(TimeGrid(1.0, 1), 1, 10000, 8);
  const auto rep = mc_solve(make_generator("zero", {}, 1), terminal_builtin("tanh_WT"), ens,
                            RegressionBasis::polynomial(1, 3));
  double s = 0.0;
  for (std::size_t p = 0; p < ens.paths(); ++p) s += std::tanh(ens.w(p, 1)[0]);
  EXPECT_NEAR(rep.y0, s / 10000.0, 1e-13);
}

TEST(McSolve, ConstantDriftShiftsRawTerminal) {
  const auto ens = simulate_paths(TimeGrid(1.0, 8), 1, 40000, 12);
  McOptions opts;
  opts.allow_unbounded_terminal = true;
  const auto rep = mc_solve(make_generator("constant_b", {{"b", 0.2}}, 1), terminal_builtin("raw_WT"), ens,
                            RegressionBasis::polynomial(1, 3), opts);
  EXPECT_TRUE(rep.converged);
  EXPECT_LT(std::abs(rep.y0_direct - 0.2), 3.0 * rep.y0_ci);
  EXPECT_NEAR(rep.y0, 0.2, 0.03);
  EXPECT_GT(rep.ess, 0.9 * 40000.0);
  EXPECT_THROW(mc_solve(make_generator("zero", {}, 1), terminal_builtin("raw_WT"), ens,
                        RegressionBasis::polynomial(1, 3)),
               DomainError);
}

TEST(McSolve, SecondCoordinateCarriesNoZ) {
  const auto ens = simulate_paths(TimeGrid(1.0, 6), 2, 30000, 2);
  const auto rep = mc_solve(make_generator("zero", {}, 2), terminal_builtin("tanh_WT"), ens,
                            RegressionBasis::default_for(2));
  double z1 = 0.0, z2 = 0.0;
  for (std::size_t p = 0; p < ens.paths(); ++p) {
    z1 += rep.z(p, 3, 0);
    z2 += rep.z(p, 3, 1);
  }
  z1 /= 30000.0;
  z2 /= 30000.0;
  EXPECT_GT(z1, 0.3);
  EXPECT_LT(std::abs(z2), 0.05);
}

TEST(McSolve, AgreesWithLatticeUnderCoinFlips) {
  const std::size_t K = 8;
  const auto g = make_generator("half_z", {{"gamma", 0.5}}, 1);
  const auto xi = terminal_builtin("tanh_WT");
  const auto model = build_lattice(1.0, K, TreeScheme::recombining);
  const auto exact = lattice::solve_measure_solution(g, xi, model);
  ASSERT_TRUE(exact.converged);
  // Under coin flips W_k lives on k + 1 levels; degree 1 keeps every step
  // nonsingular but is not exact, so compare the direct estimator.
  const auto ens = simulate_paths(TimeGrid(1.0, K), 1, 40000, 31, IncrementLaw::rademacher);
  const auto rep = mc_solve(g, xi, ens, RegressionBasis::piecewise_constant(1, 64));
  EXPECT_TRUE(rep.converged);
  EXPECT_NEAR(rep.y0, exact.y0(), 0.02);
  EXPECT_LT(std::abs(rep.y0_direct - exact.y0()), 4.0 * rep.y0_ci + 0.01);
}

TEST(McSolve, ExponentialFormAgrees) {
  const auto ens = simulate_paths(TimeGrid(1.0, 16), 1, 30000, 44);
  const auto g = make_generator("half_z", {{"gamma", 0.5}}, 1);
  const auto xi = terminal_builtin("tanh_WT");
  McOptions opts;
  const auto a = mc_solve(g, xi, ens, RegressionBasis::polynomial(1, 3), opts);
  opts.form = DensityForm::exponential;
  const auto b = mc_solve(g, xi, ens, RegressionBasis::polynomial(1, 3), opts);
  EXPECT_NEAR(a.y0, b.y0, 0.02);
}

TEST(McSolve, DeterministicAcrossThreads) {
  ThreadGuard guard;
  const auto ens = simulate_paths(TimeGrid(1.0, 8), 1, 20000, 6);
  const auto g = make_generator("half_z", {{"gamma", 0.5}}, 1);
  const auto xi = terminal_builtin("sin_WT");
  set_thread_count(1);
  const auto a = mc_solve(g, xi, ens, RegressionBasis::polynomial(1, 3));
  set_thread_count(8);
  const auto b = mc_solve(g, xi, ens, RegressionBasis::polynomial(1, 3));
  EXPECT_EQ(a.y0, b.y0);
  EXPECT_EQ(a.residual, b.residual);
  EXPECT_EQ(a.y0_ci, b.y0_ci);
  EXPECT_EQ(a.iterations, b.iterations);
}

TEST(McSolve, LowEssIsRejected) {
  const auto ens = simulate_paths(TimeGrid(1.0, 8), 1, 5000, 6);
  McOptions opts;
  opts.min_ess_fraction = 0.999;
  EXPECT_THROW(mc_solve(make_generator("constant_b", {{"b", 0.8}}, 1), terminal_builtin("tanh_WT"), ens,
                        RegressionBasis::polynomial(1, 3), opts),
               ImportanceWeightError);
}

TEST(PathDensity, MeanOneAndFloor) {
  const auto ens = simulate_paths(TimeGrid(1.0, 10), 1, 50000, 19);
  PathProcess zeta(ens.paths(), 10, 1, 0.6);
  const auto d = path_density(ens, zeta, DensityForm::product);
  std::vector<double> rk(ens.paths());
  for (std::size_t p = 0; p < ens.paths(); ++p) rk[p] = d.R(p, 10);
  EXPECT_NEAR(mean(rk), 1.0, 5.0 * std::sqrt(std::exp(0.36) - 1.0) / std::sqrt(50000.0));
  PathProcess big(ens.paths(), 10, 1, 5.0);
  EXPECT_GT(path_density(ens, big, DensityForm::product).floored, 0u);
  EXPECT_EQ(path_density(ens, big, DensityForm::exponential).floored, 0u);
}
