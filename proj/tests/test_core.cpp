#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "mbsde/core.hpp"
#include "mbsde/parallel.hpp"
#include "mbsde/paths.hpp"
#include "mbsde/quadrature.hpp"
#include "mbsde/terminal.hpp"

using namespace mbsde;

namespace {

// Brute-force path enumeration: bit j of `path` is the move at step j.
double enumerate_w(std::size_t path, std::size_t k, double sdt) {
  double w = 0.0;
  for (std::size_t j = 0; j < k; ++j) w += ((path >> j) & 1u) ? sdt : -sdt;
  return w;
}

struct ThreadGuard {
  std::size_t saved = thread_count();
  ~ThreadGuard() { set_thread_count(saved); }
};

}  // namespace

TEST(TimeGrid, RejectsBadInput) {
  EXPECT_THROW(TimeGrid(0.0, 4), DomainError);
  EXPECT_THROW(TimeGrid(-1.0, 4), DomainError);
  EXPECT_THROW(TimeGrid(1.0, 0), DomainError);
  TimeGrid g(2.0, 8);
  EXPECT_DOUBLE_EQ(g.dt(), 0.25);
  EXPECT_DOUBLE_EQ(g.sqrt_dt(), 0.5);
  EXPECT_DOUBLE_EQ(g.time(8), 2.0);
}

TEST(LatticeModel, FullTreeCap) {
  EXPECT_NO_THROW(build_lattice(1.0, 22));
  EXPECT_THROW(build_lattice(1.0, 23), ResourceError);
  EXPECT_NO_THROW(build_lattice(1.0, 256, TreeScheme::recombining));
}

TEST(LatticeModel, NodeCountsAndLevels) {
  const auto full = build_lattice(1.0, 4);
  const auto rec = build_lattice(1.0, 4, TreeScheme::recombining);
  EXPECT_EQ(full.node_count(3), 8u);
  EXPECT_EQ(rec.node_count(3), 4u);
  const double sdt = full.sqrt_dt();
  for (std::size_t i = 0; i < 16; ++i) {
    // Full-tree node i at step 4: children are 2i + up, so the last move is bit 0.
    double w = 0.0;
    for (std::size_t j = 0; j < 4; ++j) w += ((i >> j) & 1u) ? sdt : -sdt;
    EXPECT_NEAR(full.w(4, i), w, 1e-15);
  }
  for (std::size_t i = 0; i <= 4; ++i) {
    EXPECT_NEAR(rec.w(4, i), (2.0 * static_cast<double>(i) - 4.0) * sdt, 1e-15);
  }
}

TEST(LatticeModel, ProbabilitiesSumToOne) {
  for (auto scheme : {TreeScheme::full, TreeScheme::recombining}) {
    const auto m = build_lattice(1.0, 10, scheme);
    for (std::size_t k = 0; k <= 10; ++k) {
      double total = 0.0;
      for (std::size_t i = 0; i < m.node_count(k); ++i) total += m.probability(k, i);
      EXPECT_NEAR(total, 1.0, 1e-13);
    }
  }
}

TEST(LatticeModel, RunningMaxMatchesWalk) {
  const auto m = build_lattice(1.0, 6);
  const double sdt = m.sqrt_dt();
  for (std::size_t i = 0; i < m.node_count(6); ++i) {
    // Rebuild the walk from the node index: the first move is the most
    // significant bit.
    double w = 0.0, mx = 0.0;
    for (std::size_t j = 6; j-- > 0;) {
      w += ((i >> j) & 1u) ? sdt : -sdt;
      mx = std::max(mx, w);
    }
    EXPECT_NEAR(m.running_max(6, i), mx, 1e-15);
    EXPECT_NEAR(m.w(6, i), w, 1e-15);
  }
  EXPECT_TRUE(std::isnan(build_lattice(1.0, 6, TreeScheme::recombining).running_max(3, 1)));
}

TEST(LatticeModel, ExpectedSumMatchesEnumeration) {
  const std::size_t K = 8;
  const auto m = build_lattice(1.0, K, TreeScheme::recombining);
  const double sdt = m.sqrt_dt();
  auto term = [&](std::size_t k, std::size_t i) { return std::cos(m.w(k, i)) + 0.1 * k; };
  const double engine = lattice_expected_sum(m, 2, 6, term);
  double brute = 0.0;
  for (std::size_t path = 0; path < (1u << K); ++path) {
    for (std::size_t k = 2; k <= 6; ++k) brute += std::cos(enumerate_w(path, k, sdt)) + 0.1 * k;
  }
  brute /= static_cast<double>(1u << K);
  EXPECT_NEAR(engine, brute, 1e-12);
}

TEST(LatticeModel, ExpectationOfSquareIsTime) {
  const auto m = build_lattice(2.0, 12, TreeScheme::recombining);
  const double e = lattice_expectation(m, [&](std::size_t i) { return m.w(12, i) * m.w(12, i); });
  EXPECT_NEAR(e, 2.0, 1e-12);
}

TEST(NodeProcess, LayoutAndAccess) {
  const auto m = build_lattice(1.0, 3);
  NodeProcess p(m, 3, 2, 1.5);
  EXPECT_EQ(p.slice(3).size(), 16u);
  p(2, 1, 1) = 4.0;
  EXPECT_EQ(p.at(2, 1)[1], 4.0);
  EXPECT_EQ(p.at(2, 1)[0], 1.5);
  EXPECT_EQ(p.last_step(), 3u);
}

TEST(Parallel, DeterministicSumIndependentOfThreads) {
  ThreadGuard guard;
  const std::size_t n = 100000;
  auto term = [](std::size_t i) { return std::sin(static_cast<double>(i)) * 1e-3; };
  set_thread_count(1);
  const double a = deterministic_sum(n, term);
  set_thread_count(8);
  const double b = deterministic_sum(n, term);
  EXPECT_EQ(a, b);
}

TEST(Parallel, ExceptionsPropagate) {
  ThreadGuard guard;
  set_thread_count(4);
  EXPECT_THROW(parallel_for(50000, [](std::size_t i) {
                 if (i == 30000) throw DomainError("boom");
               }),
               DomainError);
}

TEST(PathEnsemble, DeterministicAcrossThreads) {
  ThreadGuard guard;
  const TimeGrid g(1.0, 16);
  set_thread_count(1);
  const auto a = simulate_paths(g, 2, 9000, 7);
  set_thread_count(8);
  const auto b = simulate_paths(g, 2, 9000, 7);
  EXPECT_EQ(a.increments(), b.increments());
  const auto c = simulate_paths(g, 2, 9000, 8);
  EXPECT_NE(a.increments(), c.increments());
}

TEST(PathEnsemble, LevelsAndRunningMax) {
  const TimeGrid g(1.0, 10);
  const auto e = simulate_paths(g, 1, 50, 3);
  for (std::size_t p = 0; p < 50; ++p) {
    double w = 0.0, mx = 0.0;
    for (std::size_t k = 0; k < 10; ++k) {
      w += e.dw(p, k)[0];
      mx = std::max(mx, w);
      EXPECT_NEAR(e.w(p, k + 1)[0], w, 1e-14);
      EXPECT_NEAR(e.running_max(p, k + 1), mx, 1e-14);
    }
  }
}

TEST(PathEnsemble, IncrementLaws) {
  const TimeGrid g(1.0, 4);
  const auto rad = simulate_paths(g, 1, 2000, 11, IncrementLaw::rademacher);
  for (double x : rad.increments()) EXPECT_NEAR(std::abs(x), 0.5, 1e-15);
  const auto gauss = simulate_paths(TimeGrid(1.0, 1), 1, 200000, 5);
  double m2 = 0.0;
  for (double x : gauss.increments()) m2 += x * x;
  m2 /= 200000.0;
  EXPECT_NEAR(m2, 1.0, 0.01);
}

TEST(PathEnsemble, Guards) {
  EXPECT_THROW(simulate_paths(TimeGrid(1.0, 4), 1, 0, 1), DomainError);
  EXPECT_THROW(simulate_paths(TimeGrid(1.0, 1000), 10, 100000, 1), ResourceError);
}

TEST(Terminal, Builtins) {
  double w = 0.7;
  const State s{1.0, 4, std::span<const double>(&w, 1)};
  EXPECT_DOUBLE_EQ(terminal_builtin("tanh_WT", {{"a", 2.0}})(s), 2.0 * std::tanh(0.7));
  EXPECT_DOUBLE_EQ(terminal_builtin("sin_WT")(s), std::sin(0.7));
  EXPECT_DOUBLE_EQ(terminal_builtin("indicator_above", {{"level", 0.5}})(s), 1.0);
  EXPECT_DOUBLE_EQ(terminal_builtin("clipped_WT", {{"L", 0.5}})(s), 0.5);
  EXPECT_DOUBLE_EQ(terminal_builtin("constant", {{"c", 3.0}})(s), 3.0);
  EXPECT_FALSE(terminal_builtin("raw_WT").bounded());
  EXPECT_TRUE(terminal_builtin("raw_WT").test_only);
  EXPECT_THROW(terminal_builtin("nope"), DomainError);
  EXPECT_THROW(terminal_builtin("tanh_WT", {{"b", 1.0}}), DomainError);
  const auto sh = shifted(terminal_builtin("tanh_WT"), 0.1);
  EXPECT_DOUBLE_EQ(sh(s), std::tanh(0.7) + 0.1);
  EXPECT_DOUBLE_EQ(sh.bound, 1.1);
}

TEST(GaussHermite, MomentsExact) {
  const auto rule = gauss_hermite(21);
  double df = 1.0;  // (2j-1)!!
  for (int j = 0; j <= 20; ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < rule.nodes.size(); ++i) m += rule.weights[i] * std::pow(rule.nodes[i], 2 * j);
    EXPECT_NEAR(m / df, 1.0, 1e-10) << "moment " << 2 * j;
    df *= 2.0 * j + 1.0;
  }
  double odd = 0.0;
  for (std::size_t i = 0; i < rule.nodes.size(); ++i) odd += rule.weights[i] * std::pow(rule.nodes[i], 7);
  EXPECT_NEAR(odd, 0.0, 1e-10);
  EXPECT_THROW(gauss_hermite(0), DomainError);
}
