#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mbsde/cli/commands.hpp"

namespace fs = std::filesystem;
using mbsde::cli::json;

namespace {

struct Sandbox {
  fs::path dir;
  explicit Sandbox(const std::string& name) : dir(fs::temp_directory_path() / ("mbsde_cli_" + name)) {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Sandbox() { fs::remove_all(dir); }

  std::string write(const std::string& file, const std::string& text) const {
    std::ofstream(dir / file) << text;
    return (dir / file).string();
  }
};

struct Run {
  int code = -1;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  Run r;
  r.code = mbsde::cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(read_text(p));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string c;
    while (std::getline(ls, c, ',')) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

json without_clock(json j) {
  j.erase("wall_clock_s");
  j["engine"].erase("threads");
  return j;
}

}  // namespace

TEST(Cli, ZeroGeneratorConvergesInOneIteration) {
  Sandbox sb("zero");
  const auto cfg = sb.write("c.json", R"({"generator": {"name": "zero"}, "model": {"steps": 16}})");
  const auto r = run({"solve", cfg, "--out", (sb.dir / "o").string()});
  EXPECT_EQ(r.code, 0) << r.err;
  const auto rep = read_json(sb.dir / "o" / "report.json");
  EXPECT_EQ(rep["result"]["iterations"], 1);
  EXPECT_TRUE(rep["result"]["converged"].get<bool>());
  const auto trace = read_csv(sb.dir / "o" / "trace.csv");
  ASSERT_EQ(trace.size(), 2u);
  EXPECT_EQ(trace[0], (std::vector<std::string>{"iter", "residual", "a_residual", "Y0", "damping"}));
}

TEST(Cli, ForcedNonConvergenceExitsTwo) {
  Sandbox sb("maxiter");
  const auto cfg = sb.write("c.json", R"({"generator": {"name": "half_z"}, "solver": {"max_iter": 1}})");
  const auto r = run({"solve", cfg, "--out", (sb.dir / "o").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_FALSE(r.err.empty());
  EXPECT_EQ(read_csv(sb.dir / "o" / "trace.csv").size(), 2u);
  EXPECT_FALSE(read_json(sb.dir / "o" / "report.json")["result"]["converged"].get<bool>());
}

TEST(Cli, ConfigErrorsExitOne) {
  Sandbox sb("bad");
  const std::string out = (sb.dir / "o").string();
  EXPECT_EQ(run({"solve", sb.write("a.json", R"({"model": {"steps": 4,})"), "--out", out}).code, 1);
  EXPECT_EQ(run({"solve", sb.write("b.json", R"({"model": {"stepz": 4}})"), "--out", out}).code, 1);
  EXPECT_EQ(run({"solve", sb.write("c.json", R"({"extra": 1})"), "--out", out}).code, 1);
  EXPECT_EQ(run({"solve", sb.write("d.json", R"({"model": {"steps": -3}})"), "--out", out}).code, 1);
  EXPECT_EQ(run({"solve", sb.write("e.json", R"({"model": {"engine": "quantum"}})"), "--out", out}).code, 1);
  EXPECT_EQ(run({"solve", sb.write("f.json", R"({"generator": {"name": "nope"}})"), "--out", out}).code, 1);
  EXPECT_EQ(run({"solve", sb.write("g.json", R"({"terminal": {"name": "raw_WT"}})"), "--out", out}).code, 1);
  EXPECT_EQ(run({"oracle", sb.write("h.json", R"({})"), "--out", out}).code, 1);
  EXPECT_EQ(run({"oracle", sb.write("i.json", R"({"bmo": {"K": 1}})"), "--out", out}).code, 1);
  EXPECT_EQ(run({"solve", (sb.dir / "missing.json").string()}).code, 1);
  EXPECT_EQ(run({"solve"}).code, 1);
  EXPECT_EQ(run({"launch", "x.json"}).code, 1);
  const auto r = run({"solve", sb.write("j.json", R"({"solver": {"tol": "small"}})"), "--out", out});
  EXPECT_NE(r.err.find("solver.tol"), std::string::npos);
}

TEST(Cli, DefaultsAreEchoed) {
  Sandbox sb("echo");
  const auto lat = sb.write("l.json", R"({"model": {"steps": 8}})");
  ASSERT_EQ(run({"solve", lat, "--out", (sb.dir / "l").string()}).code, 0);
  const auto cfg = read_json(sb.dir / "l" / "report.json")["config"];
  EXPECT_EQ(cfg["solver"]["tol"].get<double>(), 1e-9);
  EXPECT_EQ(cfg["solver"]["max_iter"], 200);
  EXPECT_EQ(cfg["solver"]["clip"].get<double>(), 0.95);
  EXPECT_EQ(cfg["solver"]["z_eps"].get<double>(), 1e-12);
  EXPECT_EQ(cfg["terminal"]["name"], "tanh_WT");
  EXPECT_EQ(cfg["generator"]["name"], "zero");

  const auto mc = sb.write("m.json", R"({"model": {"engine": "montecarlo", "steps": 4, "paths": 2000}})");
  ASSERT_EQ(run({"solve", mc, "--out", (sb.dir / "m").string()}).code, 0);
  const auto rep = read_json(sb.dir / "m" / "report.json");
  EXPECT_EQ(rep["config"]["solver"]["tol"].get<double>(), 1e-4);
  EXPECT_TRUE(rep["result"].contains("ess"));
}

TEST(Cli, EchoedConfigReproducesLatticeRun) {
  Sandbox sb("closure");
  const auto cfg = sb.write("c.json", R"({"generator": {"name": "half_z"}, "model": {"steps": 32}})");
  ASSERT_EQ(run({"solve", cfg, "--out", (sb.dir / "a").string(), "--threads", "1"}).code, 0);
  // Feed the report itself back, under a different thread count.
  ASSERT_EQ(run({"solve", (sb.dir / "a" / "report.json").string(), "--out", (sb.dir / "b").string(), "--threads",
                 "8"})
                .code,
            0);
  EXPECT_EQ(without_clock(read_json(sb.dir / "a" / "report.json")),
            without_clock(read_json(sb.dir / "b" / "report.json")));
  EXPECT_EQ(read_text(sb.dir / "a" / "trace.csv"), read_text(sb.dir / "b" / "trace.csv"));
}

TEST(Cli, EchoedConfigReproducesMonteCarloRun) {
  Sandbox sb("closure_mc");
  const auto cfg = sb.write(
      "c.json", R"({"generator": {"name": "half_z"}, "terminal": {"name": "sin_WT"},
                    "model": {"engine": "montecarlo", "steps": 6, "paths": 9000, "seed": 11}})");
  ASSERT_EQ(run({"solve", cfg, "--out", (sb.dir / "a").string(), "--threads", "1"}).code, 0);
  ASSERT_EQ(run({"solve", (sb.dir / "a" / "report.json").string(), "--out", (sb.dir / "b").string(), "--threads",
                 "8"})
                .code,
            0);
  EXPECT_EQ(without_clock(read_json(sb.dir / "a" / "report.json")),
            without_clock(read_json(sb.dir / "b" / "report.json")));
  EXPECT_EQ(read_text(sb.dir / "a" / "trace.csv"), read_text(sb.dir / "b" / "trace.csv"));
}

TEST(Cli, SeedOverrideIsEchoed) {
  Sandbox sb("seed");
  const auto cfg = sb.write("c.json", R"({"model": {"engine": "montecarlo", "steps": 4, "paths": 3000}})");
  ASSERT_EQ(run({"solve", cfg, "--out", (sb.dir / "a").string()}).code, 0);
  ASSERT_EQ(run({"solve", cfg, "--out", (sb.dir / "b").string(), "--seed", "99"}).code, 0);
  const auto a = read_json(sb.dir / "a" / "report.json");
  const auto b = read_json(sb.dir / "b" / "report.json");
  EXPECT_EQ(b["config"]["model"]["seed"], 99);
  EXPECT_NE(a["result"]["y0"], b["result"]["y0"]);
}

TEST(Cli, ThreadsFromEnvironment) {
  Sandbox sb("env");
  const auto cfg = sb.write("c.json", R"({"model": {"steps": 4}})");
  ::setenv("MEASURE_BSDE_THREADS", "3", 1);
  ASSERT_EQ(run({"solve", cfg, "--out", (sb.dir / "a").string()}).code, 0);
  EXPECT_EQ(read_json(sb.dir / "a" / "report.json")["engine"]["threads"], 3);
  ASSERT_EQ(run({"solve", cfg, "--out", (sb.dir / "b").string(), "--threads", "2"}).code, 0);
  EXPECT_EQ(read_json(sb.dir / "b" / "report.json")["engine"]["threads"], 2);
  ::setenv("MEASURE_BSDE_THREADS", "many", 1);
  EXPECT_EQ(run({"solve", cfg, "--out", (sb.dir / "c").string()}).code, 1);
  ::unsetenv("MEASURE_BSDE_THREADS");
  EXPECT_EQ(mbsde::thread_count(), 1u);
}

TEST(CliOracle, ConditionalMeanIsExactOnLattice) {
  Sandbox sb("cm");
  const auto cfg = sb.write("c.json", R"({"oracle": {"name": "conditional_mean", "levels": [8, 64]}})");
  const auto r = run({"oracle", cfg, "--out", (sb.dir / "o").string()});
  EXPECT_EQ(r.code, 0) << r.err;
  for (const auto& row : read_json(sb.dir / "o" / "report.json")["result"]["rows"]) {
    EXPECT_LT(row["gap"].get<double>(), 1e-12);
  }
}

TEST(CliOracle, GirsanovShiftRejectsLinearGenerator) {
  Sandbox sb("gs");
  const auto cfg = sb.write("c.json", R"({"generator": {"name": "half_z"}, "oracle": {"name": "girsanov_shift"}})");
  const auto r = run({"oracle", cfg, "--out", (sb.dir / "o").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("oracle mismatch"), std::string::npos);
}

TEST(CliOracle, ExpTransformGapShrinks) {
  Sandbox sb("exp");
  const auto cfg = sb.write(
      "c.json", R"({"generator": {"name": "half_z"}, "oracle": {"name": "exp_transform", "levels": [16, 32, 64]}})");
  ASSERT_EQ(run({"oracle", cfg, "--out", (sb.dir / "o").string()}).code, 0);
  const auto table = read_csv(sb.dir / "o" / "table.csv");
  ASSERT_EQ(table.size(), 4u);
  EXPECT_EQ(table[0], (std::vector<std::string>{"K", "solver", "oracle", "gap", "tolerance", "status"}));
  double prev = 1.0;
  for (std::size_t i = 1; i < table.size(); ++i) {
    const double gap = std::stod(table[i][3]);
    EXPECT_LT(gap, prev);
    prev = gap;
    EXPECT_EQ(table[i][5], "PASS");
  }
  EXPECT_GT(read_json(sb.dir / "o" / "report.json")["result"]["empirical_order"].get<double>(), 0.8);
}

TEST(CliOracle, GirsanovShiftOnMonteCarlo) {
  Sandbox sb("gs_mc");
  const auto cfg = sb.write("c.json", R"({"generator": {"name": "constant_b", "params": {"b": 0.2}},
      "model": {"engine": "montecarlo", "paths": 20000, "seed": 5},
      "oracle": {"name": "girsanov_shift", "levels": [8]}})");
  const auto r = run({"oracle", cfg, "--out", (sb.dir / "o").string()});
  EXPECT_EQ(r.code, 0) << r.out << r.err;
}

TEST(CliBmo, FormulasAtUnitK) {
  Sandbox sb("bmo");
  const auto cfg = sb.write("c.json", R"({"bmo": {"K": 1}})");
  const auto r = run({"bmo", cfg, "--out", (sb.dir / "o").string()});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("r = -0.30901"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("C = 1.41421"), std::string::npos) << r.out;
  const auto rep = read_json(sb.dir / "o" / "report.json");
  EXPECT_NEAR(rep["result"]["r"].get<double>(), (1.0 - std::sqrt(5.0)) / 4.0, 1e-15);
}

TEST(CliBmo, SolvedNormWithinAprioriBound) {
  Sandbox sb("bmo_solve");
  const auto cfg = sb.write("c.json", R"({"model": {"steps": 32},
      "generator": {"name": "random_bound_linear", "params": {"a": 0.5}}})");
  const auto r = run({"bmo", cfg, "--out", (sb.dir / "o").string()});
  EXPECT_EQ(r.code, 0) << r.err;
  const auto res = read_json(sb.dir / "o" / "report.json")["result"];
  EXPECT_TRUE(res["apriori"]["within_bound"].get<bool>());
  EXPECT_TRUE(res["random_bound"]["passed"].get<bool>());
  EXPECT_EQ(res["norm"]["method"], "lattice_exact");
}

TEST(CliStability, ConstantSequencePasses) {
  Sandbox sb("stab");
  const auto cfg = sb.write("c.json", R"({"model": {"steps": 16}, "generator": {"name": "half_z"},
      "stability": {"scenario": "constant"}})");
  const auto r = run({"stability", cfg, "--out", (sb.dir / "o").string()});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("PASS"), std::string::npos);
  const auto table = read_csv(sb.dir / "o" / "table.csv");
  ASSERT_EQ(table.size(), 5u);
  for (std::size_t i = 1; i < table.size(); ++i) {
    EXPECT_EQ(std::stod(table[i][11]), 0.0);  // max_weak_gap
    EXPECT_EQ(std::stod(table[i][12]), 0.0);  // z_gap
  }
}

TEST(CliRegularize, InfConvolutionColumnsIncrease) {
  Sandbox sb("reg");
  const auto cfg = sb.write("c.json", R"({"generator": {"name": "half_z"}, "regularize": {"ns": [1, 2, 3]}})");
  const auto r = run({"regularize", cfg, "--out", (sb.dir / "o").string()});
  EXPECT_EQ(r.code, 0) << r.err;
  const auto table = read_csv(sb.dir / "o" / "table.csv");
  ASSERT_EQ(table.size(), 501u);
  EXPECT_EQ(table[0][1], "f");
  EXPECT_EQ(table[0][2], "f_1");
  EXPECT_EQ(table[0][4], "f_3");
  for (std::size_t i = 1; i < table.size(); ++i) {
    const double f = std::stod(table[i][1]);
    const double f1 = std::stod(table[i][2]), f2 = std::stod(table[i][3]), f3 = std::stod(table[i][4]);
    EXPECT_LE(f1, f2);
    EXPECT_LE(f2, f3);
    EXPECT_LE(f3, f);
  }
}

TEST(CliBench, IdenticalAcrossThreads) {
  Sandbox sb("bench");
  const auto cfg = sb.write("c.json", R"({"model": {"steps": 16}, "generator": {"name": "half_z"},
      "bench": {"threads": [1, 4], "repeats": 1}})");
  const auto r = run({"bench", cfg, "--out", (sb.dir / "o").string()});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(read_json(sb.dir / "o" / "report.json")["result"]["identical_across_threads"].get<bool>());
  EXPECT_EQ(read_csv(sb.dir / "o" / "table.csv").size(), 3u);
}

TEST(CliOutput, CsvIsLocaleIndependent) {
  EXPECT_EQ(mbsde::cli::format_number(0.5), "0.5");
  EXPECT_EQ(mbsde::cli::format_number(-1e-300), "-1e-300");
  EXPECT_EQ(mbsde::cli::format_number(mbsde::kInf), "inf");
  const double x = 0.1 + 0.2;
  EXPECT_EQ(std::stod(mbsde::cli::format_number(x)), x);
  mbsde::cli::CsvTable t({"a", "b"});
  t.row().add(1.25).add(std::size_t{3});
  EXPECT_EQ(t.str(), "a,b\n1.25,3\n");
}
