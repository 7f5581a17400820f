#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mbsde/core.hpp"

namespace mbsde {

enum class IncrementLaw { gaussian, rademacher };

inline std::string to_string(IncrementLaw law) {
  return law == IncrementLaw::gaussian ? "gaussian" : "rademacher";
}

/// Per-path random stream. Keyed by (seed, path) only, so the ensemble is the
/// same whatever the thread count or the order paths are generated in.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::mt19937_64 path_stream(std::uint64_t seed, std::uint64_t path) {
  return std::mt19937_64(splitmix64(splitmix64(seed) ^ path));
}

/// N simulated driver paths on a grid. Increments are i.i.d. N(0, dt) per
/// (path, step, coordinate), or +-sqrt(dt) coin flips under the Rademacher
/// law (the lattice's increment law, used to compare estimators against
/// exact lattice values).
class PathEnsemble {
 public:
  static constexpr std::size_t kMaxCells = 120'000'000;

  PathEnsemble(TimeGrid grid, std::size_t dim, std::size_t paths, std::uint64_t seed,
               IncrementLaw law = IncrementLaw::gaussian)
      : grid_(std::move(grid)), dim_(dim), paths_(paths), seed_(seed), law_(law) {
    if (paths == 0) throw DomainError("path ensemble: need at least one path");
    if (dim == 0) throw DomainError("path ensemble: dimension must be positive");
    const std::size_t K = grid_.steps();
    const double cells = static_cast<double>(paths) * static_cast<double>(K + 1) *
                         static_cast<double>(2 * dim + 1);
    if (cells > static_cast<double>(kMaxCells)) {
      throw ResourceError("path ensemble: N*K*d = " + std::to_string(paths) + "*" +
                          std::to_string(K) + "*" + std::to_string(dim) +
                          " exceeds the memory budget");
    }
    increments_.resize(paths * K * dim);
    levels_.resize(paths * (K + 1) * dim);
    running_max_.resize(paths * (K + 1));
    const double sdt = grid_.sqrt_dt();
    parallel_for(paths, [&](std::size_t p) {
      auto gen = path_stream(seed_, p);
      std::normal_distribution<double> normal(0.0, 1.0);
      double* inc = increments_.data() + p * K * dim;
      double* lev = levels_.data() + p * (K + 1) * dim;
      double* rmax = running_max_.data() + p * (K + 1);
      for (std::size_t c = 0; c < dim; ++c) lev[c] = 0.0;
      rmax[0] = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t c = 0; c < dim; ++c) {
          const double x = law_ == IncrementLaw::gaussian
                               ? normal(gen) * sdt
                               : ((gen() >> 63) != 0u ? sdt : -sdt);
          inc[k * dim + c] = x;
          lev[(k + 1) * dim + c] = lev[k * dim + c] + x;
        }
        rmax[k + 1] = std::max(rmax[k], lev[(k + 1) * dim]);
      }
    });
  }

  const TimeGrid& grid() const { return grid_; }
  std::size_t dim() const { return dim_; }
  std::size_t paths() const { return paths_; }
  std::size_t steps() const { return grid_.steps(); }
  std::uint64_t seed() const { return seed_; }
  IncrementLaw law() const { return law_; }

  /// Increment W_{k+1} - W_k, k < K.
  std::span<const double> dw(std::size_t path, std::size_t k) const {
    return {increments_.data() + (path * grid_.steps() + k) * dim_, dim_};
  }
  /// W_k, k <= K.
  std::span<const double> w(std::size_t path, std::size_t k) const {
    return {levels_.data() + (path * (grid_.steps() + 1) + k) * dim_, dim_};
  }
  double running_max(std::size_t path, std::size_t k) const {
    return running_max_[path * (grid_.steps() + 1) + k];
  }
  State state(std::size_t path, std::size_t k) const {
    return State{grid_.time(k), k, w(path, k), running_max(path, k)};
  }

  const std::vector<double>& increments() const { return increments_; }

 private:
  TimeGrid grid_;
  std::size_t dim_;
  std::size_t paths_;
  std::uint64_t seed_;
  IncrementLaw law_;
  std::vector<double> increments_;
  std::vector<double> levels_;
  std::vector<double> running_max_;
};

inline PathEnsemble simulate_paths(const TimeGrid& grid, std::size_t dim, std::size_t paths,
                                   std::uint64_t seed,
                                   IncrementLaw law = IncrementLaw::gaussian) {
  return PathEnsemble(grid, dim, paths, seed, law);
}

/// Path-indexed adapted process: value vector of length dim per (path, step).
class PathProcess {
 public:
  PathProcess() = default;
  PathProcess(std::size_t paths, std::size_t steps, std::size_t dim, double fill = 0.0)
      : paths_(paths), steps_(steps), dim_(dim), values_(paths * steps * dim, fill) {}

  std::size_t paths() const { return paths_; }
  std::size_t steps() const { return steps_; }
  std::size_t dim() const { return dim_; }

  std::span<double> at(std::size_t path, std::size_t k) {
    return {values_.data() + (path * steps_ + k) * dim_, dim_};
  }
  std::span<const double> at(std::size_t path, std::size_t k) const {
    return {values_.data() + (path * steps_ + k) * dim_, dim_};
  }
  double& operator()(std::size_t path, std::size_t k, std::size_t c = 0) {
    return values_[(path * steps_ + k) * dim_ + c];
  }
  double operator()(std::size_t path, std::size_t k, std::size_t c = 0) const {
    return values_[(path * steps_ + k) * dim_ + c];
  }

 private:
  std::size_t paths_ = 0;
  std::size_t steps_ = 0;
  std::size_t dim_ = 1;
  std::vector<double> values_;
};

}  // namespace mbsde
