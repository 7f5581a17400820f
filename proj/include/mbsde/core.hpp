#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mbsde/errors.hpp"
#include "mbsde/parallel.hpp"

namespace mbsde {

inline constexpr double kInf = std::numeric_limits<double>::infinity();
inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

/// Uniform grid 0 = t_0 < ... < t_K = T.
class TimeGrid {
 public:
  TimeGrid(double horizon, std::size_t steps) : horizon_(horizon), steps_(steps) {
    if (!(horizon > 0.0) || !std::isfinite(horizon)) {
      throw DomainError("time grid: horizon must be positive and finite");
    }
    if (steps == 0) throw DomainError("time grid: at least one step required");
    dt_ = horizon / static_cast<double>(steps);
    sqrt_dt_ = std::sqrt(dt_);
    times_.resize(steps + 1);
    for (std::size_t k = 0; k <= steps; ++k) times_[k] = dt_ * static_cast<double>(k);
    times_[steps] = horizon;
  }

  double horizon() const { return horizon_; }
  std::size_t steps() const { return steps_; }
  double dt() const { return dt_; }
  double sqrt_dt() const { return sqrt_dt_; }
  double time(std::size_t k) const { return times_[k]; }
  const std::vector<double>& times() const { return times_; }

 private:
  double horizon_;
  std::size_t steps_;
  double dt_;
  double sqrt_dt_;
  std::vector<double> times_;
};

/// What a generator or terminal functional may look at: the current time
/// and the driver path up to now. `w` is W_t (length d); `running_max` is
/// max_{u<=t} W^1_u when the engine tracks paths (NaN on a recombining tree).
struct State {
  double t = 0.0;
  std::size_t step = 0;
  std::span<const double> w;
  double running_max = kNaN;

  double w1() const { return w.empty() ? 0.0 : w[0]; }
};

enum class TreeScheme { full, recombining };

inline std::string to_string(TreeScheme s) {
  return s == TreeScheme::full ? "full" : "recombining";
}

/// Binary lattice driven by increments +-sqrt(dt) with probability 1/2.
///
/// The full scheme keeps all 2^k paths at step k (node i's binary digits,
/// most significant first, are the up/down moves), so path functionals are
/// exact. The recombining scheme keys nodes by the number of up moves and is
/// only valid for data that depend on the path through (t, W_t).
class LatticeModel {
 public:
  static constexpr std::size_t kFullTreeCap = 22;
  static constexpr std::size_t kRecombiningCap = 1u << 14;

  explicit LatticeModel(TimeGrid grid, TreeScheme scheme = TreeScheme::full,
                        std::size_t step_cap = 0)
      : grid_(std::move(grid)), scheme_(scheme) {
    const std::size_t cap =
        step_cap != 0 ? step_cap
                      : (scheme == TreeScheme::full ? kFullTreeCap : kRecombiningCap);
    if (grid_.steps() > cap) {
      throw ResourceError("lattice: " + std::to_string(grid_.steps()) +
                          " steps exceed the cap of " + std::to_string(cap) + " for the " +
                          to_string(scheme) + " tree");
    }
    if (scheme == TreeScheme::full && grid_.steps() > 30) {
      throw ResourceError("lattice: full tree limited to 30 steps");
    }
  }

  const TimeGrid& grid() const { return grid_; }
  TreeScheme scheme() const { return scheme_; }
  std::size_t steps() const { return grid_.steps(); }
  double dt() const { return grid_.dt(); }
  double sqrt_dt() const { return grid_.sqrt_dt(); }

  std::size_t node_count(std::size_t k) const {
    return scheme_ == TreeScheme::full ? (std::size_t{1} << k) : k + 1;
  }

  std::size_t child(std::size_t, std::size_t i, bool up) const {
    return scheme_ == TreeScheme::full ? 2 * i + (up ? 1 : 0) : i + (up ? 1 : 0);
  }

  std::size_t up_moves(std::size_t, std::size_t i) const {
    return scheme_ == TreeScheme::full ? static_cast<std::size_t>(std::popcount(i)) : i;
  }

  double w(std::size_t k, std::size_t i) const {
    const double ups = static_cast<double>(up_moves(k, i));
    return (2.0 * ups - static_cast<double>(k)) * grid_.sqrt_dt();
  }

  double running_max(std::size_t k, std::size_t i) const {
    if (scheme_ != TreeScheme::full) return kNaN;
    double level = 0.0;
    double best = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const bool up = (i >> (k - 1 - j)) & 1u;
      level += up ? grid_.sqrt_dt() : -grid_.sqrt_dt();
      best = std::max(best, level);
    }
    return best;
  }

  /// P(node). Exact powers of two on the full tree; lgamma on the binomial one.
  double probability(std::size_t k, std::size_t i) const {
    if (scheme_ == TreeScheme::full) return std::ldexp(1.0, -static_cast<int>(k));
    const double kk = static_cast<double>(k);
    const double ii = static_cast<double>(i);
    return std::exp(std::lgamma(kk + 1) - std::lgamma(ii + 1) - std::lgamma(kk - ii + 1) -
                    kk * std::log(2.0));
  }

  /// Fills `w_storage` and returns a State viewing it.
  State state(std::size_t k, std::size_t i, double& w_storage) const {
    w_storage = w(k, i);
    return State{grid_.time(k), k, std::span<const double>(&w_storage, 1), running_max(k, i)};
  }

 private:
  TimeGrid grid_;
  TreeScheme scheme_;
};

/// build_lattice with the full (non-recombining) tree and default cap.
inline LatticeModel build_lattice(double horizon, std::size_t steps,
                                  TreeScheme scheme = TreeScheme::full) {
  return LatticeModel(TimeGrid(horizon, steps), scheme);
}

/// Node-indexed adapted process on a lattice: slice k holds one value vector
/// of length dim per node at step k. Values live on nodes, so a process can
/// never look ahead.
class NodeProcess {
 public:
  NodeProcess() = default;
  NodeProcess(const LatticeModel& model, std::size_t last_step, std::size_t dim = 1,
              double fill = 0.0)
      : dim_(dim), slices_(last_step + 1) {
    for (std::size_t k = 0; k <= last_step; ++k) {
      slices_[k].assign(model.node_count(k) * dim, fill);
    }
  }

  std::size_t dim() const { return dim_; }
  std::size_t last_step() const { return slices_.empty() ? 0 : slices_.size() - 1; }
  bool empty() const { return slices_.empty(); }

  std::vector<double>& slice(std::size_t k) { return slices_[k]; }
  const std::vector<double>& slice(std::size_t k) const { return slices_[k]; }

  double& operator()(std::size_t k, std::size_t i, std::size_t c = 0) {
    return slices_[k][i * dim_ + c];
  }
  double operator()(std::size_t k, std::size_t i, std::size_t c = 0) const {
    return slices_[k][i * dim_ + c];
  }
  std::span<double> at(std::size_t k, std::size_t i) {
    return {slices_[k].data() + i * dim_, dim_};
  }
  std::span<const double> at(std::size_t k, std::size_t i) const {
    return {slices_[k].data() + i * dim_, dim_};
  }

 private:
  std::size_t dim_ = 1;
  std::vector<std::vector<double>> slices_;
};

/// E[sum_{k=first}^{last} term(k, i)] under P, by backward averaging. Exact
/// for both tree schemes and independent of the thread count.
template <typename Term>
double lattice_expected_sum(const LatticeModel& model, std::size_t first, std::size_t last,
                            Term&& term) {
  std::vector<double> acc(model.node_count(last));
  parallel_for(acc.size(), [&](std::size_t i) { acc[i] = term(last, i); });
  for (std::size_t k = last; k-- > first;) {
    std::vector<double> next(model.node_count(k));
    parallel_for(next.size(), [&](std::size_t i) {
      next[i] = term(k, i) + 0.5 * (acc[model.child(k, i, true)] + acc[model.child(k, i, false)]);
    });
    acc.swap(next);
  }
  for (std::size_t k = first; k-- > 0;) {
    std::vector<double> next(model.node_count(k));
    parallel_for(next.size(), [&](std::size_t i) {
      next[i] = 0.5 * (acc[model.child(k, i, true)] + acc[model.child(k, i, false)]);
    });
    acc.swap(next);
  }
  return acc[0];
}

/// E[h(leaf)] under P.
template <typename Leaf>
double lattice_expectation(const LatticeModel& model, Leaf&& h) {
  const std::size_t K = model.steps();
  return lattice_expected_sum(model, K, K, [&](std::size_t, std::size_t i) { return h(i); });
}

}  // namespace mbsde
