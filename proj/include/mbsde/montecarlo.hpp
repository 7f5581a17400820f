#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "mbsde/core.hpp"
#include "mbsde/generators.hpp"
#include "mbsde/lattice.hpp"
#include "mbsde/parallel.hpp"
#include "mbsde/paths.hpp"
#include "mbsde/terminal.hpp"

namespace mbsde::mc {

/// One-step density multipliers: product 1 + zeta.dW, or exponential
/// exp(zeta.dW - |zeta|^2 dt / 2).
enum class DensityForm { product, exponential };

inline std::string to_string(DensityForm f) {
  return f == DensityForm::product ? "product" : "exponential";
}

// ---------------------------------------------------------------------------
// Regression basis on standardized features x = W_k / sqrt(t_k), clamped to
// [-kCellRange, kCellRange].

class RegressionBasis {
 public:
  enum class Family { polynomial, piecewise_constant };

  static constexpr double kCellRange = 3.0;  ///< features are clamped to [-3, 3]; cells tile it

  static RegressionBasis polynomial(std::size_t dim, std::size_t degree) {
    if (dim == 0) throw BasisError("basis: dimension must be positive");
    RegressionBasis b;
    b.family_ = Family::polynomial;
    b.dim_ = dim;
    b.degree_ = degree;
    std::vector<unsigned> e(dim, 0);
    b.enumerate(0, degree, e);
    return b;
  }

  static RegressionBasis piecewise_constant(std::size_t dim, std::size_t bins) {
    if (dim == 0 || bins == 0) throw BasisError("basis: dimension and bins must be positive");
    double cells = 1.0;
    for (std::size_t c = 0; c < dim; ++c) cells *= static_cast<double>(bins);
    if (cells > 1e7) throw BasisError("basis: bins^d exceeds 1e7 cells");
    RegressionBasis b;
    b.family_ = Family::piecewise_constant;
    b.dim_ = dim;
    b.bins_ = bins;
    b.cells_ = static_cast<std::size_t>(cells);
    return b;
  }

  /// Polynomial degree 3 for d <= 2, piecewise-constant 16 bins for d >= 3.
  static RegressionBasis default_for(std::size_t dim) {
    return dim <= 2 ? polynomial(dim, 3) : piecewise_constant(dim, 16);
  }

  Family family() const { return family_; }
  std::size_t dim() const { return dim_; }
  std::size_t degree() const { return degree_; }
  std::size_t bins() const { return bins_; }
  std::size_t size() const { return family_ == Family::polynomial ? exponents_.size() : cells_; }

  std::string describe() const {
    return family_ == Family::polynomial ? "polynomial(degree=" + std::to_string(degree_) + ")"
                                         : "piecewise_constant(bins=" + std::to_string(bins_) + ")";
  }

  /// Monomials of total degree <= degree at x.
  void features(std::span<const double> x, double* out) const {
    for (std::size_t b = 0; b < exponents_.size(); ++b) {
      double v = 1.0;
      for (std::size_t c = 0; c < dim_; ++c) {
        for (unsigned p = 0; p < exponents_[b][c]; ++p) v *= x[c];
      }
      out[b] = v;
    }
  }

  std::size_t cell(std::span<const double> x) const {
    std::size_t idx = 0;
    const double bins = static_cast<double>(bins_);
    for (std::size_t c = dim_; c-- > 0;) {
      const double u = (x[c] + kCellRange) / (2.0 * kCellRange) * bins;
      const auto j = static_cast<std::size_t>(std::clamp(std::floor(u), 0.0, bins - 1.0));
      idx = idx * bins_ + j;
    }
    return idx;
  }

 private:
  void enumerate(std::size_t c, std::size_t left, std::vector<unsigned>& e) {
    if (c == dim_) {
      exponents_.push_back(e);
      return;
    }
    for (std::size_t p = 0; p <= left; ++p) {
      e[c] = static_cast<unsigned>(p);
      enumerate(c + 1, left - p, e);
    }
    e[c] = 0;
  }

  Family family_ = Family::polynomial;
  std::size_t dim_ = 1;
  std::size_t degree_ = 0;
  std::size_t bins_ = 0;
  std::size_t cells_ = 0;
  std::vector<std::vector<unsigned>> exponents_;
};

/// Least-squares projection onto the basis evaluated at step k. Step 0 (and
/// any basis with a single function) reduces to the sample mean.
class StepRegression {
 public:
  StepRegression(const PathEnsemble& ens, const RegressionBasis& basis, std::size_t k)
      : n_(ens.paths()), step_(k) {
    if (k > ens.steps()) throw DomainError("regression: step beyond horizon");
    intercept_ = (k == 0);
    if (intercept_) return;
    family_ = basis.family();
    B_ = basis.size();
    if (B_ > 1 && 20 * B_ > n_) {
      throw BasisError("regression: basis size " + std::to_string(B_) + " exceeds N/20 = " +
                       std::to_string(n_ / 20) + "; use fewer functions or more paths");
    }
    const double scale = 1.0 / std::sqrt(ens.grid().time(k));
    const std::size_t d = ens.dim();
    if (family_ == RegressionBasis::Family::piecewise_constant) {
      cells_.resize(n_);
      parallel_for(n_, [&](std::size_t p) {
        double x[16];
        std::vector<double> heap;
        double* xs = x;
        if (d > 16) {
          heap.resize(d);
          xs = heap.data();
        }
        const auto w = ens.w(p, k);
        for (std::size_t c = 0; c < d; ++c) xs[c] = w[c] * scale;
        cells_[p] = basis.cell(std::span<const double>(xs, d));
      });
      counts_.assign(B_, 0.0);
      for (std::size_t p = 0; p < n_; ++p) counts_[cells_[p]] += 1.0;
      double lo = kInf, hi = 0.0;
      for (double c : counts_) {
        if (c > 0.0) {
          lo = std::min(lo, c);
          hi = std::max(hi, c);
        }
      }
      condition_ = std::sqrt(hi / lo);
      return;
    }
    design_.resize(n_ * B_);
    parallel_for(n_, [&](std::size_t p) {
      double x[16];
      std::vector<double> heap;
      double* xs = x;
      if (d > 16) {
        heap.resize(d);
        xs = heap.data();
      }
      const auto w = ens.w(p, k);
      // Winsorized so cubic terms do not extrapolate into the far tail.
      for (std::size_t c = 0; c < d; ++c) {
        xs[c] = std::clamp(w[c] * scale, -RegressionBasis::kCellRange, RegressionBasis::kCellRange);
      }
      basis.features(std::span<const double>(xs, d), design_.data() + p * B_);
    });
    // Gram matrix by chunk partials summed in chunk order.
    const std::size_t chunks = (n_ + kChunk - 1) / kChunk;
    std::vector<Eigen::MatrixXd> partial(chunks, Eigen::MatrixXd::Zero(B_, B_));
    parallel_chunks(n_, [&](std::size_t b, std::size_t e) {
      auto& G = partial[b / kChunk];
      for (std::size_t p = b; p < e; ++p) {
        const double* row = design_.data() + p * B_;
        for (std::size_t i = 0; i < B_; ++i) {
          for (std::size_t j = 0; j <= i; ++j) G(i, j) += row[i] * row[j];
        }
      }
    });
    Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(B_, B_);
    for (const auto& G : partial) gram += G;
    for (std::size_t i = 0; i < B_; ++i) {
      for (std::size_t j = 0; j < i; ++j) gram(j, i) = gram(i, j);
    }
    gram /= static_cast<double>(n_);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram, Eigen::EigenvaluesOnly);
    const double lmin = eig.eigenvalues().minCoeff();
    const double lmax = eig.eigenvalues().maxCoeff();
    if (!(lmin > 1e-13 * lmax)) {
      throw BasisError("regression: singular design matrix at step " + std::to_string(k) +
                       " (basis " + basis.describe() + "); use a lower degree or the piecewise-constant basis");
    }
    condition_ = std::sqrt(lmax / lmin);
    ldlt_ = gram.ldlt();
  }

  std::size_t step() const { return step_; }
  std::size_t basis_size() const { return intercept_ ? 1 : B_; }
  /// Condition number of the (normalized) design matrix.
  double condition_number() const { return condition_; }

  /// Fitted values of each target column at every path.
  std::vector<std::vector<double>> fit(const std::vector<const std::vector<double>*>& targets) const {
    std::vector<std::vector<double>> out(targets.size(), std::vector<double>(n_));
    for (std::size_t t = 0; t < targets.size(); ++t) {
      const auto& y = *targets[t];
      auto& o = out[t];
      if (intercept_) {
        const double mean = deterministic_sum(n_, [&](std::size_t p) { return y[p]; }) / static_cast<double>(n_);
        std::fill(o.begin(), o.end(), mean);
      } else if (family_ == RegressionBasis::Family::piecewise_constant) {
        std::vector<double> sums(B_, 0.0);
        for (std::size_t p = 0; p < n_; ++p) sums[cells_[p]] += y[p];
        for (std::size_t p = 0; p < n_; ++p) o[p] = sums[cells_[p]] / counts_[cells_[p]];
      } else {
        const std::size_t chunks = (n_ + kChunk - 1) / kChunk;
        std::vector<Eigen::VectorXd> partial(chunks, Eigen::VectorXd::Zero(B_));
        parallel_chunks(n_, [&](std::size_t b, std::size_t e) {
          auto& v = partial[b / kChunk];
          for (std::size_t p = b; p < e; ++p) {
            const double* row = design_.data() + p * B_;
            for (std::size_t i = 0; i < B_; ++i) v(i) += row[i] * y[p];
          }
        });
        Eigen::VectorXd rhs = Eigen::VectorXd::Zero(B_);
        for (const auto& v : partial) rhs += v;
        rhs /= static_cast<double>(n_);
        const Eigen::VectorXd coef = ldlt_.solve(rhs);
        parallel_for(n_, [&](std::size_t p) {
          const double* row = design_.data() + p * B_;
          double s = 0.0;
          for (std::size_t i = 0; i < B_; ++i) s += row[i] * coef(i);
          o[p] = s;
        });
      }
    }
    return out;
  }

  /// Per-basis-function sample means of residual * phi_b (in-sample
  /// orthogonality); largest absolute value.
  double orthogonality(const std::vector<double>& residual) const {
    if (intercept_) {
      return std::abs(deterministic_sum(n_, [&](std::size_t p) { return residual[p]; })) / static_cast<double>(n_);
    }
    double worst = 0.0;
    if (family_ == RegressionBasis::Family::piecewise_constant) {
      std::vector<double> sums(B_, 0.0);
      for (std::size_t p = 0; p < n_; ++p) sums[cells_[p]] += residual[p];
      for (double s : sums) worst = std::max(worst, std::abs(s) / static_cast<double>(n_));
      return worst;
    }
    for (std::size_t b = 0; b < B_; ++b) {
      const double s = deterministic_sum(n_, [&](std::size_t p) { return residual[p] * design_[p * B_ + b]; });
      worst = std::max(worst, std::abs(s) / static_cast<double>(n_));
    }
    return worst;
  }

 private:
  std::size_t n_ = 0;
  std::size_t step_ = 0;
  bool intercept_ = true;
  RegressionBasis::Family family_ = RegressionBasis::Family::polynomial;
  std::size_t B_ = 1;
  std::vector<double> design_;
  std::vector<std::size_t> cells_;
  std::vector<double> counts_;
  double condition_ = 1.0;
  Eigen::LDLT<Eigen::MatrixXd> ldlt_;
};

/// In-sample R^2 of a fit.
inline double r_squared(const std::vector<double>& y, const std::vector<double>& fitted) {
  const std::size_t n = y.size();
  const double mean = deterministic_sum(n, [&](std::size_t p) { return y[p]; }) / static_cast<double>(n);
  const double tot = deterministic_sum(n, [&](std::size_t p) { return (y[p] - mean) * (y[p] - mean); });
  const double res = deterministic_sum(n, [&](std::size_t p) { return (y[p] - fitted[p]) * (y[p] - fitted[p]); });
  return tot > 0.0 ? 1.0 - res / tot : 1.0;
}

// ---------------------------------------------------------------------------
// Densities on paths.

struct PathDensity {
  std::vector<double> multipliers;  ///< N x K one-step factors
  std::vector<double> cumulative;   ///< N x (K+1), R_0 = 1
  std::size_t floored = 0;          ///< product multipliers raised to the floor 1 - clip
  std::size_t steps = 0;

  double r(std::size_t p, std::size_t k) const { return multipliers[p * steps + k]; }
  double R(std::size_t p, std::size_t k) const { return cumulative[p * (steps + 1) + k]; }
};

inline PathDensity path_density(const PathEnsemble& ens, const PathProcess& zeta, DensityForm form,
                                double clip = 0.95) {
  const std::size_t N = ens.paths(), K = ens.steps();
  const double dt = ens.grid().dt();
  const double floor = 1.0 - clip;
  PathDensity out;
  out.steps = K;
  out.multipliers.resize(N * K);
  out.cumulative.resize(N * (K + 1));
  std::vector<std::size_t> floored(N, 0);
  parallel_for(N, [&](std::size_t p) {
    double R = 1.0;
    out.cumulative[p * (K + 1)] = 1.0;
    for (std::size_t k = 0; k < K; ++k) {
      const auto z = zeta.at(p, k);
      const auto dw = ens.dw(p, k);
      double r;
      if (form == DensityForm::product) {
        r = 1.0 + dot(z, dw);
        if (r < floor) {
          r = floor;
          ++floored[p];
        }
      } else {
        r = std::exp(dot(z, dw) - 0.5 * dot(z, z) * dt);
      }
      out.multipliers[p * K + k] = r;
      R *= r;
      out.cumulative[p * (K + 1) + k + 1] = R;
    }
  });
  out.floored = std::accumulate(floored.begin(), floored.end(), std::size_t{0});
  return out;
}

/// (sum R)^2 / sum R^2, in [1, N].
inline double effective_sample_size(std::span<const double> weights) {
  const std::size_t n = weights.size();
  if (n == 0) return 0.0;
  const double s1 = deterministic_sum(n, [&](std::size_t p) { return weights[p]; });
  const double s2 = deterministic_sum(n, [&](std::size_t p) { return weights[p] * weights[p]; });
  return s2 > 0.0 ? s1 * s1 / s2 : 0.0;
}

/// Bayes projection: regress(weights * values) / regress(weights) at step k.
inline std::vector<double> weighted_projection(const std::vector<double>& values,
                                               const std::vector<double>& weights,
                                               const PathEnsemble& ens, const RegressionBasis& basis,
                                               std::size_t k) {
  const std::size_t N = ens.paths();
  if (values.size() != N || weights.size() != N) throw DomainError("weighted_projection: size mismatch");
  for (double w : weights) {
    if (!(w > 0.0)) throw InvalidDensityError("weighted_projection: nonpositive weight");
  }
  std::vector<double> num(N);
  for (std::size_t p = 0; p < N; ++p) num[p] = weights[p] * values[p];
  const StepRegression reg(ens, basis, k);
  const auto fits = reg.fit({&num, &weights});
  std::vector<double> out(N);
  for (std::size_t p = 0; p < N; ++p) out[p] = fits[0][p] / fits[1][p];
  return out;
}

namespace detail {

/// Solves dt (I - dt zeta zeta^T) Z = m (product form) or dt Z = m
/// (exponential form) via Sherman-Morrison.
inline void solve_z(std::span<const double> zeta, std::span<const double> m, double dt,
                    DensityForm form, std::span<double> z) {
  const std::size_t d = m.size();
  if (form == DensityForm::exponential) {
    for (std::size_t c = 0; c < d; ++c) z[c] = m[c] / dt;
    return;
  }
  const double zz = dot(zeta, zeta);
  const double zm = dot(zeta, m);
  const double coef = dt * zm / (1.0 - dt * zz);
  for (std::size_t c = 0; c < d; ++c) z[c] = (m[c] + coef * zeta[c]) / dt;
}

struct StepFit {
  std::vector<double> y;  ///< Y_k per path
  PathProcess z;          ///< N x 1 x d
  double r2 = 1.0;
  double orthogonality = 0.0;
};

/// One backward step. In product form zeta_k is F_k-measurable, so
///   E[r Y] = E[Y] + zeta.E[Y dW],
///   E[r Y dW^Q] = E[Y dW] + E[Y dW dW^T] zeta - dt zeta E[r Y],
/// and only zeta-free targets are regressed (E[r | F_k] = 1). The
/// exponential form regresses r Y and r Y dW^Q and divides by the fit of r.
inline StepFit one_step(const StepRegression& reg, const std::vector<double>& y_next, const PathProcess& zeta,
                        const PathEnsemble& ens, std::size_t k, DensityForm form) {
  const std::size_t N = ens.paths(), d = ens.dim();
  const double dt = ens.grid().dt();
  StepFit out;
  out.y.resize(N);
  out.z = PathProcess(N, 1, d);
  std::vector<std::vector<double>> cols;
  if (form == DensityForm::product) {
    const std::size_t pairs = d * (d + 1) / 2;
    cols.assign(1 + d + pairs, std::vector<double>(N));
    parallel_for(N, [&](std::size_t p) {
      const auto dw = ens.dw(p, k);
      const double y = y_next[p];
      cols[0][p] = y;
      std::size_t idx = 1 + d;
      for (std::size_t a = 0; a < d; ++a) {
        cols[1 + a][p] = y * dw[a];
        for (std::size_t b = a; b < d; ++b) cols[idx++][p] = y * dw[a] * dw[b];
      }
    });
  } else {
    cols.assign(2 + d, std::vector<double>(N));
    parallel_for(N, [&](std::size_t p) {
      const auto z = zeta.at(p, k);
      const auto dw = ens.dw(p, k);
      const double r = std::exp(dot(z, dw) - 0.5 * dot(z, z) * dt);
      cols[0][p] = r;
      cols[1][p] = r * y_next[p];
      for (std::size_t c = 0; c < d; ++c) cols[2 + c][p] = r * y_next[p] * (dw[c] - z[c] * dt);
    });
  }
  std::vector<const std::vector<double>*> targets;
  for (const auto& c : cols) targets.push_back(&c);
  const auto fits = reg.fit(targets);
  const std::size_t yc = form == DensityForm::product ? 0 : 1;
  parallel_for(N, [&](std::size_t p) {
    const auto zt = zeta.at(p, k);
    double m[64];
    std::vector<double> heap;
    double* mp = m;
    if (d > 64) {
      heap.resize(d);
      mp = heap.data();
    }
    if (form == DensityForm::product) {
      double ey = fits[0][p];
      for (std::size_t a = 0; a < d; ++a) ey += zt[a] * fits[1 + a][p];
      out.y[p] = ey;
      for (std::size_t a = 0; a < d; ++a) mp[a] = fits[1 + a][p] - dt * zt[a] * ey;
      std::size_t idx = 1 + d;
      for (std::size_t a = 0; a < d; ++a) {
        for (std::size_t b = a; b < d; ++b) {
          const double e = fits[idx++][p];
          mp[a] += e * zt[b];
          if (b != a) mp[b] += e * zt[a];
        }
      }
    } else {
      const double er = fits[0][p];
      out.y[p] = fits[1][p] / er;
      for (std::size_t c = 0; c < d; ++c) mp[c] = fits[2 + c][p] / er;
    }
    solve_z(zt, std::span<const double>(mp, d), dt, form, out.z.at(p, 0));
  });
  out.r2 = r_squared(cols[yc], fits[yc]);
  std::vector<double> resid(N);
  for (std::size_t p = 0; p < N; ++p) resid[p] = cols[yc][p] - fits[yc][p];
  out.orthogonality = reg.orthogonality(resid);
  return out;
}

}  // namespace detail

/// Z_k from Cov_Q(dW^Q) Z = E_Q[Y_{k+1} dW^Q | F_k]; zeta = nullptr means P.
inline PathProcess extract_z(const std::vector<double>& y_next, const PathProcess* zeta,
                             const PathEnsemble& ens, const RegressionBasis& basis, std::size_t k,
                             DensityForm form = DensityForm::product) {
  PathProcess zero;
  if (!zeta) zero = PathProcess(ens.paths(), ens.steps(), ens.dim(), 0.0);
  const StepRegression reg(ens, basis, k);
  return detail::one_step(reg, y_next, zeta ? *zeta : zero, ens, k, form).z;
}

// ---------------------------------------------------------------------------
// Measure-solution fixed point on paths.

struct McOptions {
  double tol = 1e-4;
  std::size_t max_iter = 200;
  double damping = 1.0;
  bool auto_damping = true;
  double min_damping = 1.0 / 1024.0;
  double clip = 0.95;  ///< |zeta| sqrt(dt) <= clip, product multipliers floored at 1 - clip
  double z_eps = 1e-12;
  bool allow_unbounded_terminal = false;
  DensityForm form = DensityForm::product;
  std::size_t bootstrap = 200;
  double min_ess_fraction = 0.01;
};

struct McSolveReport {
  double y0 = kNaN;         ///< nested regression estimate
  double y0_direct = kNaN;  ///< mean(R_K xi) / mean(R_K)
  double y0_ci = kNaN;      ///< bootstrap 95% half-width of the direct estimate
  double residual = kInf;
  double residual_ci = kNaN;
  double a_residual = kInf;
  double max_residual = kInf;
  std::size_t iterations = 0;
  bool converged = false;
  bool clip_active = false;
  std::vector<lattice::TraceRow> trace;
  double ess = kNaN;
  double weight_mean = kNaN;
  bool weight_mean_flag = false;  ///< mean R_K outside 1 +- 5/sqrt(N)
  double e_rep = kNaN;
  std::size_t floored_multipliers = 0;
  std::vector<double> r2;             ///< per step, Y regression
  std::vector<double> condition;      ///< per step
  std::vector<double> orthogonality;  ///< per step, max_b |E[(r Y_{k+1} - fit) phi_b]|
  std::string basis;
  PathProcess y;     ///< N x (K+1)
  PathProcess z;     ///< N x K x d
  PathProcess zeta;  ///< N x K x d
  std::vector<double> density_terminal;  ///< R_K per path
};

namespace detail {

/// 95% bootstrap half-width of a statistic computed from resampled indices.
template <typename Stat>
double bootstrap_half_width(std::size_t n, std::size_t resamples, std::uint64_t seed, Stat&& stat) {
  if (resamples < 2 || n < 2) return 0.0;
  std::vector<double> values(resamples);
  parallel_for(resamples, [&](std::size_t b) {
    auto gen = path_stream(seed, b);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::vector<std::size_t> idx(n);
    for (auto& i : idx) i = pick(gen);
    values[b] = stat(idx);
  });
  std::sort(values.begin(), values.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(resamples - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, resamples - 1);
    return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
  };
  return 0.5 * (quantile(0.975) - quantile(0.025));
}

}  // namespace detail

/// Damped fixed point zeta <- (1-theta) zeta + theta g(.,Y,Z) with nested
/// one-step Bayes regressions Y_k = regress(r_k Y_{k+1}) / regress(r_k) and
/// Z_k from the Q-covariance of dW^Q. Regressions are re-fit every sweep.
inline McSolveReport mc_solve(const GeneratorG& g, const TerminalCondition& xi, const PathEnsemble& ens,
                              const RegressionBasis& basis, const McOptions& opts = {}) {
  const std::size_t N = ens.paths(), K = ens.steps(), d = ens.dim();
  if (g.dim() != d) throw DomainError("mc_solve: generator dimension does not match the ensemble");
  if (basis.dim() != d) throw DomainError("mc_solve: basis dimension does not match the ensemble");
  if (!xi.bounded() && !opts.allow_unbounded_terminal) {
    throw DomainError("terminal '" + xi.name + "' is unbounded (test-only)");
  }
  if (!(opts.clip > 0.0 && opts.clip < 1.0)) throw DomainError("solver: clip must lie in (0, 1)");
  if (!(opts.damping > 0.0 && opts.damping <= 1.0)) throw DomainError("solver: damping must lie in (0, 1]");
  if (opts.max_iter == 0) throw DomainError("solver: max_iter must be positive");
  const double dt = ens.grid().dt();
  const double cap = opts.clip / ens.grid().sqrt_dt();

  // Regressions depend only on the ensemble and the basis.
  std::vector<StepRegression> regs;
  regs.reserve(K);
  for (std::size_t k = 0; k < K; ++k) regs.emplace_back(ens, basis, k);

  std::vector<double> leaves(N);
  parallel_for(N, [&](std::size_t p) { leaves[p] = xi(ens.state(p, K)); });

  McSolveReport rep;
  rep.basis = basis.describe();
  rep.zeta = PathProcess(N, K, d, 0.0);
  rep.y = PathProcess(N, K + 1, 1);
  rep.z = PathProcess(N, K, d);
  rep.r2.assign(K, 0.0);
  rep.condition.assign(K, 0.0);
  rep.orthogonality.assign(K, 0.0);
  for (std::size_t k = 0; k < K; ++k) rep.condition[k] = regs[k].condition_number();

  PathProcess target(N, K, d);
  std::vector<double> per_path(N), per_path_masked(N);
  double theta = opts.damping;
  double previous = kInf;
  for (std::size_t iter = 1; iter <= opts.max_iter; ++iter) {
    // Backward pass.
    std::vector<double> ynext(N);
    for (std::size_t p = 0; p < N; ++p) rep.y(p, K) = leaves[p];
    for (std::size_t k = K; k-- > 0;) {
      for (std::size_t p = 0; p < N; ++p) ynext[p] = rep.y(p, k + 1);
      const auto step = detail::one_step(regs[k], ynext, rep.zeta, ens, k, opts.form);
      for (std::size_t p = 0; p < N; ++p) {
        rep.y(p, k) = step.y[p];
        const auto z = step.z.at(p, 0);
        std::copy(z.begin(), z.end(), rep.z.at(p, k).begin());
      }
      rep.r2[k] = step.r2;
      rep.orthogonality[k] = step.orthogonality;
    }
    // Drift target and residuals.
    parallel_for(N, [&](std::size_t p) {
      double acc = 0.0, acc_masked = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        const auto z = rep.z.at(p, k);
        auto tg = target.at(p, k);
        g.evaluate(ens.state(p, k), rep.y(p, k), z, tg);
        double e2 = 0.0;
        const auto zt = rep.zeta.at(p, k);
        for (std::size_t c = 0; c < d; ++c) e2 += (zt[c] - tg[c]) * (zt[c] - tg[c]);
        acc += e2 * dt;
        if (norm2(z) > opts.z_eps) acc_masked += e2 * dt;
      }
      per_path[p] = acc;
      per_path_masked[p] = acc_masked;
    });
    const double nn = static_cast<double>(N);
    rep.residual = std::sqrt(deterministic_sum(N, [&](std::size_t p) { return per_path[p]; }) / nn);
    rep.a_residual = std::sqrt(deterministic_sum(N, [&](std::size_t p) { return per_path_masked[p]; }) / nn);
    rep.max_residual = 0.0;
    for (std::size_t p = 0; p < N; ++p) {
      for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t c = 0; c < d; ++c) {
          rep.max_residual = std::max(rep.max_residual, std::abs(rep.zeta(p, k, c) - target(p, k, c)));
        }
      }
    }
    rep.residual_ci = detail::bootstrap_half_width(N, opts.bootstrap, ens.seed() ^ (0xB0075ull + iter),
                                                   [&](const std::vector<std::size_t>& idx) {
                                                     double s = 0.0;
                                                     for (std::size_t i : idx) s += per_path[i];
                                                     return std::sqrt(s / nn);
                                                   });
    rep.iterations = iter;
    rep.trace.push_back({iter, rep.residual, rep.a_residual, rep.y(0, 0), theta});
    if (rep.residual <= opts.tol + rep.residual_ci) {
      rep.converged = true;
      break;
    }
    if (iter == opts.max_iter) break;
    if (opts.auto_damping && rep.residual > previous) theta = std::max(opts.min_damping, 0.5 * theta);
    previous = rep.residual;
    parallel_for(N, [&](std::size_t p) {
      for (std::size_t k = 0; k < K; ++k) {
        auto zt = rep.zeta.at(p, k);
        const auto tg = target.at(p, k);
        for (std::size_t c = 0; c < d; ++c) zt[c] = (1.0 - theta) * zt[c] + theta * tg[c];
        const double nz = norm2(zt);
        if (nz > cap) {
          for (std::size_t c = 0; c < d; ++c) zt[c] *= cap / nz;
        }
      }
    });
  }
  for (std::size_t p = 0; p < N && !rep.clip_active; ++p) {
    for (std::size_t k = 0; k < K; ++k) {
      if (norm2(target.at(p, k)) > cap) {
        rep.clip_active = true;
        break;
      }
    }
  }

  // Diagnostics of the final measure.
  const PathDensity dens = path_density(ens, rep.zeta, opts.form, opts.clip);
  rep.floored_multipliers = dens.floored;
  rep.density_terminal.resize(N);
  for (std::size_t p = 0; p < N; ++p) rep.density_terminal[p] = dens.R(p, K);
  const double nn = static_cast<double>(N);
  rep.ess = effective_sample_size(rep.density_terminal);
  rep.weight_mean = deterministic_sum(N, [&](std::size_t p) { return rep.density_terminal[p]; }) / nn;
  rep.weight_mean_flag = std::abs(rep.weight_mean - 1.0) > 5.0 / std::sqrt(nn);
  if (rep.ess < opts.min_ess_fraction * nn) {
    throw ImportanceWeightError("mc_solve: effective sample size " + std::to_string(rep.ess) + " < " +
                                std::to_string(opts.min_ess_fraction) +
                                " N; use more time steps or a smaller clip");
  }
  rep.y0 = rep.y(0, 0);
  const double sR = deterministic_sum(N, [&](std::size_t p) { return rep.density_terminal[p]; });
  const double sRx = deterministic_sum(N, [&](std::size_t p) { return rep.density_terminal[p] * leaves[p]; });
  rep.y0_direct = sRx / sR;
  rep.y0_ci = detail::bootstrap_half_width(N, opts.bootstrap, ens.seed() ^ 0xC1ull,
                                           [&](const std::vector<std::size_t>& idx) {
                                             double a = 0.0, b = 0.0;
                                             for (std::size_t i : idx) {
                                               a += rep.density_terminal[i] * leaves[i];
                                               b += rep.density_terminal[i];
                                             }
                                             return a / b;
                                           });
  // e_rep = E_Q[(xi - Y_0 - sum Z dW^Q)^2].
  const double num = deterministic_sum(N, [&](std::size_t p) {
    double s = leaves[p] - rep.y0;
    for (std::size_t k = 0; k < K; ++k) {
      const auto z = rep.z.at(p, k);
      const auto zt = rep.zeta.at(p, k);
      const auto dw = ens.dw(p, k);
      for (std::size_t c = 0; c < d; ++c) s -= z[c] * (dw[c] - zt[c] * dt);
    }
    return rep.density_terminal[p] * s * s;
  });
  rep.e_rep = num / sR;
  return rep;
}

}  // namespace mbsde::mc

