#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "mbsde/core.hpp"
#include "mbsde/quadrature.hpp"

namespace mbsde {

using Vec = std::vector<double>;

inline double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// ---------------------------------------------------------------------------
// Random bound phi_s of the linear-growth hypothesis |g| <= C(|z| + phi_s).

struct RandomBound {
  std::string kind;
  double scale = 0.0;
  double budget = kInf;  ///< declared BMO budget
  bool path_dependent = false;
  std::function<double(const State&)> phi;

  double operator()(const State& s) const { return phi ? phi(s) : 0.0; }
};
using RandomBoundPtr = std::shared_ptr<const RandomBound>;

/// constant: phi = scale; abs_tanh: scale |tanh W^1|; indicator: scale 1{W^1 > 0};
/// running_max: scale min(1, max_{u<=t} W^1_u) (path-dependent).
inline RandomBoundPtr make_random_bound(const std::string& kind, double scale, double budget) {
  if (!(scale >= 0.0)) throw DomainError("random bound: scale must be nonnegative");
  auto rb = std::make_shared<RandomBound>();
  rb->kind = kind;
  rb->scale = scale;
  rb->budget = budget;
  if (kind == "constant") {
    rb->phi = [scale](const State&) { return scale; };
  } else if (kind == "abs_tanh") {
    rb->phi = [scale](const State& s) { return scale * std::abs(std::tanh(s.w1())); };
  } else if (kind == "indicator") {
    rb->phi = [scale](const State& s) { return s.w1() > 0.0 ? scale : 0.0; };
  } else if (kind == "running_max") {
    rb->path_dependent = true;
    rb->phi = [scale](const State& s) {
      if (std::isnan(s.running_max)) {
        throw DomainError("running_max random bound needs a path-tracking engine");
      }
      return scale * std::min(1.0, std::max(0.0, s.running_max));
    };
  } else {
    throw DomainError("unknown random bound kind '" + kind + "'");
  }
  return rb;
}

// ---------------------------------------------------------------------------
// Growth tags.

struct Untagged {};
struct Bounded {
  double M = 0.0;
};
/// |g(s,y,z)| <= C (|z| + phi_s)
struct Linear {
  double C = 0.0;
  RandomBoundPtr phi;
};
/// |f(s,y,z)| <= C |z| (|z| + phi_s)
struct Subquadratic {
  double C = 0.0;
  RandomBoundPtr phi;
};
using GrowthG = std::variant<Untagged, Bounded, Linear>;
using GrowthF = std::variant<Untagged, Bounded, Subquadratic>;

enum class Continuity { everywhere, off_z0 };

struct GeneratorTraits {
  bool depends_on_y = true;
  bool path_dependent = false;
  Continuity continuity = Continuity::everywhere;
};

/// Generating function g : (state, y, z) -> R^d. Evaluators must be pure.
class GeneratorG {
 public:
  using Fn = std::function<void(const State&, double, std::span<const double>, std::span<double>)>;

  GeneratorG(std::size_t dim, Fn fn, GrowthG growth = Untagged{}, GeneratorTraits traits = {},
             std::string label = "g")
      : dim_(dim), fn_(std::move(fn)), growth_(std::move(growth)), traits_(traits),
        label_(std::move(label)) {
    if (dim_ == 0) throw DomainError("generator: dimension must be positive");
  }

  std::size_t dim() const { return dim_; }
  const GrowthG& growth() const { return growth_; }
  const GeneratorTraits& traits() const { return traits_; }
  const std::string& label() const { return label_; }

  void evaluate(const State& s, double y, std::span<const double> z, std::span<double> out) const {
    fn_(s, y, z, out);
  }
  Vec operator()(const State& s, double y, std::span<const double> z) const {
    Vec out(dim_);
    fn_(s, y, z, out);
    return out;
  }
  /// Scalar convenience for d = 1.
  double operator()(const State& s, double y, double z) const {
    double out = 0.0;
    fn_(s, y, std::span<const double>(&z, 1), std::span<double>(&out, 1));
    return out;
  }

  GeneratorG relabeled(std::string label) const {
    GeneratorG g = *this;
    g.label_ = std::move(label);
    return g;
  }

 private:
  std::size_t dim_;
  Fn fn_;
  GrowthG growth_;
  GeneratorTraits traits_;
  std::string label_;
};

/// Scalar generator f : (state, y, z) -> R, optionally with an oracle for
/// the z-gradient at z = 0.
class GeneratorF {
 public:
  using Fn = std::function<double(const State&, double, std::span<const double>)>;
  using GradFn = std::function<void(const State&, double, std::span<double>)>;

  GeneratorF(std::size_t dim, Fn fn, GrowthF growth = Untagged{}, GeneratorTraits traits = {},
             std::string label = "f", GradFn grad_at_zero = {})
      : dim_(dim), fn_(std::move(fn)), growth_(std::move(growth)), traits_(traits),
        label_(std::move(label)), grad_(std::move(grad_at_zero)) {
    if (dim_ == 0) throw DomainError("generator: dimension must be positive");
  }

  std::size_t dim() const { return dim_; }
  const GrowthF& growth() const { return growth_; }
  const GeneratorTraits& traits() const { return traits_; }
  const std::string& label() const { return label_; }
  bool has_gradient_oracle() const { return static_cast<bool>(grad_); }
  const GradFn& gradient_oracle() const { return grad_; }

  double operator()(const State& s, double y, std::span<const double> z) const {
    return fn_(s, y, z);
  }
  double operator()(const State& s, double y, double z) const {
    return fn_(s, y, std::span<const double>(&z, 1));
  }

 private:
  std::size_t dim_;
  Fn fn_;
  GrowthF growth_;
  GeneratorTraits traits_;
  std::string label_;
  GradFn grad_;
};

// ---------------------------------------------------------------------------
// Probe grids.

/// A probe state owns its W buffer so it can hand out State views.
struct ProbeState {
  double t = 0.0;
  std::size_t step = 0;
  Vec w;
  double running_max = 0.0;

  State view() const { return State{t, step, w, running_max}; }
};

struct ProbePoint {
  std::size_t state = 0;  ///< index into ProbeGrid::states
  double y = 0.0;
  Vec z;
};

struct ProbeGrid {
  std::vector<ProbeState> states;
  std::vector<ProbePoint> points;

  bool empty() const { return points.empty(); }
  State state_of(const ProbePoint& p) const { return states[p.state].view(); }

  /// (t=0, W=0) and (t=1/2, W=+-1).
  static std::vector<ProbeState> default_states(std::size_t d) {
    std::vector<ProbeState> s;
    Vec zero(d, 0.0), up(d, 0.0), down(d, 0.0);
    up[0] = 1.0;
    down[0] = -1.0;
    s.push_back({0.0, 0, zero, 0.0});
    s.push_back({0.5, 0, up, 1.0});
    s.push_back({0.5, 0, down, 0.5});
    return s;
  }

  /// Up to `count` unit directions in R^d: +-axes, then +-(1,..,1)/sqrt(d),
  /// or evenly spaced angles when d = 2.
  static std::vector<Vec> directions(std::size_t d, std::size_t count = 8) {
    std::vector<Vec> dirs;
    if (d == 2) {
      for (std::size_t j = 0; j < count; ++j) {
        const double a = 2.0 * std::numbers::pi * static_cast<double>(j) / static_cast<double>(count);
        dirs.push_back({std::cos(a), std::sin(a)});
      }
      return dirs;
    }
    for (std::size_t i = 0; i < d && dirs.size() < count; ++i) {
      for (double sgn : {1.0, -1.0}) {
        Vec u(d, 0.0);
        u[i] = sgn;
        if (dirs.size() < count) dirs.push_back(u);
      }
    }
    if (d > 1) {
      for (double sgn : {1.0, -1.0}) {
        if (dirs.size() < count) dirs.push_back(Vec(d, sgn / std::sqrt(static_cast<double>(d))));
      }
    }
    return dirs;
  }

  /// y: 9 points on [-K_y, K_y]; z: shells {0, 0.1, 0.5, 1, 2, 5, 10} x 8 directions.
  static ProbeGrid standard(std::size_t d, double K_y,
                            std::vector<ProbeState> probe_states = {}) {
    ProbeGrid grid;
    grid.states = probe_states.empty() ? default_states(d) : std::move(probe_states);
    const auto dirs = directions(d);
    const double shells[] = {0.0, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0};
    for (std::size_t s = 0; s < grid.states.size(); ++s) {
      for (int iy = 0; iy < 9; ++iy) {
        const double y = -K_y + 2.0 * K_y * static_cast<double>(iy) / 8.0;
        for (double r : shells) {
          if (r == 0.0) {
            grid.points.push_back({s, y, Vec(d, 0.0)});
            continue;
          }
          for (const auto& u : dirs) {
            Vec z(d);
            for (std::size_t c = 0; c < d; ++c) z[c] = r * u[c];
            grid.points.push_back({s, y, std::move(z)});
          }
        }
      }
    }
    return grid;
  }

  /// Tensor grid for d = 1: every y in ys times every z in zs at each state.
  static ProbeGrid tensor(const Vec& ys, const Vec& zs, std::vector<ProbeState> probe_states = {}) {
    ProbeGrid grid;
    grid.states = probe_states.empty() ? default_states(1) : std::move(probe_states);
    for (std::size_t s = 0; s < grid.states.size(); ++s) {
      for (double y : ys) {
        for (double z : zs) grid.points.push_back({s, y, Vec{z}});
      }
    }
    return grid;
  }

  /// Drops points with |z| < r (compacts avoiding z = 0).
  ProbeGrid excluding_small_z(double r) const {
    ProbeGrid out;
    out.states = states;
    for (const auto& p : points) {
      if (norm2(p.z) >= r) out.points.push_back(p);
    }
    return out;
  }
};

/// Largest amount by which g exceeds its declared growth bound on the probes
/// (<= 0 means the tag holds on the grid).
inline double growth_violation(const GeneratorG& g, const ProbeGrid& probes) {
  double worst = -kInf;
  Vec out(g.dim());
  for (const auto& p : probes.points) {
    const State s = probes.state_of(p);
    g.evaluate(s, p.y, p.z, out);
    const double mag = norm2(out);
    double allowed = kInf;
    if (const auto* b = std::get_if<Bounded>(&g.growth())) {
      allowed = b->M;
    } else if (const auto* l = std::get_if<Linear>(&g.growth())) {
      allowed = l->C * (norm2(p.z) + (l->phi ? (*l->phi)(s) : 0.0));
    }
    worst = std::max(worst, mag - allowed);
  }
  return worst;
}

inline double growth_violation(const GeneratorF& f, const ProbeGrid& probes) {
  double worst = -kInf;
  for (const auto& p : probes.points) {
    const State s = probes.state_of(p);
    const double mag = std::abs(f(s, p.y, p.z));
    double allowed = kInf;
    if (const auto* b = std::get_if<Bounded>(&f.growth())) {
      allowed = b->M;
    } else if (const auto* q = std::get_if<Subquadratic>(&f.growth())) {
      const double zn = norm2(p.z);
      allowed = q->C * zn * (zn + (q->phi ? (*q->phi)(s) : 0.0));
    }
    worst = std::max(worst, mag - allowed);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// f <-> g conversions.

/// f(s,y,z) := z . g(s,y,z). The gradient oracle at z = 0 is g(s,y,0) when g
/// is continuous there.
inline GeneratorF g_to_f(const GeneratorG& g) {
  const std::size_t d = g.dim();
  GrowthF growth = Untagged{};
  if (const auto* l = std::get_if<Linear>(&g.growth())) {
    growth = Subquadratic{l->C, l->phi};
  } else if (const auto* b = std::get_if<Bounded>(&g.growth())) {
    growth = Subquadratic{1.0, make_random_bound("constant", b->M, kInf)};
  }
  GeneratorF::GradFn grad;
  if (g.traits().continuity == Continuity::everywhere) {
    grad = [g, d](const State& s, double y, std::span<double> out) {
      const Vec zero(d, 0.0);
      g.evaluate(s, y, zero, out);
    };
  }
  return GeneratorF(
      d,
      [g, d](const State& s, double y, std::span<const double> z) {
        double buf[8];
        Vec heap;
        std::span<double> out;
        if (d <= 8) {
          out = std::span<double>(buf, d);
        } else {
          heap.resize(d);
          out = heap;
        }
        g.evaluate(s, y, z, out);
        return dot(z, out);
      },
      growth, g.traits(), "z.(" + g.label() + ")", grad);
}

struct FToGOptions {
  double fd_step = 1e-5;
  double diff_tol = 1e-3;
  double zero_tol = 1e-12;
  std::size_t directions = 8;
  double K_y = 1.0;
};

namespace detail {

/// Central finite-difference gradient of z -> f(s,y,z) at z = 0.
inline void fd_gradient(const GeneratorF& f, const State& s, double y, double h,
                        std::span<double> out) {
  const std::size_t d = f.dim();
  Vec z(d, 0.0);
  for (std::size_t c = 0; c < d; ++c) {
    z[c] = h;
    const double fp = f(s, y, z);
    z[c] = -h;
    const double fm = f(s, y, z);
    z[c] = 0.0;
    out[c] = (fp - fm) / (2.0 * h);
  }
}

inline void gradient_at_zero(const GeneratorF& f, const State& s, double y, double h,
                             std::span<double> out) {
  if (f.has_gradient_oracle()) {
    f.gradient_oracle()(s, y, out);
  } else {
    fd_gradient(f, s, y, h, out);
  }
}

}  // namespace detail

/// g(z) := z/|z|^2 (f(z) - z . grad f(0)) + grad f(0), g(0) := grad f(0).
///
/// Throws NotRepresentableError when f(.,y,0) != 0 on a probe or when the
/// one-sided directional derivatives at 0 disagree with the gradient
/// (f not differentiable at 0).
inline GeneratorG f_to_g(const GeneratorF& f, const FToGOptions& opts = {}) {
  const std::size_t d = f.dim();
  const ProbeGrid probes = ProbeGrid::standard(d, opts.K_y);
  const auto dirs = ProbeGrid::directions(d, opts.directions);
  Vec grad(d), zero(d, 0.0), hz(d);
  for (std::size_t si = 0; si < probes.states.size(); ++si) {
    const State s = probes.states[si].view();
    for (int iy = 0; iy < 9; ++iy) {
      const double y = -opts.K_y + 2.0 * opts.K_y * static_cast<double>(iy) / 8.0;
      const double f0 = f(s, y, zero);
      if (std::abs(f0) > opts.zero_tol) {
        throw NotRepresentableError("f_to_g: f(.,y,0) = " + std::to_string(f0) +
                                    " != 0, so f is not z.g(z) for any g");
      }
      detail::gradient_at_zero(f, s, y, opts.fd_step, grad);
      const double scale = std::max(1.0, norm2(grad));
      for (const auto& u : dirs) {
        for (std::size_t c = 0; c < d; ++c) hz[c] = opts.fd_step * u[c];
        const double one_sided = (f(s, y, hz) - f0) / opts.fd_step;
        if (std::abs(one_sided - dot(grad, u)) > opts.diff_tol * scale) {
          throw NotRepresentableError(
              "f_to_g: f is not differentiable at z = 0 (directional derivative " +
              std::to_string(one_sided) + " vs gradient " + std::to_string(dot(grad, u)) + ")");
        }
      }
    }
  }
  const double h = opts.fd_step;
  GeneratorTraits traits = f.traits();
  traits.continuity = Continuity::everywhere;
  return GeneratorG(
      d,
      [f, d, h](const State& s, double y, std::span<const double> z, std::span<double> out) {
        Vec grad(d);
        detail::gradient_at_zero(f, s, y, h, grad);
        const double zz = dot(z, z);
        if (zz == 0.0) {
          std::copy(grad.begin(), grad.end(), out.begin());
          return;
        }
        const double coef = (f(s, y, z) - dot(z, grad)) / zz;
        for (std::size_t c = 0; c < d; ++c) out[c] = coef * z[c] + grad[c];
      },
      Untagged{}, traits, "g[" + f.label() + "]");
}

/// hat g(z) := z/|z|^2 1{z != 0} f(z). Satisfies z . hat g = f wherever
/// f(.,y,0) = 0, and hat g(.,0) = 0.
inline GeneratorG hat_generator(const GeneratorF& f) {
  const std::size_t d = f.dim();
  GrowthG growth = Untagged{};
  if (const auto* q = std::get_if<Subquadratic>(&f.growth())) growth = Linear{q->C, q->phi};
  GeneratorTraits traits = f.traits();
  traits.continuity = Continuity::off_z0;
  return GeneratorG(
      d,
      [f, d](const State& s, double y, std::span<const double> z, std::span<double> out) {
        const double zz = dot(z, z);
        if (zz == 0.0) {
          std::fill(out.begin(), out.end(), 0.0);
          return;
        }
        const double coef = f(s, y, z) / zz;
        for (std::size_t c = 0; c < d; ++c) out[c] = coef * z[c];
      },
      growth, traits, "hat[" + f.label() + "]");
}

// ---------------------------------------------------------------------------
// Gaussian mollification.

struct MollifierSpec {
  enum class Rule { gauss_hermite, monte_carlo };
  double eps = 0.01;  ///< kernel variance
  Rule rule = Rule::gauss_hermite;
  std::size_t nodes = 21;      ///< Gauss-Hermite nodes per dimension
  std::size_t samples = 4096;  ///< Monte Carlo fallback samples
  std::uint64_t seed = 0;
  bool allow_unbounded = false;  ///< test-only override of the boundedness precondition
};

namespace detail {

/// Offsets (dy, dz) and weights of the kernel rho_eps on R^{1+d}. The y axis
/// is dropped when the generator ignores y (the kernel integrates to 1 there).
struct KernelRule {
  std::size_t dz = 1;
  bool with_y = true;
  std::vector<double> offsets;  ///< per point: [dy if with_y] dz...
  std::vector<double> weights;

  std::size_t width() const { return dz + (with_y ? 1 : 0); }
  std::size_t size() const { return weights.size(); }
};

inline KernelRule kernel_rule(const MollifierSpec& spec, std::size_t d, bool with_y) {
  if (!(spec.eps > 0.0)) throw DomainError("mollify: eps must be positive");
  KernelRule rule;
  rule.dz = d;
  rule.with_y = with_y;
  const std::size_t D = rule.width();
  const double sigma = std::sqrt(spec.eps);
  const bool use_gh = spec.rule == MollifierSpec::Rule::gauss_hermite && D <= 4;
  if (use_gh) {
    const GaussRule gh = gauss_hermite(spec.nodes);
    const std::size_t n = gh.nodes.size();
    std::size_t total = 1;
    for (std::size_t i = 0; i < D; ++i) total *= n;
    rule.offsets.resize(total * D);
    rule.weights.resize(total);
    for (std::size_t idx = 0; idx < total; ++idx) {
      std::size_t rem = idx;
      double w = 1.0;
      for (std::size_t c = 0; c < D; ++c) {
        const std::size_t j = rem % n;
        rem /= n;
        rule.offsets[idx * D + c] = sigma * gh.nodes[j];
        w *= gh.weights[j];
      }
      rule.weights[idx] = w;
    }
  } else {
    std::mt19937_64 gen(spec.seed ^ 0x9e3779b97f4a7c15ull);
    std::normal_distribution<double> normal(0.0, 1.0);
    const std::size_t total = std::max<std::size_t>(1, spec.samples);
    rule.offsets.resize(total * D);
    rule.weights.assign(total, 1.0 / static_cast<double>(total));
    for (double& o : rule.offsets) o = sigma * normal(gen);
  }
  double sum = 0.0;
  for (double w : rule.weights) sum += w;
  if (std::abs(sum - 1.0) > 1e-12) throw DomainError("mollify: quadrature weights do not sum to 1");
  return rule;
}

}  // namespace detail

/// g_eps(y,z) := int g(y - y', z - z') rho_eps(y', z') d(y', z') with the
/// Gaussian kernel of variance eps. Requires a bounded g.
inline GeneratorG mollify(const GeneratorG& g, const MollifierSpec& spec) {
  const auto* bounded = std::get_if<Bounded>(&g.growth());
  if (!bounded && !spec.allow_unbounded) {
    throw DomainError("mollify: generator must carry a bounded(M) growth tag");
  }
  const std::size_t d = g.dim();
  auto rule = std::make_shared<const detail::KernelRule>(
      detail::kernel_rule(spec, d, g.traits().depends_on_y));
  GrowthG growth = bounded ? GrowthG(*bounded) : GrowthG(Untagged{});
  GeneratorTraits traits = g.traits();
  traits.continuity = Continuity::everywhere;
  return GeneratorG(
      d,
      [g, rule, d](const State& s, double y, std::span<const double> z, std::span<double> out) {
        const std::size_t D = rule->width();
        const std::size_t off = rule->with_y ? 1 : 0;
        Vec zs(d), val(d);
        std::fill(out.begin(), out.end(), 0.0);
        for (std::size_t j = 0; j < rule->size(); ++j) {
          const double* o = rule->offsets.data() + j * D;
          const double ys = rule->with_y ? y - o[0] : y;
          for (std::size_t c = 0; c < d; ++c) zs[c] = z[c] - o[off + c];
          g.evaluate(s, ys, zs, val);
          for (std::size_t c = 0; c < d; ++c) out[c] += rule->weights[j] * val[c];
        }
      },
      growth, traits, "mollify(" + g.label() + "," + std::to_string(spec.eps) + ")");
}

inline GeneratorF mollify(const GeneratorF& f, const MollifierSpec& spec) {
  const auto* bounded = std::get_if<Bounded>(&f.growth());
  if (!bounded && !spec.allow_unbounded) {
    throw DomainError("mollify: generator must carry a bounded(M) growth tag");
  }
  const std::size_t d = f.dim();
  auto rule = std::make_shared<const detail::KernelRule>(
      detail::kernel_rule(spec, d, f.traits().depends_on_y));
  GrowthF growth = bounded ? GrowthF(*bounded) : GrowthF(Untagged{});
  return GeneratorF(
      d,
      [f, rule, d](const State& s, double y, std::span<const double> z) {
        const std::size_t D = rule->width();
        const std::size_t off = rule->with_y ? 1 : 0;
        Vec zs(d);
        double acc = 0.0;
        for (std::size_t j = 0; j < rule->size(); ++j) {
          const double* o = rule->offsets.data() + j * D;
          const double ys = rule->with_y ? y - o[0] : y;
          for (std::size_t c = 0; c < d; ++c) zs[c] = z[c] - o[off + c];
          acc += rule->weights[j] * f(s, ys, zs);
        }
        return acc;
      },
      growth, f.traits(), "mollify(" + f.label() + "," + std::to_string(spec.eps) + ")");
}

/// Grid maximum of |f_eps - f|: a lower bound for the sup over (y, z).
inline double sup_error_delta(const GeneratorF& f, const GeneratorF& f_eps, const ProbeGrid& probes) {
  if (probes.empty()) throw DomainError("sup_error_delta: empty probe grid");
  double worst = 0.0;
  for (const auto& p : probes.points) {
    const State s = probes.state_of(p);
    worst = std::max(worst, std::abs(f_eps(s, p.y, p.z) - f(s, p.y, p.z)));
  }
  return worst;
}

/// Grid maximum of |g_n - g| (Euclidean norm).
inline double sup_error_delta(const GeneratorG& g, const GeneratorG& g_n, const ProbeGrid& probes) {
  if (probes.empty()) throw DomainError("sup_error_delta: empty probe grid");
  double worst = 0.0;
  Vec a(g.dim()), b(g.dim());
  for (const auto& p : probes.points) {
    const State s = probes.state_of(p);
    g.evaluate(s, p.y, p.z, a);
    g_n.evaluate(s, p.y, p.z, b);
    double diff = 0.0;
    for (std::size_t c = 0; c < a.size(); ++c) diff += (a[c] - b[c]) * (a[c] - b[c]);
    worst = std::max(worst, std::sqrt(diff));
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Inf-convolution.

/// n / (0 v (t - n) ^ 1): +inf on [0, n], n/(t-n) on (n, n+1], n beyond.
inline double inf_convolution_slope(std::size_t n, double t) {
  const double nn = static_cast<double>(n);
  const double gap = std::min(std::max(t - nn, 0.0), 1.0);
  return gap == 0.0 ? kInf : nn / gap;
}

struct InfConvolutionSpec {
  std::size_t n = 1;
  double K_y = 1.0;
  /// Search radius around (y, z). 0 selects 2M for bounded(M) f (candidates
  /// further away can never win since the slope is >= n >= 1) and |z| + 2
  /// otherwise.
  double radius = 0.0;
  std::size_t radial_steps = 64;
  std::size_t directions = 32;  ///< angles used when 1 + d = 2
};

namespace detail {
inline std::vector<Vec> search_directions(std::size_t D, std::size_t angles) {
  std::vector<Vec> dirs;
  if (D == 2) {
    for (std::size_t j = 0; j < angles; ++j) {
      const double a = 2.0 * std::numbers::pi * static_cast<double>(j) / static_cast<double>(angles);
      dirs.push_back({std::cos(a), std::sin(a)});
    }
    return dirs;
  }
  for (std::size_t i = 0; i < D; ++i) {
    for (double sgn : {1.0, -1.0}) {
      Vec u(D, 0.0);
      u[i] = sgn;
      dirs.push_back(u);
    }
  }
  const std::size_t corners = std::size_t{1} << D;
  const double inv = 1.0 / std::sqrt(static_cast<double>(D));
  for (std::size_t mask = 0; mask < corners; ++mask) {
    Vec u(D);
    for (std::size_t i = 0; i < D; ++i) u[i] = ((mask >> i) & 1u) ? inv : -inv;
    dirs.push_back(u);
  }
  return dirs;
}
}  // namespace detail

/// f_n(y,z) := inf over yh in [-K,K], zh of { f(yh,zh) + n/(0 v (|z|-n) ^ 1) |(y,z)-(yh,zh)| }
/// with n/0 * 0 := 0.
///
/// The infimum runs over a finite candidate set: the point itself plus
/// radial shells around it. The set depends on (y, z) and the spec but not
/// on n, so f_n <= f_{n+1} <= f and f_n = f on |z| <= n hold exactly on any
/// grid. Queries with |y| > K_y are evaluated at the clamped y.
inline GeneratorF inf_convolve(const GeneratorF& f, const InfConvolutionSpec& spec) {
  if (spec.n == 0) throw DomainError("inf_convolve: n must be >= 1");
  if (!(spec.K_y > 0.0)) throw DomainError("inf_convolve: K_y must be positive");
  const std::size_t d = f.dim();
  const std::size_t D = d + 1;
  const auto* bounded = std::get_if<Bounded>(&f.growth());
  const double fixed_radius = spec.radius > 0.0 ? spec.radius : (bounded ? 2.0 * bounded->M : 0.0);
  auto dirs = std::make_shared<const std::vector<Vec>>(detail::search_directions(D, spec.directions));
  GrowthF growth = bounded ? GrowthF(*bounded) : GrowthF(Untagged{});
  const std::size_t J = std::max<std::size_t>(1, spec.radial_steps);
  return GeneratorF(
      d,
      [f, spec, d, dirs, fixed_radius, J](const State& s, double y, std::span<const double> z) {
        const double yc = std::clamp(y, -spec.K_y, spec.K_y);
        const double zn = norm2(z);
        const double slope = inf_convolution_slope(spec.n, zn);
        const double anchor = f(s, yc, z);
        if (!std::isfinite(slope)) return anchor;
        const double radius = fixed_radius > 0.0 ? fixed_radius : zn + 2.0;
        double best = anchor;
        Vec zh(d);
        for (std::size_t j = 1; j <= J; ++j) {
          const double rho = radius * static_cast<double>(j) / static_cast<double>(J);
          for (const auto& u : *dirs) {
            const double yh = std::clamp(yc + rho * u[0], -spec.K_y, spec.K_y);
            double dist2 = (yc - yh) * (yc - yh);
            for (std::size_t c = 0; c < d; ++c) {
              zh[c] = z[c] + rho * u[c + 1];
              dist2 += (z[c] - zh[c]) * (z[c] - zh[c]);
            }
            best = std::min(best, f(s, yh, zh) + slope * std::sqrt(dist2));
          }
        }
        return best;
      },
      growth, f.traits(), "infconv(" + f.label() + ",n=" + std::to_string(spec.n) + ")");
}

// ---------------------------------------------------------------------------
// Truncation.

struct TruncationSpec {
  std::size_t n = 1;
  std::size_t m = 1;
};

struct Truncated {
  GeneratorF f;
  GeneratorG g;
};

/// f_nm := (-n) v ( |z| ((-n) v (f/|z|) ^ m) ) ^ m, g_nm := z/|z|^2 1{z != 0} f_nm.
inline Truncated truncate_nm(const GeneratorF& f, const TruncationSpec& spec) {
  if (spec.n == 0 || spec.m == 0) throw DomainError("truncate_nm: n and m must be >= 1");
  const double n = static_cast<double>(spec.n);
  const double m = static_cast<double>(spec.m);
  const double cap = std::max(n, m);
  auto f_nm = [f, n, m](const State& s, double y, std::span<const double> z) {
    const double zn = norm2(z);
    if (zn == 0.0) return 0.0;
    const double inner = std::clamp(f(s, y, z) / zn, -n, m);
    return std::clamp(zn * inner, -n, m);
  };
  const std::string tag = "trunc(" + f.label() + "," + std::to_string(spec.n) + "," +
                          std::to_string(spec.m) + ")";
  GeneratorF tf(f.dim(), f_nm, Bounded{cap}, f.traits(), tag);
  GeneratorTraits gtraits = f.traits();
  gtraits.continuity = Continuity::off_z0;
  const std::size_t d = f.dim();
  GeneratorG tg(
      d,
      [f_nm, d](const State& s, double y, std::span<const double> z, std::span<double> out) {
        const double zz = dot(z, z);
        if (zz == 0.0) {
          std::fill(out.begin(), out.end(), 0.0);
          return;
        }
        const double coef = f_nm(s, y, z) / zz;
        for (std::size_t c = 0; c < d; ++c) out[c] = coef * z[c];
      },
      Bounded{cap}, gtraits, "g_" + tag);
  return {std::move(tf), std::move(tg)};
}

// ---------------------------------------------------------------------------
// y-clamping.

/// g~(y,z) := g((-K) v y ^ K, z).
inline GeneratorG clamp_y(const GeneratorG& g, double K_y) {
  if (!(K_y > 0.0)) throw DomainError("clamp_y: K_y must be positive");
  return GeneratorG(
      g.dim(),
      [g, K_y](const State& s, double y, std::span<const double> z, std::span<double> out) {
        g.evaluate(s, std::clamp(y, -K_y, K_y), z, out);
      },
      g.growth(), g.traits(), "clamp_y(" + g.label() + ")");
}

inline GeneratorF clamp_y(const GeneratorF& f, double K_y) {
  if (!(K_y > 0.0)) throw DomainError("clamp_y: K_y must be positive");
  return GeneratorF(
      f.dim(),
      [f, K_y](const State& s, double y, std::span<const double> z) {
        return f(s, std::clamp(y, -K_y, K_y), z);
      },
      f.growth(), f.traits(), "clamp_y(" + f.label() + ")");
}

}  // namespace mbsde
