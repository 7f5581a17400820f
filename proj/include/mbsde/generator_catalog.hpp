#pragma once

#include <sstream>
#include <string>
#include <vector>

#include "mbsde/generators.hpp"
#include "mbsde/terminal.hpp"

namespace mbsde {

/// Named generating functions accepted in configs.
///   zero                 g = 0
///   constant_b           g = b e1                          (b)
///   half_z               g = gamma z                       (gamma, default 1/2)
///   sign_c               g = c z/|z|, g(0) = at_zero e1    (c, at_zero)
///   random_bound_linear  g = a z + phi_s e1                (a; phi from `bound`)
///   y_coupled            g = (b + kappa clamp(y,-K,K)) e1  (b, kappa, K)
inline GeneratorG make_generator(const std::string& name, const ParamMap& params, std::size_t d,
                                 RandomBoundPtr bound = nullptr) {
  using detail::param_or;
  using detail::reject_unknown;
  if (d == 0) throw DomainError("generator: dimension must be positive");
  GeneratorTraits traits;
  if (name == "zero") {
    reject_unknown(params, {}, name);
    traits.depends_on_y = false;
    return GeneratorG(
        d, [](const State&, double, std::span<const double>, std::span<double> out) {
          std::fill(out.begin(), out.end(), 0.0);
        },
        Bounded{0.0}, traits, "zero");
  }
  if (name == "constant_b") {
    reject_unknown(params, {"b"}, name);
    const double b = param_or(params, "b", 0.2);
    traits.depends_on_y = false;
    return GeneratorG(
        d, [b](const State&, double, std::span<const double>, std::span<double> out) {
          std::fill(out.begin(), out.end(), 0.0);
          out[0] = b;
        },
        Bounded{std::abs(b)}, traits, "constant_b");
  }
  if (name == "half_z") {
    reject_unknown(params, {"gamma"}, name);
    const double gamma = param_or(params, "gamma", 0.5);
    traits.depends_on_y = false;
    return GeneratorG(
        d, [gamma](const State&, double, std::span<const double> z, std::span<double> out) {
          for (std::size_t c = 0; c < z.size(); ++c) out[c] = gamma * z[c];
        },
        Linear{std::abs(gamma), nullptr}, traits, "half_z");
  }
  if (name == "sign_c") {
    reject_unknown(params, {"c", "at_zero"}, name);
    const double c = param_or(params, "c", 0.3);
    const double at_zero = param_or(params, "at_zero", 0.0);
    traits.depends_on_y = false;
    traits.continuity = Continuity::off_z0;
    return GeneratorG(
        d,
        [c, at_zero](const State&, double, std::span<const double> z, std::span<double> out) {
          const double zn = norm2(z);
          if (zn == 0.0) {
            std::fill(out.begin(), out.end(), 0.0);
            out[0] = at_zero;
            return;
          }
          for (std::size_t i = 0; i < z.size(); ++i) out[i] = c * z[i] / zn;
        },
        Bounded{std::max(std::abs(c), std::abs(at_zero))}, traits, "sign_c");
  }
  if (name == "random_bound_linear") {
    reject_unknown(params, {"a"}, name);
    const double a = param_or(params, "a", 0.5);
    if (!bound) bound = make_random_bound("abs_tanh", 0.5, 0.5);
    traits.depends_on_y = false;
    traits.path_dependent = bound->path_dependent;
    return GeneratorG(
        d,
        [a, bound](const State& s, double, std::span<const double> z, std::span<double> out) {
          for (std::size_t c = 0; c < z.size(); ++c) out[c] = a * z[c];
          out[0] += (*bound)(s);
        },
        Linear{std::max(std::abs(a), 1.0), bound}, traits, "random_bound_linear");
  }
  if (name == "y_coupled") {
    reject_unknown(params, {"b", "kappa", "K"}, name);
    const double b = param_or(params, "b", 0.1);
    const double kappa = param_or(params, "kappa", 0.5);
    const double K = param_or(params, "K", 1.0);
    if (!(K > 0.0)) throw DomainError("y_coupled: K must be positive");
    return GeneratorG(
        d,
        [b, kappa, K](const State&, double y, std::span<const double>, std::span<double> out) {
          std::fill(out.begin(), out.end(), 0.0);
          out[0] = b + kappa * std::clamp(y, -K, K);
        },
        Bounded{std::abs(b) + std::abs(kappa) * K}, traits, "y_coupled");
  }
  throw DomainError("unknown generator '" + name + "'");
}

namespace detail {
inline std::vector<double> parse_numbers(const std::string& text, const std::string& what) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw DomainError("transform '" + what + "': bad number '" + item + "'");
    }
  }
  return out;
}

inline std::size_t as_count(double v, const std::string& what) {
  if (!(v >= 1.0) || v != std::floor(v)) {
    throw DomainError("transform '" + what + "': expected a positive integer");
  }
  return static_cast<std::size_t>(v);
}
}  // namespace detail

/// Applies one transform of a config stack:
///   clamp_y:K        g(.,clamp(y),z)
///   truncate:n,m     g_nm built from f = z.g
///   mollify:eps      Gaussian mollification (Gauss-Hermite, 21 nodes)
///   inf_convolve:n,K hat generator of the inf-convolution f_n of f = z.g
///   hat              hat generator of f = z.g
inline GeneratorG apply_transform(const GeneratorG& g, const std::string& step) {
  const auto colon = step.find(':');
  const std::string op = step.substr(0, colon);
  const std::string args = colon == std::string::npos ? "" : step.substr(colon + 1);
  const auto nums = args.empty() ? std::vector<double>{} : detail::parse_numbers(args, step);
  auto expect = [&](std::size_t count) {
    if (nums.size() != count) {
      throw DomainError("transform '" + step + "': expected " + std::to_string(count) +
                        " argument(s)");
    }
  };
  if (op == "clamp_y") {
    expect(1);
    return clamp_y(g, nums[0]);
  }
  if (op == "truncate") {
    expect(2);
    return truncate_nm(g_to_f(g), {detail::as_count(nums[0], step), detail::as_count(nums[1], step)}).g;
  }
  if (op == "mollify") {
    expect(1);
    MollifierSpec spec;
    spec.eps = nums[0];
    return mollify(g, spec);
  }
  if (op == "inf_convolve") {
    expect(2);
    InfConvolutionSpec spec;
    spec.n = detail::as_count(nums[0], step);
    spec.K_y = nums[1];
    return hat_generator(inf_convolve(g_to_f(g), spec));
  }
  if (op == "hat") {
    expect(0);
    return hat_generator(g_to_f(g));
  }
  throw DomainError("unknown transform '" + op + "'");
}

inline GeneratorG apply_transforms(GeneratorG g, const std::vector<std::string>& stack) {
  for (const auto& step : stack) g = apply_transform(g, step);
  return g;
}

}  // namespace mbsde
