#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <string>

#include "mbsde/core.hpp"

namespace mbsde {

using ParamMap = std::map<std::string, double>;

/// Terminal variable xi as a functional of the driver path, evaluated on the
/// State at the horizon.
struct TerminalCondition {
  std::string name;
  std::function<double(const State&)> evaluate;
  double bound = kInf;          ///< |xi| <= bound on every path (kInf if unbounded)
  bool test_only = false;       ///< unbounded builtins are only accepted by tests
  bool path_dependent = false;  ///< needs more than W_T

  double operator()(const State& s) const { return evaluate(s); }
  bool bounded() const { return std::isfinite(bound); }
};

namespace detail {
inline double param_or(const ParamMap& params, const std::string& key, double fallback) {
  const auto it = params.find(key);
  return it == params.end() ? fallback : it->second;
}

inline void reject_unknown(const ParamMap& params, const std::set<std::string>& allowed,
                           const std::string& what) {
  for (const auto& [key, value] : params) {
    if (!allowed.count(key)) throw DomainError(what + ": unknown parameter '" + key + "'");
  }
}
}  // namespace detail

/// Built-in terminal conditions. All but raw_WT are bounded; all read the
/// first coordinate of W_T.
///   constant        xi = c                       (c, default 0)
///   tanh_WT         xi = a tanh(W_T)             (a, default 1)
///   sin_WT          xi = a sin(W_T)              (a, default 1)
///   indicator_above xi = 1{W_T > level}          (level, default 0)
///   clipped_WT      xi = clamp(W_T, -L, L)       (L, default 1)
///   raw_WT          xi = W_T, unbounded, test-only
inline TerminalCondition terminal_builtin(const std::string& name, const ParamMap& params = {}) {
  using detail::param_or;
  TerminalCondition tc;
  tc.name = name;
  if (name == "constant") {
    detail::reject_unknown(params, {"c"}, name);
    const double c = param_or(params, "c", 0.0);
    tc.evaluate = [c](const State&) { return c; };
    tc.bound = std::abs(c);
  } else if (name == "tanh_WT") {
    detail::reject_unknown(params, {"a"}, name);
    const double a = param_or(params, "a", 1.0);
    tc.evaluate = [a](const State& s) { return a * std::tanh(s.w1()); };
    tc.bound = std::abs(a);
  } else if (name == "sin_WT") {
    detail::reject_unknown(params, {"a"}, name);
    const double a = param_or(params, "a", 1.0);
    tc.evaluate = [a](const State& s) { return a * std::sin(s.w1()); };
    tc.bound = std::abs(a);
  } else if (name == "indicator_above") {
    detail::reject_unknown(params, {"level"}, name);
    const double level = param_or(params, "level", 0.0);
    tc.evaluate = [level](const State& s) { return s.w1() > level ? 1.0 : 0.0; };
    tc.bound = 1.0;
  } else if (name == "clipped_WT") {
    detail::reject_unknown(params, {"L"}, name);
    const double L = param_or(params, "L", 1.0);
    if (!(L > 0.0)) throw DomainError("clipped_WT: L must be positive");
    tc.evaluate = [L](const State& s) { return std::clamp(s.w1(), -L, L); };
    tc.bound = L;
  } else if (name == "raw_WT") {
    detail::reject_unknown(params, {}, name);
    tc.evaluate = [](const State& s) { return s.w1(); };
    tc.bound = kInf;
    tc.test_only = true;
  } else {
    throw DomainError("unknown terminal condition '" + name + "'");
  }
  return tc;
}

/// xi + shift, keeping the bound honest.
inline TerminalCondition shifted(const TerminalCondition& base, double shift) {
  TerminalCondition tc = base;
  tc.name = base.name + "+shift";
  auto inner = base.evaluate;
  tc.evaluate = [inner, shift](const State& s) { return inner(s) + shift; };
  tc.bound = base.bound + std::abs(shift);
  return tc;
}

}  // namespace mbsde
