#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <vector>

#include "mbsde/errors.hpp"

namespace mbsde {

/// Nodes and weights for E[h(X)], X ~ N(0, 1).
struct GaussRule {
  std::vector<double> nodes;
  std::vector<double> weights;
};

/// n-point Gauss-Hermite rule, rescaled to the standard normal law so the
/// weights sum to 1. Newton iteration on the orthonormal Hermite recurrence.
inline GaussRule gauss_hermite(std::size_t n) {
  if (n == 0 || n > 200) throw DomainError("gauss_hermite: node count must be in [1, 200]");
  std::vector<double> x(n), w(n);
  const double pim4 = 1.0 / std::pow(std::numbers::pi, 0.25);
  const std::size_t m = (n + 1) / 2;
  const double nn = static_cast<double>(n);
  double z = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (i == 0) {
      z = std::sqrt(2.0 * nn + 1.0) - 1.85575 * std::pow(2.0 * nn + 1.0, -1.0 / 6.0);
    } else if (i == 1) {
      z -= 1.14 * std::pow(nn, 0.426) / z;
    } else if (i == 2) {
      z = 1.86 * z - 0.86 * x[0];
    } else if (i == 3) {
      z = 1.91 * z - 0.91 * x[1];
    } else {
      z = 2.0 * z - x[i - 2];
    }
    double pp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p1 = pim4;
      double p2 = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double p3 = p2;
        p2 = p1;
        const double jj = static_cast<double>(j);
        p1 = z * std::sqrt(2.0 / (jj + 1.0)) * p2 - std::sqrt(jj / (jj + 1.0)) * p3;
      }
      pp = std::sqrt(2.0 * nn) * p2;
      const double z1 = z;
      z = z1 - p1 / pp;
      if (std::abs(z - z1) <= 1e-15 * std::max(1.0, std::abs(z))) break;
    }
    // The middle root of an odd rule is 0; Newton leaves ulp-level noise.
    if (2 * i + 1 == n) z = 0.0;
    x[i] = z;
    x[n - 1 - i] = -z;
    w[i] = 2.0 / (pp * pp);
    w[n - 1 - i] = w[i];
  }
  GaussRule rule;
  rule.nodes.resize(n);
  rule.weights.resize(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    rule.nodes[i] = std::numbers::sqrt2 * x[i];
    rule.weights[i] = w[i] / std::sqrt(std::numbers::pi);
    total += rule.weights[i];
  }
  // Remove the last ulps of drift so weights sum to 1.
  for (double& wi : rule.weights) wi /= total;
  return rule;
}

}  // namespace mbsde
