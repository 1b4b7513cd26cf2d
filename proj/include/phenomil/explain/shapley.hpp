#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "phenomil/core/error.hpp"
#include "phenomil/core/rng.hpp"

namespace phenomil::explain {

/// Value function over a full feature point; absent features hold their
/// baseline value.
using ValueFn = std::function<double(std::span<const double>)>;

enum class ShapleyMethod { kExact, kPermutation };

struct ShapleyResult {
  std::vector<std::string> feature_names;
  std::vector<double> values;
  double base_value = 0.0;
  double full_value = 0.0;
  ShapleyMethod method = ShapleyMethod::kExact;
  std::optional<std::size_t> n_permutations;
  std::optional<std::uint64_t> seed;

  /// sum(phi) - (f(x) - f(baseline))
  double efficiency_gap() const {
    return std::accumulate(values.begin(), values.end(), 0.0) - (full_value - base_value);
  }
};

inline constexpr std::size_t kExactShapleyLimit = 20;

inline void mix_point(std::span<const double> x, std::span<const double> baseline, std::uint32_t mask,
                      std::vector<double>& out) {
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (mask >> i) & 1u ? x[i] : baseline[i];
}

/// Exact enumeration over all 2^n coalitions:
/// phi_i = sum_{S without i} |S|! (n - |S| - 1)! / n! [f(S + i) - f(S)].
inline ShapleyResult shapley_exact(const ValueFn& f, std::span<const double> x, std::span<const double> baseline) {
  const std::size_t n = x.size();
  if (baseline.size() != n) throw ShapeError("shapley: x and baseline differ in length");
  if (n > kExactShapleyLimit) {
    throw BudgetError("exact Shapley over " + std::to_string(n) + " features exceeds the 2^20 budget; use shapley_sampled");
  }
  const std::uint32_t full = n == 0 ? 0u : static_cast<std::uint32_t>((1ull << n) - 1);
  std::vector<double> value(std::size_t{1} << n);
  std::vector<double> point(n);
  for (std::uint32_t mask = 0; mask <= full; ++mask) {
    mix_point(x, baseline, mask, point);
    value[mask] = f(point);
    if (mask == full) break;
  }
  // weight[s] = s! (n-s-1)! / n! = 1 / (n * C(n-1, s))
  std::vector<double> weight(n, 0.0);
  for (std::size_t s = 0; s < n; ++s) {
    double binom = 1.0;
    for (std::size_t k = 1; k <= s; ++k) binom = binom * static_cast<double>(n - 1 - s + k) / static_cast<double>(k);
    weight[s] = 1.0 / (static_cast<double>(n) * binom);
  }
  ShapleyResult r;
  r.values.assign(n, 0.0);
  for (std::uint32_t mask = 0; mask <= full; ++mask) {
    const auto size = static_cast<std::size_t>(std::popcount(mask));
    for (std::size_t i = 0; i < n; ++i) {
      if ((mask >> i) & 1u) continue;
      r.values[i] += weight[size] * (value[mask | (1u << i)] - value[mask]);
    }
    if (mask == full) break;
  }
  r.base_value = value[0];
  r.full_value = value[full];
  r.method = ShapleyMethod::kExact;
  return r;
}

/// Permutation-sampling estimator: each sampled ordering adds features one
/// at a time and credits each with its marginal change.
inline ShapleyResult shapley_sampled(const ValueFn& f, std::span<const double> x, std::span<const double> baseline,
                                     std::size_t n_permutations, std::uint64_t seed) {
  const std::size_t n = x.size();
  if (baseline.size() != n) throw ShapeError("shapley: x and baseline differ in length");
  if (n_permutations < 1) throw ConfigError("shapley_sampled needs n_permutations >= 1");
  Rng rng(derive_seed(seed, "shapley-permutations"));
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<double> point(baseline.begin(), baseline.end());
  ShapleyResult r;
  r.values.assign(n, 0.0);
  r.base_value = f(point);
  for (std::size_t p = 0; p < n_permutations; ++p) {
    std::shuffle(perm.begin(), perm.end(), rng);
    std::copy(baseline.begin(), baseline.end(), point.begin());
    double prev = r.base_value;
    for (auto i : perm) {
      point[i] = x[i];
      const double cur = f(point);
      r.values[i] += cur - prev;
      prev = cur;
    }
  }
  for (auto& v : r.values) v /= static_cast<double>(n_permutations);
  r.full_value = f(x);
  r.method = ShapleyMethod::kPermutation;
  r.n_permutations = n_permutations;
  r.seed = seed;
  return r;
}

}  // namespace phenomil::explain
