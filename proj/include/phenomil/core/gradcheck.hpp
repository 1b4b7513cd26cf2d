#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "phenomil/core/error.hpp"
#include "phenomil/core/param.hpp"
#include "phenomil/core/rng.hpp"

namespace phenomil {

/// Loss callback for gradient checking. When `accumulate_grad` is true the
/// callback must also add the analytic gradient into each ParamTensor::grad.
using LossFn = std::function<double(bool accumulate_grad)>;

struct GradCheckOptions {
  std::size_t probe_count = 32;
  double eps = 1e-5;
  double denominator_floor = 1e-8;
  std::uint64_t seed = 0;
};

struct GradProbe {
  std::string tensor;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double relative_error = 0.0;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::vector<GradProbe> probes;
};

inline double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

/// Compares analytic gradients against central differences at randomly
/// chosen scalar parameters. Probes are drawn uniformly over all scalar
/// entries of `params`, without replacement when possible.
inline GradCheckReport check_gradients(const LossFn& loss, const ParamRefs& params, const GradCheckOptions& opts) {
  zero_grads(params);
  const double base = loss(true);
  const double again = loss(false);
  if (base != again) {
    throw DeterminismError("loss is not deterministic: " + std::to_string(base) + " vs " + std::to_string(again));
  }
  std::vector<Matrix> analytic;
  analytic.reserve(params.size());
  for (const auto* p : params) analytic.push_back(p->grad);
  zero_grads(params);

  std::vector<std::pair<std::size_t, std::size_t>> slots;
  for (std::size_t t = 0; t < params.size(); ++t)
    for (std::size_t i = 0; i < params[t]->value.size(); ++i) slots.emplace_back(t, i);
  if (slots.empty()) throw ConfigError("check_gradients: no parameters to probe");

  Rng rng(opts.seed);
  std::shuffle(slots.begin(), slots.end(), rng);
  const std::size_t n = std::min(opts.probe_count, slots.size());

  GradCheckReport report;
  for (std::size_t k = 0; k < n; ++k) {
    const auto [t, i] = slots[k];
    double& theta = params[t]->value[i];
    const double saved = theta;
    theta = saved + opts.eps;
    const double plus = loss(false);
    theta = saved - opts.eps;
    const double minus = loss(false);
    theta = saved;
    GradProbe probe;
    probe.tensor = params[t]->name;
    probe.index = i;
    probe.analytic = analytic[t][i];
    probe.numeric = (plus - minus) / (2.0 * opts.eps);
    probe.relative_error = relative_error(probe.analytic, probe.numeric, opts.denominator_floor);
    report.max_relative_error = std::max(report.max_relative_error, probe.relative_error);
    report.probes.push_back(probe);
  }
  return report;
}

}  // namespace phenomil
