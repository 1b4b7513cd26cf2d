#pragma once

#include <cmath>
#include <cstddef>
#include <string>

#include "phenomil/core/error.hpp"
#include "phenomil/core/param.hpp"

namespace phenomil {

/// Adam with decoupled weight decay, global-norm clipping and gradient
/// accumulation. Defaults follow the training recipe: lr 5e-4, weight decay
/// 1e-4, clip 10, accumulate 32 single-sample passes per step.
struct AdamConfig {
  double learning_rate = 5e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip_norm = 10.0;
  std::size_t accumulation_steps = 32;

  void validate() const {
    // lr = 0 is accepted so a run can be replayed as a strict no-op.
    if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("beta1 must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("beta2 must lie in [0, 1)");
    if (!(epsilon > 0.0)) throw ConfigError("epsilon must be > 0");
    if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be > 0");
    if (accumulation_steps < 1) throw ConfigError("accumulation_steps must be >= 1");
  }
};

/// Global L2 norm over the gradients of a parameter set.
inline double global_grad_norm(const ParamRefs& params) {
  double acc = 0.0;
  for (const auto* p : params) acc += squared_norm(p->grad);
  return std::sqrt(acc);
}

/// Applies one optimizer step to `params` using gradients summed over
/// `accumulated` passes, then zeroes the gradients.
///
/// Order of operations: average, check finiteness, clip to cfg.clip_norm,
/// decay value by (1 - lr * wd), bias-corrected Adam update.
/// Returns the pre-clip gradient norm.
inline double adam_step(const ParamRefs& params, const AdamConfig& cfg, std::size_t accumulated = 1) {
  if (accumulated == 0) throw ConfigError("adam_step called with zero accumulated passes");
  const double inv = 1.0 / static_cast<double>(accumulated);
  for (auto* p : params) {
    for (auto& g : p->grad.values()) g *= inv;
    for (double g : p->grad.values()) {
      if (!std::isfinite(g)) {
        throw NumericError("non-finite gradient in tensor '" + p->name + "' (" + shape_string(p->grad) + ")");
      }
    }
  }
  const double norm = global_grad_norm(params);
  const double clip = norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;

  for (auto* p : params) {
    p->step_count += 1;
    const double t = static_cast<double>(p->step_count);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    const double decay = 1.0 - cfg.learning_rate * cfg.weight_decay;
    auto& val = p->value.values();
    auto& m = p->adam_m.values();
    auto& v = p->adam_v.values();
    const auto& grad = p->grad.values();
    for (std::size_t i = 0; i < val.size(); ++i) {
      const double g = grad[i] * clip;
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      val[i] = val[i] * decay - cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
    }
    p->zero_grad();
  }
  return norm;
}

}  // namespace phenomil
