#pragma once

#include <span>
#include <string>
#include <vector>

#include "phenomil/core/error.hpp"
#include "phenomil/core/kernels.hpp"

namespace phenomil {

/// Saliency activation applied after the bottleneck projection.
enum class Activation { kLayerNorm, kLeakyRelu };

inline std::string to_string(Activation a) { return a == Activation::kLayerNorm ? "ln" : "leaky"; }

inline Activation parse_activation(const std::string& s) {
  if (s == "ln" || s == "layer_norm") return Activation::kLayerNorm;
  if (s == "leaky" || s == "leaky_relu") return Activation::kLeakyRelu;
  throw ConfigError("unknown activation '" + s + "' (expected ln or leaky)");
}

struct ActivationSettings {
  Activation kind = Activation::kLayerNorm;
  double ln_eps = 1e-5;
  double leaky_slope = 0.01;
};

/// Bottleneck activation result with what the backward pass needs.
struct ActivationResult {
  std::vector<double> out;
  LayerNormResult ln;  // populated for layer norm
};

inline ActivationResult apply_activation(std::span<const double> raw, const ActivationSettings& s) {
  ActivationResult r;
  if (s.kind == Activation::kLayerNorm) {
    r.ln = layer_norm_forward(raw, s.ln_eps);
    r.out = r.ln.out;
  } else {
    r.out = leaky_relu(raw, s.leaky_slope);
  }
  return r;
}

inline std::vector<double> activation_backward(const ActivationResult& fwd, std::span<const double> raw,
                                               std::span<const double> d_out, const ActivationSettings& s) {
  if (s.kind == Activation::kLayerNorm) return layer_norm_backward(fwd.ln, d_out);
  return leaky_relu_backward(raw, d_out, s.leaky_slope);
}

}  // namespace phenomil
