#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "phenomil/core/error.hpp"
#include "phenomil/core/kernels.hpp"
#include "phenomil/core/matrix.hpp"

namespace phenomil::train {

enum class Objective { kL2, kL1, kContrastive };

inline std::string to_string(Objective o) {
  switch (o) {
    case Objective::kL2: return "l2";
    case Objective::kL1: return "l1";
    case Objective::kContrastive: return "cl";
  }
  return "l2";
}

inline Objective parse_objective(const std::string& s) {
  if (s == "l2") return Objective::kL2;
  if (s == "l1") return Objective::kL1;
  if (s == "cl" || s == "contrastive") return Objective::kContrastive;
  throw ConfigError("unknown objective '" + s + "' (expected l2, l1 or cl)");
}

/// Guidance levels: off, feat, logit, both.
inline std::string guidance_level_name(bool feat, bool logit) {
  if (feat && logit) return "both";
  if (feat) return "feat";
  if (logit) return "logit";
  return "off";
}

inline std::pair<bool, bool> parse_guidance_level(const std::string& s) {
  if (s == "off" || s == "none") return {false, false};
  if (s == "feat") return {true, false};
  if (s == "logit") return {false, true};
  if (s == "both") return {true, true};
  throw ConfigError("unknown guidance level '" + s + "' (expected off, feat, logit or both)");
}

struct GuidanceConfig {
  bool use_feat = true;
  bool use_logit = true;
  Objective objective = Objective::kL2;
  double lambda = 1.0;
  double tau_guidance = 1.0;

  bool enabled() const noexcept { return use_feat || use_logit; }

  void validate() const {
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
    if (!(tau_guidance > 0.0)) throw ConfigError("tau_guidance must be > 0");
  }
};

/// Unweighted guidance terms and their gradients w.r.t. the student side.
struct GuidanceLosses {
  double l_feat = 0.0;
  double l_logit = 0.0;
  Matrix d_v;                // N x d
  std::vector<double> d_s;   // N
};

/// Teacher tensors (z, s_hat) are constants. Under the contrastive objective
/// the logit level uses the L2 form.
inline GuidanceLosses guidance_losses(const Matrix& v, const Matrix& z, std::span<const double> s,
                                      std::span<const double> s_hat, const GuidanceConfig& cfg) {
  if (!v.same_shape(z)) throw ShapeError("guidance: V " + shape_string(v) + " vs Z " + shape_string(z));
  if (s.size() != s_hat.size() || s.size() != v.rows()) throw ShapeError("guidance: saliency length mismatch");
  const std::size_t n = v.rows();
  const std::size_t d = v.cols();
  const double nn = static_cast<double>(n);
  const double nd = static_cast<double>(n * d);
  GuidanceLosses g;
  g.d_v = Matrix(n, d);
  g.d_s.assign(n, 0.0);

  if (cfg.use_feat) {
    switch (cfg.objective) {
      case Objective::kL2:
        for (std::size_t i = 0; i < v.size(); ++i) {
          const double diff = v[i] - z[i];
          g.l_feat += diff * diff / nd;
          g.d_v[i] = 2.0 * diff / nd;
        }
        break;
      case Objective::kL1:
        for (std::size_t i = 0; i < v.size(); ++i) {
          const double diff = v[i] - z[i];
          g.l_feat += std::abs(diff) / nd;
          g.d_v[i] = (diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0)) / nd;
        }
        break;
      case Objective::kContrastive: {
        auto r = info_nce(v, z, cfg.tau_guidance);
        g.l_feat = r.loss;
        g.d_v = std::move(r.d_queries);
        break;
      }
    }
  }
  if (cfg.use_logit) {
    const bool l1 = cfg.objective == Objective::kL1;
    for (std::size_t i = 0; i < n; ++i) {
      const double diff = s[i] - s_hat[i];
      if (l1) {
        g.l_logit += std::abs(diff) / nn;
        g.d_s[i] = (diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0)) / nn;
      } else {
        g.l_logit += diff * diff / nn;
        g.d_s[i] = 2.0 * diff / nn;
      }
    }
  }
  return g;
}

}  // namespace phenomil::train
