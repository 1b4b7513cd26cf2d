#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "phenomil/core/error.hpp"
#include "phenomil/core/kernels.hpp"
#include "phenomil/core/matrix.hpp"
#include "phenomil/core/param.hpp"
#include "phenomil/core/rng.hpp"
#include "phenomil/data/bag.hpp"
#include "phenomil/model/common.hpp"

namespace phenomil::pamil {

enum class Head { kScoreLinear, kFeatureMlp };

inline std::string to_string(Head h) { return h == Head::kScoreLinear ? "score" : "feature"; }

inline Head parse_head(const std::string& s) {
  if (s == "score" || s == "score_linear") return Head::kScoreLinear;
  if (s == "feature" || s == "feature_mlp") return Head::kFeatureMlp;
  throw ConfigError("unknown head '" + s + "' (expected score or feature)");
}

struct Config {
  double tau = 0.07;   // alignment temperature
  double alpha = 0.9;  // center momentum
  ActivationSettings activation;
  Head head = Head::kScoreLinear;
  std::size_t feature_hidden = 32;
  double init_std = 0.02;
  double bottleneck_init_std = 0.0;  // zero: initial saliency carries no random ranking

  void validate() const {
    if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
    if (feature_hidden < 1) throw ConfigError("feature_hidden must be >= 1");
    if (!(init_std >= 0.0) || !(bottleneck_init_std >= 0.0)) throw ConfigError("init std must be >= 0");
  }
};

/// Two-layer MLP over the mean-pooled phenotype features.
struct FeatureHead {
  ParamTensor w1;  // d x h
  ParamTensor b1;  // 1 x h
  ParamTensor w2;  // h x C
  ParamTensor b2;  // 1 x C
};

/// Student parameters. Linear maps act on row vectors (X * W).
struct Params {
  Config config;
  ParamTensor wq;            // d x d
  ParamTensor wk;            // d x d
  ParamTensor wv;            // d x d
  ParamTensor w_bottleneck;  // 1 x d, shared across phenotype rows
  ParamTensor cls_w;         // C x N
  ParamTensor cls_b;         // 1 x C
  std::optional<FeatureHead> feature_head;
  ParamTensor centers;  // N x d momentum cluster centers; never receives gradient

  std::size_t dimension() const noexcept { return wq.rows(); }
  std::size_t num_phenotypes() const noexcept { return centers.rows(); }
  std::size_t num_classes() const noexcept { return cls_w.rows(); }

  ParamRefs phenotype_params() { return {&wq, &wk, &wv, &w_bottleneck}; }

  ParamRefs classifier_params() {
    if (config.head == Head::kScoreLinear) return {&cls_w, &cls_b};
    if (!feature_head) throw ConfigError("feature head selected but not configured");
    return {&feature_head->w1, &feature_head->b1, &feature_head->w2, &feature_head->b2};
  }

  ParamRefs trainable() {
    auto out = phenotype_params();
    for (auto* p : classifier_params()) out.push_back(p);
    return out;
  }

  /// Every stored tensor, including centers and the unused head.
  ParamRefs all_tensors() {
    ParamRefs out{&wq, &wk, &wv, &w_bottleneck, &cls_w, &cls_b};
    if (feature_head) {
      for (auto* p : {&feature_head->w1, &feature_head->b1, &feature_head->w2, &feature_head->b2}) out.push_back(p);
    }
    out.push_back(&centers);
    return out;
  }

  bool operator==(const Params& o) const {
    auto& a = const_cast<Params&>(*this);
    auto& b = const_cast<Params&>(o);
    const auto ta = a.all_tensors();
    const auto tb = b.all_tensors();
    if (ta.size() != tb.size()) return false;
    for (std::size_t i = 0; i < ta.size(); ++i)
      if (!(*ta[i] == *tb[i])) return false;
    return true;
  }
};

/// Initializes W_q, W_k, W_v as identity plus N(0, init_std^2) noise, the
/// heads as N(0, init_std^2) with zero bias, the bottleneck as
/// N(0, bottleneck_init_std^2), and the centers at the text embeddings U.
inline Params make_params(const Matrix& u, std::size_t n_classes, const Config& config, std::uint64_t seed) {
  config.validate();
  if (u.rows() < 2) throw ConfigError("need at least 2 phenotypes");
  if (n_classes < 2) throw ConfigError("need at least 2 classes");
  const std::size_t d = u.cols();
  const std::size_t n = u.rows();
  Rng rng(derive_seed(seed, "pamil-init"));
  Params p;
  p.config = config;
  p.wq = ParamTensor("wq", Matrix::identity(d) + gaussian_matrix(d, d, config.init_std, rng));
  p.wk = ParamTensor("wk", Matrix::identity(d) + gaussian_matrix(d, d, config.init_std, rng));
  p.wv = ParamTensor("wv", Matrix::identity(d) + gaussian_matrix(d, d, config.init_std, rng));
  p.w_bottleneck = ParamTensor("w_bottleneck", gaussian_matrix(1, d, config.bottleneck_init_std, rng));
  p.cls_w = ParamTensor("cls_w", gaussian_matrix(n_classes, n, config.init_std, rng));
  p.cls_b = ParamTensor("cls_b", Matrix(1, n_classes));
  if (config.head == Head::kFeatureMlp) {
    const std::size_t h = config.feature_hidden;
    FeatureHead fh;
    fh.w1 = ParamTensor("feat_w1", gaussian_matrix(d, h, config.init_std, rng));
    fh.b1 = ParamTensor("feat_b1", Matrix(1, h));
    fh.w2 = ParamTensor("feat_w2", gaussian_matrix(h, n_classes, config.init_std, rng));
    fh.b2 = ParamTensor("feat_b2", Matrix(1, n_classes));
    p.feature_head = std::move(fh);
  }
  p.centers = ParamTensor("centers", u);
  return p;
}

// ---------------------------------------------------------------------------
// Cross-attention phenotype feature extraction.

struct PhenotypeFeatures {
  Matrix v;       // N x d
  Matrix a;       // N x M, rows sum to 1
  Matrix q;       // N x d  = U Wq
  Matrix k;       // M x d  = H Wk
  Matrix values;  // M x d  = H Wv
};

inline PhenotypeFeatures extract_phenotype_features(const Matrix& h, const Matrix& u, const Params& params) {
  const std::size_t d = params.dimension();
  if (h.cols() != d || u.cols() != d) {
    throw ShapeError("extract_phenotype_features: H " + shape_string(h) + ", U " + shape_string(u) + ", d=" +
                     std::to_string(d));
  }
  if (h.rows() == 0) throw ShapeError("bag has no patches");
  PhenotypeFeatures f;
  f.q = matmul(u, params.wq.value);
  f.k = matmul(h, params.wk.value);
  f.values = matmul(h, params.wv.value);
  f.a = softmax_rows(matmul_nt(f.q, f.k), std::sqrt(static_cast<double>(d)));
  f.v = matmul(f.a, f.values);
  return f;
}

// ---------------------------------------------------------------------------
// Cohort-level alignment against momentum centers.

/// -(1/N) sum_k log softmax_k'(V_k . C_k' / tau)[k]; centers are constants.
inline double alignment_loss(const Matrix& v, const Matrix& centers, double tau) {
  return info_nce(v, centers, tau).loss;
}

/// centers <- alpha * centers + (1 - alpha) * V
inline void update_centers(Matrix& centers, const Matrix& v, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  require_same_shape(centers, v, "update_centers");
  for (std::size_t i = 0; i < centers.size(); ++i) centers[i] = alpha * centers[i] + (1.0 - alpha) * v[i];
}

// ---------------------------------------------------------------------------
// Bottleneck saliency and classifier heads.

struct Saliency {
  std::vector<double> raw;  // w_bottleneck . V_i
  ActivationResult act;     // act.out is S
  const std::vector<double>& scores() const { return act.out; }
};

inline Saliency phenotype_saliency(const Matrix& v, const Params& params, const ActivationSettings& activation) {
  if (v.rows() < 2) throw DegenerateInputError("saliency needs at least 2 phenotypes");
  if (v.cols() != params.w_bottleneck.cols()) throw ShapeError("phenotype_saliency: feature width mismatch");
  Saliency s;
  s.raw.resize(v.rows());
  for (std::size_t i = 0; i < v.rows(); ++i) s.raw[i] = dot(v.row(i), params.w_bottleneck.value.row(0));
  s.act = apply_activation(s.raw, activation);
  return s;
}

struct HeadCache {
  std::vector<double> pooled;      // feature head: mean of V rows
  std::vector<double> hidden_pre;  // feature head: pooled W1 + b1
};

/// Score head: logits = W_a S + b. Feature head: MLP(mean_i V_i).
inline std::vector<double> classify(std::span<const double> s, const Matrix& v, const Params& params, Head head,
                                    HeadCache* cache = nullptr) {
  const std::size_t c = params.num_classes();
  std::vector<double> logits(c);
  if (head == Head::kScoreLinear) {
    if (s.size() != params.cls_w.cols()) throw ShapeError("classify: saliency length mismatch");
    for (std::size_t k = 0; k < c; ++k) logits[k] = dot(params.cls_w.value.row(k), s) + params.cls_b.value[k];
    return logits;
  }
  if (!params.feature_head) throw ConfigError("feature_mlp head requested but no feature head is configured");
  const auto& fh = *params.feature_head;
  const auto pooled = column_mean(v);
  const Matrix pre = matmul(Matrix::row_vector(pooled), fh.w1.value) + fh.b1.value;
  Matrix hid = pre;
  for (auto& x : hid.values()) x = x > 0.0 ? x : 0.0;
  const Matrix out = matmul(hid, fh.w2.value) + fh.b2.value;
  if (cache) {
    cache->pooled = pooled;
    cache->hidden_pre = pre.values();
  }
  return out.values();
}

// ---------------------------------------------------------------------------
// Full forward pass.

struct ForwardTrace {
  PhenotypeFeatures features;
  Saliency saliency;
  HeadCache head_cache;
  std::vector<double> logits;
  double l_ce = 0.0;
  double l_contrast = 0.0;

  const Matrix& V() const { return features.v; }
  const Matrix& A() const { return features.a; }
  const std::vector<double>& S() const { return saliency.scores(); }
};

/// Pure: reads params and centers, mutates nothing.
inline ForwardTrace forward(const FeatureBag& bag, const Matrix& u, const Params& params) {
  if (bag.features.cols() != params.dimension()) {
    throw ShapeError("bag '" + bag.sample_id + "' has feature width " + std::to_string(bag.features.cols()) +
                     ", model expects " + std::to_string(params.dimension()));
  }
  ForwardTrace t;
  t.features = extract_phenotype_features(bag.features, u, params);
  t.saliency = phenotype_saliency(t.features.v, params, params.config.activation);
  t.logits = classify(t.saliency.scores(), t.features.v, params, params.config.head, &t.head_cache);
  t.l_ce = cross_entropy(t.logits, bag.label).loss;
  t.l_contrast = alignment_loss(t.features.v, params.centers.value, params.config.tau);
  return t;
}

// ---------------------------------------------------------------------------
// Backward pass.

/// Upstream gradients w.r.t. the trace outputs; empty members are zero.
struct Upstream {
  std::vector<double> d_logits;
  std::vector<double> d_s;
  Matrix d_v;
};

enum class BackwardScope { kFull, kClassifierOnly };

/// Accumulates parameter gradients (never into centers).
inline void backward(const ForwardTrace& t, const Matrix& h, const Matrix& u, Params& params, const Upstream& up,
                     BackwardScope scope = BackwardScope::kFull) {
  const std::size_t n = params.num_phenotypes();
  const std::size_t d = params.dimension();
  const auto& v = t.features.v;
  std::vector<double> d_s = up.d_s.empty() ? std::vector<double>(n, 0.0) : up.d_s;
  Matrix d_v = up.d_v.empty() ? Matrix(n, d) : up.d_v;

  if (!up.d_logits.empty()) {
    const auto& dl = up.d_logits;
    if (params.config.head == Head::kScoreLinear) {
      const auto& s = t.S();
      for (std::size_t k = 0; k < dl.size(); ++k) {
        params.cls_b.grad[k] += dl[k];
        for (std::size_t i = 0; i < n; ++i) {
          params.cls_w.grad(k, i) += dl[k] * s[i];
          d_s[i] += params.cls_w.value(k, i) * dl[k];
        }
      }
    } else {
      auto& fh = *params.feature_head;
      const std::size_t hdim = fh.w1.cols();
      const auto& pre = t.head_cache.hidden_pre;
      std::vector<double> hid(hdim);
      for (std::size_t j = 0; j < hdim; ++j) hid[j] = pre[j] > 0.0 ? pre[j] : 0.0;
      std::vector<double> d_pre(hdim, 0.0);
      for (std::size_t k = 0; k < dl.size(); ++k) {
        fh.b2.grad[k] += dl[k];
        for (std::size_t j = 0; j < hdim; ++j) {
          fh.w2.grad(j, k) += hid[j] * dl[k];
          d_pre[j] += fh.w2.value(j, k) * dl[k];
        }
      }
      for (std::size_t j = 0; j < hdim; ++j) d_pre[j] = pre[j] > 0.0 ? d_pre[j] : 0.0;
      std::vector<double> d_pooled(d, 0.0);
      for (std::size_t j = 0; j < hdim; ++j) {
        fh.b1.grad[j] += d_pre[j];
        for (std::size_t r = 0; r < d; ++r) {
          fh.w1.grad(r, j) += t.head_cache.pooled[r] * d_pre[j];
          d_pooled[r] += fh.w1.value(r, j) * d_pre[j];
        }
      }
      if (scope == BackwardScope::kFull) {
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t r = 0; r < d; ++r) d_v(i, r) += d_pooled[r] / static_cast<double>(n);
      }
    }
  }
  if (scope == BackwardScope::kClassifierOnly) return;

  const auto d_raw = activation_backward(t.saliency.act, t.saliency.raw, d_s, params.config.activation);
  const auto w = params.w_bottleneck.value.row(0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t r = 0; r < d; ++r) {
      d_v(i, r) += d_raw[i] * w[r];
      params.w_bottleneck.grad[r] += d_raw[i] * v(i, r);
    }
  }

  const auto& f = t.features;
  const Matrix d_a = matmul_nt(d_v, f.values);       // N x M
  const Matrix d_values = matmul_tn(f.a, d_v);       // M x d
  const Matrix d_scores = softmax_rows_backward(f.a, d_a, std::sqrt(static_cast<double>(d)));
  const Matrix d_q = matmul(d_scores, f.k);          // N x d
  const Matrix d_k = matmul_tn(d_scores, f.q);       // M x d
  axpy(1.0, matmul_tn(u, d_q), params.wq.grad);
  axpy(1.0, matmul_tn(h, d_k), params.wk.grad);
  axpy(1.0, matmul_tn(h, d_values), params.wv.grad);
}

}  // namespace phenomil::pamil
