#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "phenomil/core/adam.hpp"
#include "phenomil/core/error.hpp"
#include "phenomil/core/kernels.hpp"
#include "phenomil/core/matrix.hpp"
#include "phenomil/core/param.hpp"
#include "phenomil/core/rng.hpp"
#include "phenomil/data/cohort.hpp"
#include "phenomil/data/transcriptome.hpp"
#include "phenomil/knowledge/kb.hpp"
#include "phenomil/model/common.hpp"

namespace phenomil::gpnn {

/// Initialization scheme.
///   kAbundance: every encoder starts close to the gene-set mean. Weights are
///     positive constants (1/|g_i| in the first layer, 1/(h sqrt(d)) in the
///     second, 1/sqrt(d) in the bottleneck) times (1 + 0.1 N(0, 1)) jitter,
///     so the initial S_hat is the normalized mean abundance of each gene set
///     and |Z_i| is on the scale of the input. Saliency therefore starts
///     pointing the same way as expression for every phenotype.
///   kGaussian: He-scaled Gaussian encoders and N(0, 1/d) bottleneck.
/// Classifier weights are N(0, 0.02^2); biases are zero in both schemes.
enum class Init { kAbundance, kGaussian };

inline std::string to_string(Init i) { return i == Init::kAbundance ? "abundance" : "gaussian"; }

inline Init parse_init(const std::string& s) {
  if (s == "abundance") return Init::kAbundance;
  if (s == "gaussian") return Init::kGaussian;
  throw ConfigError("unknown gpnn init '" + s + "' (expected abundance or gaussian)");
}

struct Config {
  std::size_t d = 32;
  std::size_t max_hidden = 64;  // hidden width is min(max_hidden, 2 |g_i|)
  ActivationSettings activation;
  bool log_input = true;  // log1p on raw abundances before encoding
  Init init = Init::kAbundance;

  void validate() const {
    if (d < 2) throw ConfigError("gpnn: d must be >= 2");
    if (max_hidden < 1) throw ConfigError("gpnn: max_hidden must be >= 1");
  }
};

/// Enc_i = linear(|g_i| -> h) -> ReLU -> linear(h -> d)
struct Encoder {
  ParamTensor w1;  // |g_i| x h
  ParamTensor b1;  // 1 x h
  ParamTensor w2;  // h x d
  ParamTensor b2;  // 1 x d

  std::size_t input_width() const noexcept { return w1.rows(); }
};

struct Params {
  Config config;
  std::vector<Encoder> encoders;
  ParamTensor w_g;    // 1 x d
  ParamTensor cls_w;  // C x N
  ParamTensor cls_b;  // 1 x C

  std::size_t num_phenotypes() const noexcept { return encoders.size(); }
  std::size_t num_classes() const noexcept { return cls_w.rows(); }
  std::size_t dimension() const noexcept { return w_g.cols(); }

  ParamRefs trainable() {
    ParamRefs out;
    for (auto& e : encoders)
      for (auto* p : {&e.w1, &e.b1, &e.w2, &e.b2}) out.push_back(p);
    for (auto* p : {&w_g, &cls_w, &cls_b}) out.push_back(p);
    return out;
  }
  ParamRefs all_tensors() { return trainable(); }

  bool operator==(const Params& o) const {
    if (encoders.size() != o.encoders.size()) return false;
    for (std::size_t i = 0; i < encoders.size(); ++i) {
      const auto& a = encoders[i];
      const auto& b = o.encoders[i];
      if (!(a.w1 == b.w1 && a.b1 == b.b1 && a.w2 == b.w2 && a.b2 == b.b2)) return false;
    }
    return w_g == o.w_g && cls_w == o.cls_w && cls_b == o.cls_b;
  }
};

inline std::size_t hidden_width(std::size_t genes, const Config& c) { return std::min(c.max_hidden, 2 * genes); }

inline Matrix jittered_constant(std::size_t rows, std::size_t cols, double value, Rng& rng) {
  Matrix m = gaussian_matrix(rows, cols, 0.1, rng);
  for (auto& v : m.values()) v = value * (1.0 + v);
  return m;
}

inline Params make_params(const PhenotypeKB& kb, std::size_t n_classes, const Config& config, std::uint64_t seed) {
  config.validate();
  if (n_classes < 2) throw ConfigError("gpnn: need at least 2 classes");
  Rng rng(derive_seed(seed, "gpnn-init"));
  Params p;
  p.config = config;
  const std::size_t d = config.d;
  const double sqrt_d = std::sqrt(static_cast<double>(d));
  const bool abundance = config.init == Init::kAbundance;
  for (std::size_t i = 0; i < kb.size(); ++i) {
    const std::size_t g = kb.phenotypes[i].genes.size();
    const std::size_t h = hidden_width(g, config);
    const double gd = static_cast<double>(g);
    const double hd = static_cast<double>(h);
    Encoder e;
    e.w1 = ParamTensor(fmt::format("enc.{}.w1", i), abundance ? jittered_constant(g, h, 1.0 / gd, rng)
                                                               : gaussian_matrix(g, h, std::sqrt(2.0 / gd), rng));
    e.b1 = ParamTensor(fmt::format("enc.{}.b1", i), Matrix(1, h));
    e.w2 = ParamTensor(fmt::format("enc.{}.w2", i), abundance ? jittered_constant(h, d, 1.0 / (hd * sqrt_d), rng)
                                                               : gaussian_matrix(h, d, std::sqrt(1.0 / hd), rng));
    e.b2 = ParamTensor(fmt::format("enc.{}.b2", i), Matrix(1, d));
    p.encoders.push_back(std::move(e));
  }
  p.w_g = ParamTensor("w_g", abundance ? jittered_constant(1, d, 1.0 / sqrt_d, rng) : gaussian_matrix(1, d, 1.0 / sqrt_d, rng));
  p.cls_w = ParamTensor("cls.w", gaussian_matrix(n_classes, kb.size(), 0.02, rng));
  p.cls_b = ParamTensor("cls.b", Matrix(1, n_classes));
  return p;
}

/// Partitions a profile against the KB and applies the input transform.
inline std::vector<std::vector<double>> prepare_input(const TranscriptomeProfile& profile, const PhenotypeKB& kb,
                                                      const Config& config) {
  auto groups = partition_genes(profile, kb).groups;
  if (config.log_input)
    for (auto& g : groups)
      for (auto& v : g) v = std::log1p(v);
  return groups;
}

struct EncoderCache {
  std::vector<double> hidden_pre;
};

struct Trace {
  Matrix z;                 // N x d
  std::vector<double> raw;  // w_g . Z_i
  ActivationResult act;     // act.out is S_hat
  std::vector<double> logits;
  std::vector<EncoderCache> cache;

  const std::vector<double>& s_hat() const { return act.out; }
};

inline Matrix encode_phenotypes(const std::vector<std::vector<double>>& groups, const Params& params,
                                std::vector<EncoderCache>* cache = nullptr) {
  const std::size_t n = params.num_phenotypes();
  if (groups.size() != n) throw ShapeError(fmt::format("encode_phenotypes: {} groups for {} encoders", groups.size(), n));
  const std::size_t d = params.dimension();
  Matrix z(n, d);
  if (cache) cache->assign(n, {});
  for (std::size_t i = 0; i < n; ++i) {
    const auto& e = params.encoders[i];
    if (groups[i].size() != e.input_width()) {
      throw ShapeError(fmt::format("encoder {} expects {} genes, got {}", i, e.input_width(), groups[i].size()));
    }
    const Matrix pre = matmul(Matrix::row_vector(groups[i]), e.w1.value) + e.b1.value;
    Matrix hid = pre;
    for (auto& x : hid.values()) x = x > 0.0 ? x : 0.0;
    const Matrix out = matmul(hid, e.w2.value) + e.b2.value;
    for (std::size_t r = 0; r < d; ++r) z(i, r) = out[r];
    if (cache) (*cache)[i].hidden_pre = pre.values();
  }
  return z;
}

/// Pure forward over prepared gene groups.
inline Trace forward(const std::vector<std::vector<double>>& groups, const Params& params) {
  Trace t;
  t.z = encode_phenotypes(groups, params, &t.cache);
  const std::size_t n = params.num_phenotypes();
  t.raw.resize(n);
  for (std::size_t i = 0; i < n; ++i) t.raw[i] = dot(t.z.row(i), params.w_g.value.row(0));
  t.act = apply_activation(t.raw, params.config.activation);
  const std::size_t c = params.num_classes();
  t.logits.resize(c);
  for (std::size_t k = 0; k < c; ++k) t.logits[k] = dot(params.cls_w.value.row(k), t.s_hat()) + params.cls_b.value[k];
  return t;
}

inline Trace forward(const TranscriptomeProfile& profile, const PhenotypeKB& kb, const Params& params) {
  if (kb.size() != params.num_phenotypes()) throw ShapeError("gpnn: KB phenotype count does not match the model");
  return forward(prepare_input(profile, kb, params.config), params);
}

/// Accumulates gradients of a loss with upstream d_logits (and optional d_s_hat).
inline void backward(const Trace& t, const std::vector<std::vector<double>>& groups, Params& params,
                     std::span<const double> d_logits, std::span<const double> d_s_hat = {}) {
  const std::size_t n = params.num_phenotypes();
  const std::size_t d = params.dimension();
  std::vector<double> d_s(n, 0.0);
  if (!d_s_hat.empty()) std::copy(d_s_hat.begin(), d_s_hat.end(), d_s.begin());
  const auto& s = t.s_hat();
  for (std::size_t k = 0; k < d_logits.size(); ++k) {
    params.cls_b.grad[k] += d_logits[k];
    for (std::size_t i = 0; i < n; ++i) {
      params.cls_w.grad(k, i) += d_logits[k] * s[i];
      d_s[i] += params.cls_w.value(k, i) * d_logits[k];
    }
  }
  const auto d_raw = activation_backward(t.act, t.raw, d_s, params.config.activation);
  for (std::size_t i = 0; i < n; ++i) {
    auto& e = params.encoders[i];
    std::vector<double> d_out(d);
    for (std::size_t r = 0; r < d; ++r) {
      params.w_g.grad[r] += d_raw[i] * t.z(i, r);
      d_out[r] = d_raw[i] * params.w_g.value[r];
    }
    const auto& pre = t.cache[i].hidden_pre;
    const std::size_t h = pre.size();
    std::vector<double> d_pre(h, 0.0);
    for (std::size_t j = 0; j < h; ++j) {
      const double hj = pre[j] > 0.0 ? pre[j] : 0.0;
      for (std::size_t r = 0; r < d; ++r) {
        e.w2.grad(j, r) += hj * d_out[r];
        d_pre[j] += e.w2.value(j, r) * d_out[r];
      }
      if (pre[j] <= 0.0) d_pre[j] = 0.0;
    }
    for (std::size_t r = 0; r < d; ++r) e.b2.grad[r] += d_out[r];
    const auto& x = groups[i];
    for (std::size_t j = 0; j < h; ++j) {
      e.b1.grad[j] += d_pre[j];
      for (std::size_t g = 0; g < x.size(); ++g) e.w1.grad(g, j) += x[g] * d_pre[j];
    }
  }
}

/// Cross-entropy loss with gradient accumulation into params.
inline double loss_and_backward(const std::vector<std::vector<double>>& groups, std::size_t label, Params& params,
                                bool accumulate) {
  const auto t = forward(groups, params);
  const auto ce = cross_entropy(t.logits, label);
  if (accumulate) backward(t, groups, params, ce.grad);
  return ce.loss;
}

struct TrainHistory {
  std::vector<double> epoch_loss;
  std::size_t optimizer_steps = 0;
};

/// Seeded per-epoch sample order.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(epoch)));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

/// Supervised teacher training on cross-entropy over the subtype label.
inline TrainHistory train_gpnn(const Cohort& cohort, const PhenotypeKB& kb, Params& params, const AdamConfig& adam,
                               std::size_t epochs, std::uint64_t seed) {
  adam.validate();
  if (!cohort.has_profiles()) throw DataError("train_gpnn: cohort has no transcriptome profiles");
  if (cohort.size() == 0) throw DataError("train_gpnn: empty cohort");
  if (kb.size() != params.num_phenotypes()) throw ShapeError("train_gpnn: KB does not match model");
  std::vector<std::vector<std::vector<double>>> inputs;
  inputs.reserve(cohort.size());
  for (const auto& p : cohort.profiles) inputs.push_back(prepare_input(p, kb, params.config));

  auto refs = params.trainable();
  zero_grads(refs);
  TrainHistory hist;
  for (std::size_t ep = 0; ep < epochs; ++ep) {
    double total = 0.0;
    std::size_t pending = 0;
    for (auto idx : epoch_order(cohort.size(), derive_seed(seed, "gpnn-order"), ep)) {
      total += loss_and_backward(inputs[idx], cohort.bags[idx].label, params, true);
      if (++pending == adam.accumulation_steps) {
        adam_step(refs, adam, pending);
        ++hist.optimizer_steps;
        pending = 0;
      }
    }
    if (pending > 0) {
      adam_step(refs, adam, pending);
      ++hist.optimizer_steps;
    }
    hist.epoch_loss.push_back(total / static_cast<double>(cohort.size()));
  }
  return hist;
}

}  // namespace phenomil::gpnn
