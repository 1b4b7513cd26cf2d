#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "phenomil/core/error.hpp"
#include "phenomil/core/matrix.hpp"

namespace phenomil {

// ---------------------------------------------------------------------------
// Layer normalization without learnable affine: (v - mean) / sqrt(var + eps),
// population variance.

struct LayerNormResult {
  std::vector<double> out;  // normalized values
  double inv_std = 0.0;     // 1 / sqrt(var + eps)
};

inline LayerNormResult layer_norm_forward(std::span<const double> v, double eps) {
  if (v.size() < 2) {
    throw DegenerateInputError("layer_norm needs at least 2 values, got " + std::to_string(v.size()));
  }
  if (!(eps >= 0.0)) throw ConfigError("layer_norm eps must be non-negative");
  const double n = static_cast<double>(v.size());
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= n;
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= n;
  LayerNormResult r;
  r.inv_std = 1.0 / std::sqrt(var + eps);
  r.out.resize(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) r.out[i] = (v[i] - mean) * r.inv_std;
  return r;
}

inline std::vector<double> layer_norm(std::span<const double> v, double eps) {
  return layer_norm_forward(v, eps).out;
}

/// Gradient w.r.t. the input given the forward result and upstream gradient.
inline std::vector<double> layer_norm_backward(const LayerNormResult& fwd, std::span<const double> d_out) {
  const std::size_t n = fwd.out.size();
  double mean_d = 0.0;
  double mean_dx = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mean_d += d_out[i];
    mean_dx += d_out[i] * fwd.out[i];
  }
  mean_d /= static_cast<double>(n);
  mean_dx /= static_cast<double>(n);
  std::vector<double> dx(n);
  for (std::size_t i = 0; i < n; ++i) dx[i] = fwd.inv_std * (d_out[i] - mean_d - fwd.out[i] * mean_dx);
  return dx;
}

// ---------------------------------------------------------------------------
// LeakyReLU

inline std::vector<double> leaky_relu(std::span<const double> v, double slope) {
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] > 0.0 ? v[i] : slope * v[i];
  return out;
}

inline std::vector<double> leaky_relu_backward(std::span<const double> input, std::span<const double> d_out,
                                               double slope) {
  std::vector<double> dx(input.size());
  for (std::size_t i = 0; i < input.size(); ++i) dx[i] = input[i] > 0.0 ? d_out[i] : slope * d_out[i];
  return dx;
}

// ---------------------------------------------------------------------------
// Row-wise softmax of M / scale with max subtraction.

inline void softmax_inplace(std::span<double> row) {
  const double mx = *std::max_element(row.begin(), row.end());
  double sum = 0.0;
  for (double& x : row) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (double& x : row) x /= sum;
}

inline Matrix softmax_rows(const Matrix& m, double scale) {
  if (!(scale > 0.0)) throw ConfigError("softmax_rows scale must be positive");
  Matrix out = m;
  for (auto& v : out.values()) v /= scale;
  for (std::size_t i = 0; i < out.rows(); ++i) softmax_inplace(out.row(i));
  return out;
}

/// Given A = softmax_rows(M, scale) and dL/dA, returns dL/dM.
inline Matrix softmax_rows_backward(const Matrix& a, const Matrix& d_a, double scale) {
  require_same_shape(a, d_a, "softmax_rows_backward");
  Matrix dm(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double inner = dot(a.row(i), d_a.row(i));
    for (std::size_t j = 0; j < a.cols(); ++j) dm(i, j) = a(i, j) * (d_a(i, j) - inner) / scale;
  }
  return dm;
}

// ---------------------------------------------------------------------------
// Cross-entropy on raw logits.

struct CrossEntropyResult {
  double loss = 0.0;
  std::vector<double> grad;  // softmax(logits) - onehot(label)
};

inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.begin(), logits.end());
  softmax_inplace(p);
  return p;
}

inline CrossEntropyResult cross_entropy(std::span<const double> logits, std::size_t label) {
  if (label >= logits.size()) {
    throw IndexError("cross_entropy label " + std::to_string(label) + " out of range for " +
                     std::to_string(logits.size()) + " classes");
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double x : logits) sum += std::exp(x - mx);
  const double log_z = mx + std::log(sum);
  CrossEntropyResult r;
  r.loss = log_z - logits[label];
  r.grad.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) r.grad[i] = std::exp(logits[i] - log_z);
  r.grad[label] -= 1.0;
  return r;
}

// ---------------------------------------------------------------------------
// InfoNCE between the rows of `queries` and the rows of a constant `keys`
// matrix; row k's positive is keys row k. Loss is the mean over rows of
// -log softmax(q_k . keys^T / tau)[k].

struct InfoNceResult {
  double loss = 0.0;
  Matrix d_queries;
};

inline InfoNceResult info_nce(const Matrix& queries, const Matrix& keys, double tau) {
  if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
  if (queries.rows() != keys.rows() || queries.cols() != keys.cols()) {
    throw ShapeError("info_nce: " + shape_string(queries) + " vs " + shape_string(keys));
  }
  const std::size_t n = queries.rows();
  Matrix sim = matmul_nt(queries, keys);
  for (auto& v : sim.values()) v /= tau;
  InfoNceResult r;
  Matrix d_sim(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    auto ce = cross_entropy(sim.row(k), k);
    r.loss += ce.loss;
    for (std::size_t j = 0; j < n; ++j) d_sim(k, j) = ce.grad[j] / (static_cast<double>(n) * tau);
  }
  r.loss /= static_cast<double>(n);
  r.d_queries = matmul(d_sim, keys);
  return r;
}

}  // namespace phenomil
