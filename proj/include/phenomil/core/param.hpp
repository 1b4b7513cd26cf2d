#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "phenomil/core/matrix.hpp"
#include "phenomil/core/rng.hpp"

namespace phenomil {

/// A named tensor together with its gradient accumulator and Adam moments.
struct ParamTensor {
  std::string name;
  Matrix value;
  Matrix grad;
  Matrix adam_m;
  Matrix adam_v;
  std::uint64_t step_count = 0;

  ParamTensor() = default;
  ParamTensor(std::string n, Matrix v)
      : name(std::move(n)),
        value(std::move(v)),
        grad(value.rows(), value.cols()),
        adam_m(value.rows(), value.cols()),
        adam_v(value.rows(), value.cols()) {}

  std::size_t rows() const noexcept { return value.rows(); }
  std::size_t cols() const noexcept { return value.cols(); }

  void zero_grad() { grad.fill(0.0); }

  bool operator==(const ParamTensor&) const = default;
};

using ParamRefs = std::vector<ParamTensor*>;

inline void zero_grads(const ParamRefs& params) {
  for (auto* p : params) p->zero_grad();
}

inline Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (auto& v : m.values()) v = dist(rng);
  return m;
}

}  // namespace phenomil
