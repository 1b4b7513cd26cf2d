#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "phenomil/core/error.hpp"
#include "phenomil/core/rng.hpp"

namespace phenomil {

struct FoldSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Stratified k-fold over sample labels. Each class is shuffled with a
/// seeded stream and dealt round-robin, starting where the previous class
/// stopped, so per-class counts across folds differ by at most one.
inline std::vector<FoldSplit> stratified_kfold(const std::vector<std::size_t>& labels, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("k-fold needs k >= 2");
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  for (const auto& [cls, idx] : by_class) {
    if (idx.size() < k) {
      throw DataError("stratification: class " + std::to_string(cls) + " has " + std::to_string(idx.size()) +
                      " samples, fewer than k=" + std::to_string(k));
    }
  }
  std::vector<std::vector<std::size_t>> test(k);
  std::size_t cursor = 0;
  for (auto& [cls, idx] : by_class) {
    Rng rng(derive_seed(seed, cls));
    std::shuffle(idx.begin(), idx.end(), rng);
    for (auto i : idx) {
      test[cursor % k].push_back(i);
      ++cursor;
    }
  }
  std::vector<FoldSplit> folds(k);
  for (std::size_t f = 0; f < k; ++f) {
    std::sort(test[f].begin(), test[f].end());
    folds[f].test = test[f];
    for (std::size_t g = 0; g < k; ++g)
      if (g != f) folds[f].train.insert(folds[f].train.end(), test[g].begin(), test[g].end());
    std::sort(folds[f].train.begin(), folds[f].train.end());
  }
  return folds;
}

}  // namespace phenomil
