#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "phenomil/core/error.hpp"

namespace phenomil::metrics {

/// 1-based ranks with ties sharing their average rank.
inline std::vector<double> average_ranks(std::span<const double> x) {
  const std::size_t n = x.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

/// Binary ROC-AUC via the Mann-Whitney U statistic.
inline double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ShapeError("roc_auc: scores and labels differ in length");
  double n_pos = 0.0;
  double n_neg = 0.0;
  for (int l : labels) (l != 0 ? n_pos : n_neg) += 1.0;
  if (n_pos == 0.0 || n_neg == 0.0) throw DegenerateInputError("roc_auc is undefined when only one class is present");
  const auto ranks = average_ranks(scores);
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] != 0) rank_sum += ranks[i];
  return (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

/// Macro one-vs-rest AUC over class probabilities (row per sample). Classes
/// absent from `labels` are skipped. Two classes reduce to the binary AUC on
/// the positive-class column.
inline double multiclass_auc(const std::vector<std::vector<double>>& probs, std::span<const std::size_t> labels,
                             std::size_t n_classes) {
  if (probs.size() != labels.size()) throw ShapeError("multiclass_auc: length mismatch");
  if (n_classes == 2) {
    std::vector<double> s;
    std::vector<int> l;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      s.push_back(probs[i][1]);
      l.push_back(labels[i] == 1 ? 1 : 0);
    }
    return roc_auc(s, l);
  }
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < n_classes; ++c) {
    std::vector<double> s;
    std::vector<int> l;
    bool pos = false;
    bool neg = false;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      s.push_back(probs[i][c]);
      l.push_back(labels[i] == c ? 1 : 0);
      (labels[i] == c ? pos : neg) = true;
    }
    if (!pos || !neg) continue;
    total += roc_auc(s, l);
    ++used;
  }
  if (used == 0) throw DegenerateInputError("multiclass_auc: no class has both positives and negatives");
  return total / static_cast<double>(used);
}

struct ClassStats {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;
};

struct EvalResult {
  double accuracy = 0.0;
  double auc = 0.0;
  double balanced_accuracy = 0.0;
  double weighted_f1 = 0.0;
  std::vector<ClassStats> per_class;
  std::vector<std::vector<std::size_t>> confusion;  // [true][pred]
};

inline std::vector<std::vector<std::size_t>> confusion_matrix(std::span<const std::size_t> pred,
                                                              std::span<const std::size_t> labels,
                                                              std::size_t n_classes) {
  if (pred.size() != labels.size()) throw ShapeError("confusion: length mismatch");
  if (pred.empty()) throw DegenerateInputError("metrics need at least one sample");
  std::vector<std::vector<std::size_t>> m(n_classes, std::vector<std::size_t>(n_classes, 0));
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] >= n_classes || labels[i] >= n_classes) throw IndexError("class index out of range in metrics");
    ++m[labels[i]][pred[i]];
  }
  return m;
}

inline std::vector<ClassStats> per_class_stats(const std::vector<std::vector<std::size_t>>& cm) {
  const std::size_t c = cm.size();
  std::vector<ClassStats> out(c);
  for (std::size_t k = 0; k < c; ++k) {
    std::size_t tp = cm[k][k];
    std::size_t row = 0;
    std::size_t col = 0;
    for (std::size_t j = 0; j < c; ++j) {
      row += cm[k][j];
      col += cm[j][k];
    }
    auto& s = out[k];
    s.support = row;
    s.precision = col ? static_cast<double>(tp) / static_cast<double>(col) : 0.0;
    s.recall = row ? static_cast<double>(tp) / static_cast<double>(row) : 0.0;
    s.f1 = s.precision + s.recall > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  }
  return out;
}

inline std::size_t infer_classes(std::span<const std::size_t> pred, std::span<const std::size_t> labels) {
  std::size_t c = 0;
  for (auto v : pred) c = std::max(c, v + 1);
  for (auto v : labels) c = std::max(c, v + 1);
  return c;
}

/// Mean recall over classes present in `labels`.
inline double balanced_accuracy(std::span<const std::size_t> pred, std::span<const std::size_t> labels) {
  const auto stats = per_class_stats(confusion_matrix(pred, labels, infer_classes(pred, labels)));
  double sum = 0.0;
  std::size_t present = 0;
  for (const auto& s : stats) {
    if (s.support == 0) continue;
    sum += s.recall;
    ++present;
  }
  return sum / static_cast<double>(present);
}

inline double weighted_f1(std::span<const std::size_t> pred, std::span<const std::size_t> labels) {
  const auto stats = per_class_stats(confusion_matrix(pred, labels, infer_classes(pred, labels)));
  double sum = 0.0;
  for (const auto& s : stats) sum += static_cast<double>(s.support) * s.f1;
  return sum / static_cast<double>(labels.size());
}

inline double accuracy(std::span<const std::size_t> pred, std::span<const std::size_t> labels) {
  if (pred.size() != labels.size()) throw ShapeError("accuracy: length mismatch");
  if (pred.empty()) throw DegenerateInputError("metrics need at least one sample");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

/// Full evaluation. AUC is NaN when the labels hold a single class.
inline EvalResult evaluate(const std::vector<std::vector<double>>& probs, std::span<const std::size_t> pred,
                           std::span<const std::size_t> labels, std::size_t n_classes) {
  EvalResult r;
  r.confusion = confusion_matrix(pred, labels, n_classes);
  r.per_class = per_class_stats(r.confusion);
  r.accuracy = accuracy(pred, labels);
  r.balanced_accuracy = balanced_accuracy(pred, labels);
  r.weighted_f1 = weighted_f1(pred, labels);
  try {
    r.auc = multiclass_auc(probs, labels, n_classes);
  } catch (const DegenerateInputError&) {
    r.auc = std::nan("");
  }
  return r;
}

// ---------------------------------------------------------------------------
// Distribution comparison.

/// Jensen-Shannon divergence (bits) between histograms of two samples over
/// `bins` equal-width bins spanning [lo, hi]. Each histogram gets additive
/// smoothing 1e-12 before normalization.
inline double js_divergence(std::span<const double> a, std::span<const double> b, std::size_t bins, double lo,
                            double hi) {
  if (bins < 2) throw ConfigError("js_divergence needs bins >= 2");
  if (a.empty() || b.empty()) throw DegenerateInputError("js_divergence needs non-empty samples");
  if (!(lo < hi)) throw ConfigError("js_divergence: range requires lo < hi");
  constexpr double kSmooth = 1e-12;
  auto hist = [&](std::span<const double> x) {
    std::vector<double> h(bins, kSmooth);
    const double width = (hi - lo) / static_cast<double>(bins);
    for (double v : x) {
      auto k = static_cast<std::ptrdiff_t>(std::floor((v - lo) / width));
      k = std::clamp<std::ptrdiff_t>(k, 0, static_cast<std::ptrdiff_t>(bins) - 1);
      h[static_cast<std::size_t>(k)] += 1.0;
    }
    const double total = std::accumulate(h.begin(), h.end(), 0.0);
    for (auto& v : h) v /= total;
    return h;
  };
  const auto p = hist(a);
  const auto q = hist(b);
  double js = 0.0;
  for (std::size_t i = 0; i < bins; ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    js += 0.5 * p[i] * std::log2(p[i] / m) + 0.5 * q[i] * std::log2(q[i] / m);
  }
  return std::clamp(js, 0.0, 1.0);
}

/// Default binning: 128 bins over the joint observed min/max. Identical
/// constant samples give 0.
inline double js_divergence(std::span<const double> a, std::span<const double> b, std::size_t bins = 128) {
  if (a.empty() || b.empty()) throw DegenerateInputError("js_divergence needs non-empty samples");
  double lo = a[0];
  double hi = a[0];
  for (auto s : {a, b})
    for (double v : s) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  if (lo == hi) hi = lo + 1.0;
  return js_divergence(a, b, bins, lo, hi);
}

/// Spearman rank correlation with average ranks for ties; 0 when either
/// side is constant.
inline double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw ShapeError("spearman needs two equal-length vectors (n >= 2)");
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

// ---------------------------------------------------------------------------
// Fold aggregation and serialization.

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

/// Mean and sample standard deviation (n - 1); std is 0 for a single value.
inline MeanStd mean_std(std::span<const double> x) {
  if (x.empty()) throw DegenerateInputError("mean_std of empty input");
  MeanStd r;
  r.mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
  if (x.size() > 1) {
    double ss = 0.0;
    for (double v : x) ss += (v - r.mean) * (v - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(x.size() - 1));
  }
  return r;
}

inline std::string csv_header() { return "fold,accuracy,auc,balanced_accuracy,weighted_f1"; }

inline std::string csv_row(const std::string& fold, const EvalResult& r) {
  return fmt::format("{},{:.9g},{:.9g},{:.9g},{:.9g}", fold, r.accuracy, r.auc, r.balanced_accuracy, r.weighted_f1);
}

/// Summary row: "mean+-std" per metric.
inline std::string csv_summary(const std::vector<EvalResult>& folds) {
  auto col = [&](auto get) {
    std::vector<double> v;
    for (const auto& f : folds) v.push_back(get(f));
    const auto ms = mean_std(v);
    return fmt::format("{:.9g}+-{:.9g}", ms.mean, ms.std);
  };
  return fmt::format("mean+-std,{},{},{},{}", col([](const EvalResult& r) { return r.accuracy; }),
                     col([](const EvalResult& r) { return r.auc; }),
                     col([](const EvalResult& r) { return r.balanced_accuracy; }),
                     col([](const EvalResult& r) { return r.weighted_f1; }));
}

/// Human-readable block with per-class detail and the confusion matrix.
inline std::string text_block(const EvalResult& r, const std::vector<std::string>& class_names) {
  std::string out = fmt::format("accuracy = {:.9g}\nauc = {:.9g}\nbalanced_accuracy = {:.9g}\nweighted_f1 = {:.9g}\n",
                                r.accuracy, r.auc, r.balanced_accuracy, r.weighted_f1);
  for (std::size_t k = 0; k < r.per_class.size(); ++k) {
    const auto& s = r.per_class[k];
    const std::string name = k < class_names.size() ? class_names[k] : fmt::format("class{}", k);
    out += fmt::format("[{}] precision = {:.9g} recall = {:.9g} f1 = {:.9g} support = {}\n", name, s.precision, s.recall,
                       s.f1, s.support);
  }
  out += "confusion (rows = true, cols = predicted)\n";
  for (const auto& row : r.confusion) {
    for (std::size_t j = 0; j < row.size(); ++j) out += fmt::format("{}{}", j ? " " : "", row[j]);
    out += "\n";
  }
  return out;
}

}  // namespace phenomil::metrics
