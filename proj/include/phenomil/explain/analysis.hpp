#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "phenomil/core/error.hpp"
#include "phenomil/data/cohort.hpp"
#include "phenomil/explain/shapley.hpp"
#include "phenomil/knowledge/kb.hpp"
#include "phenomil/metrics/metrics.hpp"
#include "phenomil/model/gpnn.hpp"
#include "phenomil/model/pamil.hpp"

namespace phenomil::explain {

struct RankedItem {
  std::string name;
  double weight = 0.0;  // mean |phi|
};

/// Per-class phenotype contributions: values[c][i] is mean |phi_i| of the
/// class-c logit over samples whose true label is c.
struct ContributionTable {
  std::vector<std::string> class_names;
  std::vector<std::string> phenotype_names;
  std::vector<std::vector<double>> values;

  std::vector<RankedItem> ranked(std::size_t c) const {
    std::vector<RankedItem> out;
    for (std::size_t i = 0; i < phenotype_names.size(); ++i) out.push_back({phenotype_names[i], values[c][i]});
    std::stable_sort(out.begin(), out.end(), [](const RankedItem& a, const RankedItem& b) { return a.weight > b.weight; });
    return out;
  }
};

inline std::vector<std::vector<double>> cohort_saliency(const Cohort& cohort, const Matrix& u,
                                                        const pamil::Params& student) {
  std::vector<std::vector<double>> s;
  s.reserve(cohort.size());
  for (const auto& bag : cohort.bags) s.push_back(pamil::forward(bag, u, student).S());
  return s;
}

inline std::vector<double> mean_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw DegenerateInputError("mean over an empty set of rows");
  std::vector<double> m(rows[0].size(), 0.0);
  for (const auto& r : rows)
    for (std::size_t i = 0; i < m.size(); ++i) m[i] += r[i];
  for (auto& v : m) v /= static_cast<double>(rows.size());
  return m;
}

/// Value function: class-c logit of the score head as a function of S.
inline ValueFn score_logit_fn(const pamil::Params& student, std::size_t c) {
  return [&student, c](std::span<const double> s) {
    return dot(student.cls_w.value.row(c), s) + student.cls_b.value[c];
  };
}

/// Shapley attribution of the class-c logit for one saliency vector.
/// Uses exact enumeration up to 20 phenotypes, permutation sampling beyond.
inline ShapleyResult sample_phenotype_shapley(const pamil::Params& student, std::span<const double> s,
                                              std::span<const double> baseline, std::size_t c,
                                              std::size_t n_permutations = 2000, std::uint64_t seed = 0) {
  const auto f = score_logit_fn(student, c);
  if (s.size() <= kExactShapleyLimit) return shapley_exact(f, s, baseline);
  return shapley_sampled(f, s, baseline, n_permutations, seed);
}

inline ContributionTable phenotype_contributions(const pamil::Params& student, const Cohort& cohort, const Matrix& u,
                                                 const PhenotypeKB& kb, std::uint64_t seed = 0) {
  if (student.config.head != pamil::Head::kScoreLinear) {
    throw ConfigError("phenotype contributions need the score head");
  }
  if (kb.size() != student.num_phenotypes()) throw ShapeError("KB and student disagree on the phenotype count");
  const auto s = cohort_saliency(cohort, u, student);
  const auto baseline = mean_rows(s);
  ContributionTable t;
  t.class_names = cohort.class_names;
  t.phenotype_names = kb.names();
  const std::size_t nc = cohort.num_classes();
  t.values.assign(nc, std::vector<double>(kb.size(), 0.0));
  std::vector<std::size_t> counts(nc, 0);
  for (std::size_t j = 0; j < cohort.size(); ++j) {
    const std::size_t c = cohort.bags[j].label;
    const auto r = sample_phenotype_shapley(student, s[j], baseline, c, 2000, derive_seed(seed, j));
    for (std::size_t i = 0; i < r.values.size(); ++i) t.values[c][i] += std::abs(r.values[i]);
    ++counts[c];
  }
  for (std::size_t c = 0; c < nc; ++c)
    if (counts[c] > 0)
      for (auto& v : t.values[c]) v /= static_cast<double>(counts[c]);
  return t;
}

/// Per-phenotype top genes by mean |phi| of the teacher's saliency S_hat_i.
struct GeneTable {
  std::vector<std::string> phenotype_names;
  std::vector<std::vector<RankedItem>> top;  // per phenotype, descending
};

/// For phenotype i, genes outside g_i stay at the cohort-mean input; the
/// value function is S_hat_i as a function of group i only. Means are taken
/// in the model input space (after the input transform).
inline GeneTable gene_phenotype_contributions(const gpnn::Params& teacher, const Cohort& cohort, const PhenotypeKB& kb,
                                              std::size_t n_permutations, std::uint64_t seed, std::size_t top_k) {
  if (!cohort.has_profiles()) throw DataError("gene contributions need transcriptome profiles");
  if (kb.size() != teacher.num_phenotypes()) throw ShapeError("KB and teacher disagree on the phenotype count");
  std::vector<std::vector<std::vector<double>>> inputs;
  for (const auto& p : cohort.profiles) inputs.push_back(gpnn::prepare_input(p, kb, teacher.config));
  const std::size_t n = kb.size();
  std::vector<std::vector<double>> mean_groups(n);
  for (std::size_t i = 0; i < n; ++i) {
    mean_groups[i].assign(kb.phenotypes[i].genes.size(), 0.0);
    for (const auto& in : inputs)
      for (std::size_t g = 0; g < in[i].size(); ++g) mean_groups[i][g] += in[i][g];
    for (auto& v : mean_groups[i]) v /= static_cast<double>(inputs.size());
  }
  const Matrix z_base = gpnn::encode_phenotypes(mean_groups, teacher);

  GeneTable out;
  out.phenotype_names = kb.names();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& enc = teacher.encoders[i];
    Matrix z = z_base;
    const ValueFn f = [&](std::span<const double> genes) {
      const Matrix pre = matmul(Matrix::row_vector(genes), enc.w1.value) + enc.b1.value;
      Matrix hid = pre;
      for (auto& x : hid.values()) x = x > 0.0 ? x : 0.0;
      const Matrix zi = matmul(hid, enc.w2.value) + enc.b2.value;
      for (std::size_t r = 0; r < z.cols(); ++r) z(i, r) = zi[r];
      std::vector<double> raw(n);
      for (std::size_t k = 0; k < n; ++k) raw[k] = dot(z.row(k), teacher.w_g.value.row(0));
      return apply_activation(raw, teacher.config.activation).out[i];
    };
    std::vector<double> acc(mean_groups[i].size(), 0.0);
    for (std::size_t j = 0; j < inputs.size(); ++j) {
      const auto r = shapley_sampled(f, inputs[j][i], mean_groups[i], n_permutations, derive_seed(seed, i * 1000003 + j));
      for (std::size_t g = 0; g < acc.size(); ++g) acc[g] += std::abs(r.values[g]);
    }
    std::vector<RankedItem> ranked;
    for (std::size_t g = 0; g < acc.size(); ++g) {
      ranked.push_back({kb.phenotypes[i].genes[g], acc[g] / static_cast<double>(inputs.size())});
    }
    std::stable_sort(ranked.begin(), ranked.end(), [](const RankedItem& a, const RankedItem& b) { return a.weight > b.weight; });
    ranked.resize(std::min(top_k, ranked.size()));
    out.top.push_back(std::move(ranked));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Leakage diagnostic.

struct LeakageReport {
  std::vector<std::string> phenotype_names;
  std::vector<double> jsd;     // per phenotype
  double concentration = 1.0;  // max / mean
  bool pairwise_mean = false;  // set when the cohort has more than two classes
};

/// Concentration of per-phenotype class separability: max_i JSD_i over
/// mean_i JSD_i (1 when every JSD is zero).
inline double concentration_index(std::span<const double> jsd) {
  if (jsd.empty()) throw DegenerateInputError("concentration of an empty vector");
  const double mean = std::accumulate(jsd.begin(), jsd.end(), 0.0) / static_cast<double>(jsd.size());
  const double mx = *std::max_element(jsd.begin(), jsd.end());
  if (mean <= 0.0) return 1.0;
  return mx / mean;
}

inline LeakageReport leakage_from_saliency(const std::vector<std::vector<double>>& s, std::span<const std::size_t> labels,
                                           std::size_t n_classes, const std::vector<std::string>& names,
                                           std::size_t bins = 128) {
  if (n_classes < 2) throw ConfigError("leakage needs at least two classes");
  const std::size_t n = names.size();
  LeakageReport rep;
  rep.phenotype_names = names;
  rep.jsd.assign(n, 0.0);
  rep.pairwise_mean = n_classes > 2;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::vector<double>> by_class(n_classes);
    for (std::size_t j = 0; j < s.size(); ++j) by_class[labels[j]].push_back(s[j][i]);
    double total = 0.0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < n_classes; ++a)
      for (std::size_t b = a + 1; b < n_classes; ++b) {
        if (by_class[a].empty() || by_class[b].empty()) continue;
        total += metrics::js_divergence(by_class[a], by_class[b], bins);
        ++pairs;
      }
    rep.jsd[i] = pairs ? total / static_cast<double>(pairs) : 0.0;
  }
  rep.concentration = concentration_index(rep.jsd);
  return rep;
}

inline LeakageReport leakage_score(const pamil::Params& student, const Cohort& cohort, const Matrix& u,
                                   const PhenotypeKB& kb, std::size_t bins = 128) {
  const auto s = cohort_saliency(cohort, u, student);
  const auto labels = cohort.labels();
  return leakage_from_saliency(s, labels, cohort.num_classes(), kb.names(), bins);
}

// ---------------------------------------------------------------------------
// CSV exports (9 significant digits).

inline std::string fmt9(double v) { return fmt::format("{:.9g}", v); }

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << text;
  if (!out) throw DataError("short write to '" + path + "'");
}

/// Rows: samples sorted by class then id. Columns: sample_id, class, S per phenotype.
inline std::string saliency_heatmap_csv(const Cohort& cohort, const std::vector<std::vector<double>>& s,
                                        const std::vector<std::string>& names) {
  std::vector<std::size_t> order(cohort.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& ba = cohort.bags[a];
    const auto& bb = cohort.bags[b];
    return ba.label != bb.label ? ba.label < bb.label : ba.sample_id < bb.sample_id;
  });
  std::string out = "sample_id,class";
  for (const auto& n : names) out += "," + csv_escape(n);
  out += "\n";
  for (auto j : order) {
    out += csv_escape(cohort.bags[j].sample_id) + "," + csv_escape(cohort.class_names.at(cohort.bags[j].label));
    for (double v : s[j]) out += "," + fmt9(v);
    out += "\n";
  }
  return out;
}

inline void export_saliency_heatmap(const pamil::Params& student, const Cohort& cohort, const Matrix& u,
                                    const PhenotypeKB& kb, const std::string& path) {
  write_text(path, saliency_heatmap_csv(cohort, cohort_saliency(cohort, u, student), kb.names()));
}

/// Attention rows of the top-k phenotypes (by |phi| of the predicted-class
/// logit against `baseline`) for one bag. Columns: patch, phenotype names.
/// Each column sums to 1 over patches.
inline std::string attention_heatmap_csv(const pamil::Params& student, const FeatureBag& bag, const Matrix& u,
                                         const PhenotypeKB& kb, std::size_t top_k, std::span<const double> baseline) {
  if (student.config.head != pamil::Head::kScoreLinear) throw ConfigError("attention export needs the score head");
  const auto t = pamil::forward(bag, u, student);
  std::size_t pred = 0;
  for (std::size_t k = 1; k < t.logits.size(); ++k)
    if (t.logits[k] > t.logits[pred]) pred = k;
  std::vector<double> base(baseline.begin(), baseline.end());
  if (base.empty()) base.assign(t.S().size(), 0.0);
  const auto phi = sample_phenotype_shapley(student, t.S(), base, pred).values;
  std::vector<std::size_t> order(phi.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return std::abs(phi[a]) > std::abs(phi[b]); });
  order.resize(std::min(top_k, order.size()));
  const auto names = kb.names();
  std::string out = "patch";
  for (auto i : order) out += "," + csv_escape(names[i]);
  out += "\n";
  for (std::size_t m = 0; m < t.A().cols(); ++m) {
    out += std::to_string(m);
    for (auto i : order) out += "," + fmt9(t.A()(i, m));
    out += "\n";
  }
  return out;
}

/// Edge list over gene -> phenotype and phenotype -> class layers. Weights
/// are the mean |phi| tables, passed through unchanged.
inline std::string sankey_csv(const GeneTable& genes, const ContributionTable& phenotypes) {
  std::string out = "source,target,weight,layer\n";
  for (std::size_t i = 0; i < genes.phenotype_names.size(); ++i)
    for (const auto& g : genes.top[i])
      out += csv_escape(g.name) + "," + csv_escape(genes.phenotype_names[i]) + "," + fmt9(g.weight) + ",gene_phenotype\n";
  for (std::size_t c = 0; c < phenotypes.class_names.size(); ++c)
    for (std::size_t i = 0; i < phenotypes.phenotype_names.size(); ++i)
      out += csv_escape(phenotypes.phenotype_names[i]) + "," + csv_escape(phenotypes.class_names[c]) + "," +
             fmt9(phenotypes.values[c][i]) + ",phenotype_class\n";
  return out;
}

inline std::string contributions_csv(const ContributionTable& t) {
  std::string out = "class,rank,phenotype,mean_abs_shapley\n";
  for (std::size_t c = 0; c < t.class_names.size(); ++c) {
    const auto r = t.ranked(c);
    for (std::size_t k = 0; k < r.size(); ++k)
      out += fmt::format("{},{},{},{}\n", csv_escape(t.class_names[c]), k + 1, csv_escape(r[k].name), fmt9(r[k].weight));
  }
  return out;
}

inline std::string genes_csv(const GeneTable& t) {
  std::string out = "phenotype,rank,gene,mean_abs_shapley\n";
  for (std::size_t i = 0; i < t.phenotype_names.size(); ++i)
    for (std::size_t k = 0; k < t.top[i].size(); ++k)
      out += fmt::format("{},{},{},{}\n", csv_escape(t.phenotype_names[i]), k + 1, csv_escape(t.top[i][k].name),
                         fmt9(t.top[i][k].weight));
  return out;
}

inline std::string leakage_csv(const LeakageReport& r) {
  std::string out = "phenotype,jsd\n";
  for (std::size_t i = 0; i < r.jsd.size(); ++i) out += csv_escape(r.phenotype_names[i]) + "," + fmt9(r.jsd[i]) + "\n";
  out += "concentration_index," + fmt9(r.concentration) + "\n";
  return out;
}

}  // namespace phenomil::explain
