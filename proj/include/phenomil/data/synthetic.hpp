#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "phenomil/core/error.hpp"
#include "phenomil/core/matrix.hpp"
#include "phenomil/core/rng.hpp"
#include "phenomil/data/cohort.hpp"
#include "phenomil/knowledge/kb.hpp"

namespace phenomil {

/// Planted-truth cohort generator settings.
///
/// Each bag of class c draws its patch count uniformly from
/// [patches_min, patches_max], assigns every patch a phenotype sampled from
/// saliency_profiles[c], and sets the patch feature to that phenotype's text
/// embedding plus isotropic Gaussian noise. The paired transcriptome is
///   expression(g) = sum over phenotypes i containing g of
///                   exp(mu0 + beta * scale(g) * saliency_i + sigma_g * eps)
/// where saliency is the bag's empirical phenotype proportion.
struct SyntheticConfig {
  std::size_t n_samples_per_class = 50;
  std::size_t patches_min = 48;
  std::size_t patches_max = 96;
  std::size_t d = 32;
  double noise_sigma = 0.3;
  std::vector<std::vector<double>> saliency_profiles;  // C rows of length N
  std::size_t genes_per_phenotype = 8;                 // used by make_synthetic_kb
  std::uint64_t seed = 1;

  double expr_mu0 = 0.0;
  double expr_beta = 2.0;
  double expr_sigma = 0.25;
  std::map<std::string, double> gene_signal_scale;  // per-gene multiplier on beta

  // Strength of a class-dependent offset along a seeded unit direction,
  // added to every patch (+s for odd labels, -s for even). Zero disables it.
  double class_signal = 0.0;
  // When set, only patches of this phenotype carry the class offset.
  std::optional<std::size_t> class_signal_phenotype;

  std::vector<std::string> class_names;  // defaults to class0, class1, ...
};

inline void validate_synthetic_config(const SyntheticConfig& cfg, const Matrix& u) {
  if (cfg.n_samples_per_class < 1) throw ConfigError("n_samples_per_class must be >= 1");
  if (cfg.patches_min < 1 || cfg.patches_min > cfg.patches_max) throw ConfigError("invalid patch count range");
  if (!(cfg.noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
  if (!(cfg.expr_sigma >= 0.0)) throw ConfigError("expression sigma must be >= 0");
  if (cfg.saliency_profiles.size() < 2) throw ConfigError("need saliency profiles for at least 2 classes");
  if (u.cols() != cfg.d) throw ConfigError("embedding dimension does not match config d");
  for (const auto& row : cfg.saliency_profiles) {
    if (row.size() != u.rows()) throw ConfigError("saliency profile length must equal phenotype count");
    double sum = 0.0;
    for (double v : row) {
      if (!(v >= 0.0)) throw ConfigError("saliency profile weights must be non-negative");
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("saliency profile rows must sum to 1");
  }
  if (cfg.class_signal_phenotype && *cfg.class_signal_phenotype >= u.rows()) {
    throw ConfigError("class signal phenotype index out of range");
  }
  if (!cfg.class_names.empty() && cfg.class_names.size() != cfg.saliency_profiles.size()) {
    throw ConfigError("class_names length must equal the number of saliency profiles");
  }
}

/// Geometric-decay profiles: class c ranks phenotype i at position
/// (i + c * floor(N / C)) mod N and weights rank r by decay^r.
inline std::vector<std::vector<double>> default_saliency_profiles(std::size_t n_phenotypes, std::size_t n_classes,
                                                                  double decay = 0.55) {
  std::vector<std::vector<double>> out(n_classes, std::vector<double>(n_phenotypes));
  const std::size_t shift = std::max<std::size_t>(1, n_phenotypes / n_classes);
  for (std::size_t c = 0; c < n_classes; ++c) {
    double sum = 0.0;
    for (std::size_t i = 0; i < n_phenotypes; ++i) {
      const std::size_t rank = (i + n_phenotypes - (c * shift) % n_phenotypes) % n_phenotypes;
      out[c][i] = std::pow(decay, static_cast<double>(rank));
      sum += out[c][i];
    }
    for (auto& v : out[c]) v /= sum;
  }
  return out;
}

/// A phenotype-agnostic profile shared by every class (for leakage studies).
inline std::vector<std::vector<double>> shared_saliency_profiles(std::size_t n_phenotypes, std::size_t n_classes,
                                                                 double decay = 0.55) {
  const auto one = default_saliency_profiles(n_phenotypes, 1, decay);
  return std::vector<std::vector<double>>(n_classes, one[0]);
}

/// Toy KB: phenotype i owns genes G<i>_0..G<i>_{g-1}; with `share_next`
/// it additionally lists G<i+1>_0 so neighbouring gene sets overlap.
inline PhenotypeKB make_synthetic_kb(std::size_t n_phenotypes, std::size_t genes_per_phenotype, bool share_next = true) {
  PhenotypeKB kb;
  kb.cancer = "SYNTH";
  for (std::size_t i = 0; i < n_phenotypes; ++i) {
    Phenotype p;
    p.name = fmt::format("Phenotype {}", i);
    p.description = fmt::format("synthetic morphology pattern number {}", i);
    for (std::size_t k = 0; k < genes_per_phenotype; ++k) p.genes.push_back(fmt::format("G{}_{}", i, k));
    if (share_next && n_phenotypes > 1) p.genes.push_back(fmt::format("G{}_0", (i + 1) % n_phenotypes));
    kb.phenotypes.push_back(std::move(p));
  }
  validate_kb(kb);
  return kb;
}

inline std::vector<double> class_signal_direction(std::size_t d, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "class-signal-direction"));
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> v(d);
  double n = 0.0;
  for (auto& x : v) {
    x = gauss(rng);
    n += x * x;
  }
  n = std::sqrt(n);
  for (auto& x : v) x /= n;
  return v;
}

/// Deterministic in (kb, u, cfg). Features and planted saliency are rounded
/// to float so the in-memory cohort equals what the bag files store.
/// `patch_phenotypes`, when given, receives each bag's per-patch phenotype.
inline Cohort generate_synthetic_cohort(const PhenotypeKB& kb, const Matrix& u, const SyntheticConfig& cfg,
                                        std::vector<std::vector<std::size_t>>* patch_phenotypes = nullptr) {
  if (u.rows() != kb.size()) throw ConfigError("embedding rows must equal KB phenotype count");
  validate_synthetic_config(cfg, u);
  const std::size_t n_classes = cfg.saliency_profiles.size();
  const std::size_t n_phen = kb.size();
  const auto genes = kb.all_genes();
  std::map<std::string, std::vector<std::size_t>> owners;
  for (std::size_t i = 0; i < n_phen; ++i)
    for (const auto& g : kb.phenotypes[i].genes) owners[g].push_back(i);
  const auto signal_dir = cfg.class_signal != 0.0 ? class_signal_direction(cfg.d, cfg.seed) : std::vector<double>{};

  Cohort cohort;
  cohort.kb_name = kb.cancer;
  for (std::size_t c = 0; c < n_classes; ++c) {
    cohort.class_names.push_back(cfg.class_names.empty() ? fmt::format("class{}", c) : cfg.class_names[c]);
  }

  if (patch_phenotypes) patch_phenotypes->clear();
  std::size_t sample_index = 0;
  for (std::size_t c = 0; c < n_classes; ++c) {
    std::discrete_distribution<std::size_t> pick(cfg.saliency_profiles[c].begin(), cfg.saliency_profiles[c].end());
    for (std::size_t s = 0; s < cfg.n_samples_per_class; ++s, ++sample_index) {
      Rng rng(derive_seed(cfg.seed, sample_index));
      std::uniform_int_distribution<std::size_t> count_dist(cfg.patches_min, cfg.patches_max);
      std::normal_distribution<double> noise(0.0, 1.0);
      const std::size_t m = count_dist(rng);

      FeatureBag bag;
      bag.sample_id = fmt::format("s{:04d}", sample_index);
      bag.label = c;
      bag.features = Matrix(m, cfg.d);
      std::vector<double> counts(n_phen, 0.0);
      std::vector<std::size_t> assigned(m);
      const double sign = (c % 2 == 1) ? 1.0 : -1.0;
      for (std::size_t p = 0; p < m; ++p) {
        const std::size_t ph = pick(rng);
        counts[ph] += 1.0;
        assigned[p] = ph;
        for (std::size_t j = 0; j < cfg.d; ++j) {
          double v = u(ph, j) + cfg.noise_sigma * noise(rng);
          if (!signal_dir.empty() && (!cfg.class_signal_phenotype || *cfg.class_signal_phenotype == ph)) {
            v += sign * cfg.class_signal * signal_dir[j];
          }
          bag.features(p, j) = static_cast<double>(static_cast<float>(v));
        }
      }
      std::vector<double> planted(n_phen);
      for (std::size_t i = 0; i < n_phen; ++i) {
        planted[i] = static_cast<double>(static_cast<float>(counts[i] / static_cast<double>(m)));
      }
      bag.planted_saliency = planted;
      if (patch_phenotypes) patch_phenotypes->push_back(std::move(assigned));

      TranscriptomeProfile prof;
      prof.sample_id = bag.sample_id;
      for (const auto& g : genes) {
        const auto it = cfg.gene_signal_scale.find(g);
        const double scale = it == cfg.gene_signal_scale.end() ? 1.0 : it->second;
        double value = 0.0;
        for (auto i : owners[g]) {
          value += std::exp(cfg.expr_mu0 + cfg.expr_beta * scale * planted[i] + cfg.expr_sigma * noise(rng));
        }
        prof.expression[g] = value;
      }
      cohort.bags.push_back(std::move(bag));
      cohort.profiles.push_back(std::move(prof));
    }
  }
  return cohort;
}

}  // namespace phenomil
