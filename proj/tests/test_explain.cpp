#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "phenomil/data/synthetic.hpp"
#include "phenomil/explain/analysis.hpp"
#include "phenomil/explain/shapley.hpp"
#include "phenomil/knowledge/embedding.hpp"
#include "phenomil/train/trainer.hpp"

using namespace phenomil;
using namespace phenomil::explain;

namespace {

// Independent oracle: Shapley by averaging marginals over every ordering.
std::vector<double> shapley_by_orderings(const ValueFn& f, const std::vector<double>& x, const std::vector<double>& b) {
  const std::size_t n = x.size();
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<double> phi(n, 0.0);
  double count = 0.0;
  do {
    std::vector<double> p = b;
    double prev = f(p);
    for (auto i : perm) {
      p[i] = x[i];
      const double cur = f(p);
      phi[i] += cur - prev;
      prev = cur;
    }
    count += 1.0;
  } while (std::next_permutation(perm.begin(), perm.end()));
  for (auto& v : phi) v /= count;
  return phi;
}

std::vector<double> random_vec(std::size_t n, Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

// Nonlinear game with interactions.
double game(std::span<const double> s) {
  double v = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) v += std::sin(s[i]) * (1.0 + 0.3 * static_cast<double>(i));
  for (std::size_t i = 0; i + 1 < s.size(); ++i) v += s[i] * s[i + 1];
  return v + std::max(s[0], s[s.size() - 1]);
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST(Shapley, LinearGameClosedFormAtFiveFeatures) {
  Rng rng(1);
  const auto w = random_vec(5, rng), x = random_vec(5, rng), b = random_vec(5, rng);
  const ValueFn f = [&](std::span<const double> s) { return dot(w, s) + 0.7; };
  const auto r = shapley_exact(f, x, b);
  const auto oracle = shapley_by_orderings(f, x, b);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_NEAR(r.values[i], w[i] * (x[i] - b[i]), 1e-12);
    EXPECT_NEAR(r.values[i], oracle[i], 1e-12);
  }
}

TEST(Shapley, ExactMatchesOrderingOracleOnNonlinearGame) {
  Rng rng(2);
  const auto x = random_vec(6, rng), b = random_vec(6, rng);
  const auto r = shapley_exact(game, x, b);
  const auto oracle = shapley_by_orderings(game, x, b);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(r.values[i], oracle[i], 1e-12);
  EXPECT_LE(std::abs(r.efficiency_gap()), 1e-9);
}

TEST(Shapley, NullPlayerAndConstantGame) {
  const ValueFn constant = [](std::span<const double>) { return 4.0; };
  const std::vector<double> x{1, 2, 3}, b{0, 0, 0};
  for (double v : shapley_exact(constant, x, b).values) EXPECT_EQ(v, 0.0);
  for (double v : shapley_sampled(constant, x, b, 50, 9).values) EXPECT_EQ(v, 0.0);
  const ValueFn ignores_1 = [](std::span<const double> s) { return s[0] * s[2]; };
  EXPECT_NEAR(shapley_exact(ignores_1, x, b).values[1], 0.0, 1e-15);
}

TEST(Shapley, SymmetricPlayersShareEqually) {
  const ValueFn all_on = [](std::span<const double> s) { return (s[0] > 0.5 && s[1] > 0.5 && s[2] > 0.5) ? 1.0 : 0.0; };
  const auto r = shapley_exact(all_on, std::vector<double>{1, 1, 1}, std::vector<double>{0, 0, 0});
  for (double v : r.values) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Shapley, EfficiencyAcrossRandomGames) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Rng rng(seed);
    const std::size_t n = 2 + seed % 9;
    const auto x = random_vec(n, rng), b = random_vec(n, rng);
    const auto r = shapley_exact(game, x, b);
    EXPECT_LE(std::abs(r.efficiency_gap()), 1e-9);
    EXPECT_EQ(r.base_value, game(b));
    EXPECT_EQ(r.full_value, game(x));
  }
}

TEST(Shapley, SampledConvergesToExact) {
  Rng rng(3);
  const auto x = random_vec(8, rng), b = random_vec(8, rng);
  const auto exact = shapley_exact(game, x, b);
  const auto sampled = shapley_sampled(game, x, b, 20000, 11);
  const auto [lo, hi] = std::minmax_element(exact.values.begin(), exact.values.end());
  for (std::size_t i = 0; i < 8; ++i) EXPECT_LE(std::abs(sampled.values[i] - exact.values[i]), 0.05 * (*hi - *lo));
  EXPECT_EQ(sampled.method, ShapleyMethod::kPermutation);
  EXPECT_EQ(sampled.n_permutations, 20000u);
}

TEST(Shapley, SampledIsDeterministicInSeed) {
  Rng rng(4);
  const auto x = random_vec(7, rng), b = random_vec(7, rng);
  EXPECT_EQ(shapley_sampled(game, x, b, 100, 5).values, shapley_sampled(game, x, b, 100, 5).values);
  EXPECT_NE(shapley_sampled(game, x, b, 100, 5).values, shapley_sampled(game, x, b, 100, 6).values);
}

TEST(Shapley, BudgetAndArgumentErrors) {
  const std::vector<double> big(21, 1.0);
  EXPECT_THROW(shapley_exact(game, big, big), BudgetError);
  EXPECT_THROW(shapley_exact(game, std::vector<double>{1, 2}, std::vector<double>{1}), ShapeError);
  EXPECT_THROW(shapley_sampled(game, std::vector<double>{1, 2}, std::vector<double>{1, 2}, 0, 1), ConfigError);
}

// ---------------------------------------------------------------------------
// Model-level analyses

namespace {

struct Setup {
  PhenotypeKB kb;
  Matrix u;
  Cohort cohort;
};

Setup make_setup(std::vector<std::vector<double>> profiles, std::size_t per_class, std::uint64_t seed = 1,
                 std::map<std::string, double> gene_scale = {}) {
  Setup s;
  s.kb = make_synthetic_kb(profiles[0].size(), 6, false);
  s.u = embed_phenotypes(s.kb, EmbeddingSource::pseudo(32, seed));
  SyntheticConfig cfg;
  cfg.d = 32;
  cfg.n_samples_per_class = per_class;
  cfg.patches_min = 24;
  cfg.patches_max = 48;
  cfg.saliency_profiles = std::move(profiles);
  cfg.gene_signal_scale = std::move(gene_scale);
  cfg.seed = seed;
  s.cohort = generate_synthetic_cohort(s.kb, s.u, cfg);
  return s;
}

pamil::Params trained_student(const Setup& s, std::size_t epochs) {
  auto p = pamil::make_params(s.u, s.cohort.num_classes(), pamil::Config{}, 1);
  train::TrainConfig tc;
  tc.epochs = epochs;
  tc.guidance.use_feat = tc.guidance.use_logit = false;
  tc.adam.accumulation_steps = 4;
  train::train_joint(s.cohort, s.u, p, nullptr, tc);
  return p;
}

}  // namespace

TEST(Contributions, ScoreHeadShapleyIsWeightTimesDeviation) {
  auto s = make_setup(default_saliency_profiles(5, 2), 10);
  pamil::Config pc;
  pc.bottleneck_init_std = 0.5;
  const auto student = pamil::make_params(s.u, 2, pc, 3);
  const auto sal = cohort_saliency(s.cohort, s.u, student);
  const auto base = mean_rows(sal);
  for (std::size_t j = 0; j < 5; ++j)
    for (std::size_t c = 0; c < 2; ++c) {
      const auto r = sample_phenotype_shapley(student, sal[j], base, c);
      for (std::size_t i = 0; i < 5; ++i)
        EXPECT_NEAR(r.values[i], student.cls_w.value(c, i) * (sal[j][i] - base[i]), 1e-12);
    }
}

TEST(Contributions, ZeroClassifierGivesZeroTable) {
  auto s = make_setup(default_saliency_profiles(4, 2), 6);
  pamil::Config pc;
  pc.bottleneck_init_std = 0.5;
  auto student = pamil::make_params(s.u, 2, pc, 3);
  student.cls_w.value.fill(0.0);
  const auto t = phenotype_contributions(student, s.cohort, s.u, s.kb);
  for (const auto& row : t.values)
    for (double v : row) EXPECT_EQ(v, 0.0);
}

TEST(Contributions, SinglePhenotypeClassRanksThatPhenotypeFirst) {
  auto s = make_setup({{1.0, 0.0, 0.0, 0.0}, {0.0, 1.0 / 3, 1.0 / 3, 1.0 / 3}}, 30);
  const auto student = trained_student(s, 10);
  const auto t = phenotype_contributions(student, s.cohort, s.u, s.kb);
  EXPECT_EQ(t.ranked(0).front().name, "Phenotype 0");
  const auto csv = contributions_csv(t);
  EXPECT_EQ(count_lines(csv), 1 + 2 * 4u);
}

TEST(Contributions, FeatureHeadIsRejected) {
  auto s = make_setup(default_saliency_profiles(4, 2), 2);
  pamil::Config pc;
  pc.head = pamil::Head::kFeatureMlp;
  EXPECT_THROW(phenotype_contributions(pamil::make_params(s.u, 2, pc, 1), s.cohort, s.u, s.kb), ConfigError);
}

TEST(GeneContributions, AmplifiedGeneRanksFirst) {
  auto s = make_setup(default_saliency_profiles(4, 2), 25, 1, {{"G0_3", 10.0}});
  gpnn::Config gc;
  auto teacher = gpnn::make_params(s.kb, 2, gc, 2);
  gpnn::train_gpnn(s.cohort, s.kb, teacher, AdamConfig{}, 10, 2);
  const auto t = gene_phenotype_contributions(teacher, s.cohort, s.kb, 64, 5, 4);
  ASSERT_EQ(t.top.size(), 4u);
  EXPECT_EQ(t.top[0].front().name, "G0_3");
  for (const auto& row : t.top) EXPECT_EQ(row.size(), 4u);
  const auto again = gene_phenotype_contributions(teacher, s.cohort, s.kb, 64, 5, 4);
  EXPECT_EQ(genes_csv(again), genes_csv(t));
  EXPECT_EQ(gene_phenotype_contributions(teacher, s.cohort, s.kb, 8, 5, 100).top[1].size(), 6u);
}

TEST(GeneContributions, NeedsProfiles) {
  auto s = make_setup(default_saliency_profiles(4, 2), 2);
  auto teacher = gpnn::make_params(s.kb, 2, gpnn::Config{}, 1);
  s.cohort.profiles.clear();
  EXPECT_THROW(gene_phenotype_contributions(teacher, s.cohort, s.kb, 8, 1, 4), DataError);
}

TEST(Leakage, ClassIndependentSaliencyHasZeroDivergence) {
  const std::vector<std::vector<double>> sal{{0.1, 0.5}, {0.2, 0.4}, {0.1, 0.5}, {0.2, 0.4}};
  const std::vector<std::size_t> lab{0, 0, 1, 1};
  const auto r = leakage_from_saliency(sal, lab, 2, {"a", "b"});
  for (double v : r.jsd) EXPECT_NEAR(v, 0.0, 1e-9);
  EXPECT_EQ(r.concentration, 1.0);
  EXPECT_FALSE(r.pairwise_mean);
}

TEST(Leakage, ConcentrationIndex) {
  EXPECT_DOUBLE_EQ(concentration_index(std::vector<double>{0.0, 0.0}), 1.0);
  EXPECT_DOUBLE_EQ(concentration_index(std::vector<double>{1.0, 0.0, 0.0, 0.0}), 4.0);
  EXPECT_DOUBLE_EQ(concentration_index(std::vector<double>{0.2, 0.2, 0.2}), 1.0);
}

TEST(Leakage, UntrainedStudentIsNotConcentrated) {
  auto s = make_setup(shared_saliency_profiles(6, 2), 40);
  double mean_conc = 0.0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    pamil::Config pc;
    pc.bottleneck_init_std = 0.5;
    const auto student = pamil::make_params(s.u, 2, pc, seed);
    const auto r = leakage_score(student, s.cohort, s.u, s.kb, 16);
    for (double v : r.jsd) EXPECT_LT(v, 0.35);
    mean_conc += r.concentration / 20.0;
  }
  EXPECT_LT(mean_conc, 2.0);
  const auto zero_bottleneck = pamil::make_params(s.u, 2, pamil::Config{}, 1);
  EXPECT_EQ(leakage_score(zero_bottleneck, s.cohort, s.u, s.kb).concentration, 1.0);
}

TEST(Leakage, MultiClassUsesPairwiseMean) {
  const std::vector<std::vector<double>> sal{{0.0}, {1.0}, {2.0}};
  const auto r = leakage_from_saliency(sal, std::vector<std::size_t>{0, 1, 2}, 3, {"a"}, 4);
  EXPECT_TRUE(r.pairwise_mean);
  EXPECT_NEAR(r.jsd[0], 1.0, 1e-9);
  EXPECT_EQ(count_lines(leakage_csv(r)), 3u);
}

// ---------------------------------------------------------------------------
// Exports

TEST(Exports, SaliencyHeatmapShape) {
  auto s = make_setup(default_saliency_profiles(4, 2), 5);
  const auto student = pamil::make_params(s.u, 2, pamil::Config{}, 1);
  const auto csv = saliency_heatmap_csv(s.cohort, cohort_saliency(s.cohort, s.u, student), s.kb.names());
  EXPECT_EQ(count_lines(csv), s.cohort.size() + 1);
  std::istringstream in(csv);
  std::string line;
  while (std::getline(in, line)) EXPECT_EQ(std::count(line.begin(), line.end(), ','), 4 + 1);
}

TEST(Exports, AttentionColumnsSumToOne) {
  auto s = make_setup(default_saliency_profiles(5, 2), 3);
  pamil::Config pc;
  pc.bottleneck_init_std = 0.5;
  const auto student = pamil::make_params(s.u, 2, pc, 2);
  const auto csv = attention_heatmap_csv(student, s.cohort.bags[0], s.u, s.kb, 3, {});
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(std::count(line.begin(), line.end(), ','), 3);
  std::vector<double> sums(3, 0.0);
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    std::istringstream cells(line);
    std::string cell;
    std::getline(cells, cell, ',');
    for (std::size_t k = 0; k < 3; ++k) {
      std::getline(cells, cell, ',');
      sums[k] += std::stod(cell);
    }
    ++rows;
  }
  EXPECT_EQ(rows, s.cohort.bags[0].features.rows());
  for (double v : sums) EXPECT_NEAR(v, 1.0, 1e-6);
}

TEST(Exports, SankeyPassesWeightsThrough) {
  GeneTable g;
  g.phenotype_names = {"P0", "P1"};
  g.top = {{{"A", 0.5}, {"B", 0.25}}, {{"C", 1.5}}};
  ContributionTable c;
  c.class_names = {"x", "y"};
  c.phenotype_names = {"P0", "P1"};
  c.values = {{0.125, 2.0}, {3.0, 0.0}};
  const auto csv = sankey_csv(g, c);
  EXPECT_EQ(csv,
            "source,target,weight,layer\n"
            "A,P0,0.5,gene_phenotype\nB,P0,0.25,gene_phenotype\nC,P1,1.5,gene_phenotype\n"
            "P0,x,0.125,phenotype_class\nP1,x,2,phenotype_class\nP0,y,3,phenotype_class\nP1,y,0,phenotype_class\n");
  EXPECT_EQ(csv_escape("a,b"), "\"a,b\"");
}
