#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "phenomil/core/gradcheck.hpp"
#include "phenomil/data/synthetic.hpp"
#include "phenomil/knowledge/embedding.hpp"
#include "phenomil/metrics/metrics.hpp"
#include "phenomil/model/gpnn.hpp"
#include "phenomil/train/trainer.hpp"

using namespace phenomil;

namespace {

gpnn::Config small_config(std::size_t d = 6) {
  gpnn::Config c;
  c.d = d;
  return c;
}

std::vector<std::vector<double>> random_groups(const PhenotypeKB& kb, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> dist(0.0, 3.0);
  std::vector<std::vector<double>> g;
  for (const auto& p : kb.phenotypes) {
    std::vector<double> row(p.genes.size());
    for (auto& v : row) v = dist(rng);
    g.push_back(row);
  }
  return g;
}

Cohort synthetic_cohort(std::size_t per_class = 50) {
  const auto kb = make_synthetic_kb(4, 8);
  const auto u = embed_phenotypes(kb, EmbeddingSource::pseudo(32, 1));
  SyntheticConfig cfg;
  cfg.n_samples_per_class = per_class;
  cfg.saliency_profiles = default_saliency_profiles(4, 2);
  return generate_synthetic_cohort(kb, u, cfg);
}

}  // namespace

TEST(GpnnEncode, ZeroInputGivesBiasRows) {
  const auto kb = make_synthetic_kb(3, 4);
  auto params = gpnn::make_params(kb, 2, small_config(), 1);
  std::vector<std::vector<double>> zeros;
  for (const auto& p : kb.phenotypes) zeros.emplace_back(p.genes.size(), 0.0);
  // Zero biases: every Z row is zero.
  const auto z0 = gpnn::encode_phenotypes(zeros, params);
  for (double v : z0.values()) EXPECT_EQ(v, 0.0);
  // Non-zero biases propagate through ReLU and the second layer.
  for (std::size_t i = 0; i < 3; ++i) {
    auto& e = params.encoders[i];
    e.b1.value.fill(0.5);
    e.b2.value.fill(-0.25);
  }
  const auto z = gpnn::encode_phenotypes(zeros, params);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& e = params.encoders[i];
    for (std::size_t r = 0; r < 6; ++r) {
      double expect = -0.25;
      for (std::size_t j = 0; j < e.w2.rows(); ++j) expect += 0.5 * e.w2.value(j, r);
      EXPECT_NEAR(z(i, r), expect, 1e-12);
    }
  }
}

TEST(GpnnEncode, HiddenWidthRule) {
  const auto kb = make_synthetic_kb(2, 40, false);
  const auto p = gpnn::make_params(kb, 2, small_config(), 1);
  EXPECT_EQ(p.encoders[0].w1.rows(), 40u);
  EXPECT_EQ(p.encoders[0].w1.cols(), 64u);
  const auto small = gpnn::make_params(make_synthetic_kb(2, 3, false), 2, small_config(), 1);
  EXPECT_EQ(small.encoders[0].w1.cols(), 6u);
}

TEST(GpnnEncode, GroupWidthMismatchThrows) {
  const auto kb = make_synthetic_kb(2, 3);
  const auto params = gpnn::make_params(kb, 2, small_config(), 1);
  auto groups = random_groups(kb, 1);
  groups[1].push_back(1.0);
  EXPECT_THROW(gpnn::encode_phenotypes(groups, params), ShapeError);
  groups.pop_back();
  EXPECT_THROW(gpnn::encode_phenotypes(groups, params), ShapeError);
}

TEST(GpnnEncode, GradientOfFeatureNormMatchesFiniteDifferences) {
  const auto kb = make_synthetic_kb(2, 3);
  auto params = gpnn::make_params(kb, 2, small_config(), 2);
  const auto groups = random_groups(kb, 3);
  // Hand-chained encoder backward with upstream dL/dZ = 2Z.
  const LossFn loss = [&](bool acc) {
    std::vector<gpnn::EncoderCache> cache;
    const Matrix z = gpnn::encode_phenotypes(groups, params, &cache);
    if (acc) {
      for (std::size_t i = 0; i < z.rows(); ++i) {
        auto& e = params.encoders[i];
        const auto& pre = cache[i].hidden_pre;
        std::vector<double> d_pre(pre.size(), 0.0);
        for (std::size_t j = 0; j < pre.size(); ++j) {
          const double hj = std::max(pre[j], 0.0);
          for (std::size_t r = 0; r < z.cols(); ++r) {
            e.w2.grad(j, r) += hj * 2.0 * z(i, r);
            d_pre[j] += e.w2.value(j, r) * 2.0 * z(i, r);
          }
          if (pre[j] <= 0.0) d_pre[j] = 0.0;
          e.b1.grad[j] += d_pre[j];
          for (std::size_t g = 0; g < groups[i].size(); ++g) e.w1.grad(g, j) += groups[i][g] * d_pre[j];
        }
        for (std::size_t r = 0; r < z.cols(); ++r) e.b2.grad[r] += 2.0 * z(i, r);
      }
    }
    return squared_norm(z);
  };
  ParamRefs refs;
  for (auto& e : params.encoders)
    for (auto* p : {&e.w1, &e.b1, &e.w2, &e.b2}) refs.push_back(p);
  GradCheckOptions opts;
  opts.probe_count = 64;
  EXPECT_LE(check_gradients(loss, refs, opts).max_relative_error, 1e-5);
}

TEST(GpnnEncode, WithinSetPermutationIsReparameterization) {
  const auto kb = make_synthetic_kb(3, 4);
  auto params = gpnn::make_params(kb, 2, small_config(), 4);
  auto groups = random_groups(kb, 5);
  const auto z = gpnn::encode_phenotypes(groups, params);
  // Permute the genes of set 1 and the matching rows of its first layer.
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  auto permuted = groups;
  auto& w1 = params.encoders[1].w1.value;
  Matrix w1p(w1.rows(), w1.cols());
  for (std::size_t k = 0; k < perm.size(); ++k) {
    permuted[1][k] = groups[1][perm[k]];
    for (std::size_t j = 0; j < w1.cols(); ++j) w1p(k, j) = w1(perm[k], j);
  }
  w1 = w1p;
  const auto z2 = gpnn::encode_phenotypes(permuted, params);
  for (std::size_t i = 0; i < z.size(); ++i) EXPECT_NEAR(z[i], z2[i], 1e-12);
}

TEST(GpnnEncode, RowDependsOnlyOnItsGeneSet) {
  PhenotypeKB kb;
  kb.cancer = "toy";
  kb.phenotypes = {{"A", "", {"a1", "a2", "shared"}}, {"B", "", {"b1", "shared"}}, {"C", "", {"c1", "c2"}}};
  const auto params = gpnn::make_params(kb, 2, small_config(), 6);
  TranscriptomeProfile prof{"s", {{"a1", 2.0}, {"a2", 1.0}, {"shared", 4.0}, {"b1", 3.0}, {"c1", 5.0}, {"c2", 0.5}}};
  const auto base = gpnn::encode_phenotypes(gpnn::prepare_input(prof, kb, params.config), params);
  auto zeroed = prof;
  zeroed.expression["c1"] = 0.0;  // outside A and B
  const auto z = gpnn::encode_phenotypes(gpnn::prepare_input(zeroed, kb, params.config), params);
  for (std::size_t r = 0; r < 6; ++r) {
    EXPECT_EQ(z(0, r), base(0, r));
    EXPECT_EQ(z(1, r), base(1, r));
  }
  EXPECT_NE(z.row(2)[0] + z.row(2)[1], base.row(2)[0] + base.row(2)[1]);
}

TEST(GpnnForward, IdenticalRowsGiveBiasLogits) {
  const auto kb = make_synthetic_kb(3, 4, false);
  auto params = gpnn::make_params(kb, 2, small_config(), 7);
  // Identical encoders on identical inputs give identical Z rows.
  for (std::size_t i = 1; i < 3; ++i) params.encoders[i] = params.encoders[0];
  params.cls_b.value = Matrix(1, 2, std::vector<double>{0.3, -0.7});
  const std::vector<std::vector<double>> groups(3, std::vector<double>{1.0, 2.0, 0.5, 0.0});
  const auto t = gpnn::forward(groups, params);
  for (double s : t.s_hat()) EXPECT_EQ(s, 0.0);
  EXPECT_DOUBLE_EQ(t.logits[0], 0.3);
  EXPECT_DOUBLE_EQ(t.logits[1], -0.7);
}

TEST(GpnnForward, LayerNormSaliencyMoments) {
  const auto kb = make_synthetic_kb(5, 4);
  const auto params = gpnn::make_params(kb, 3, small_config(), 8);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto t = gpnn::forward(random_groups(kb, seed), params);
    double mean = 0.0, var = 0.0;
    for (double s : t.s_hat()) mean += s / 5.0;
    for (double s : t.s_hat()) var += (s - mean) * (s - mean) / 5.0;
    EXPECT_LE(std::abs(mean), 1e-10);
    EXPECT_NEAR(var, 1.0, 1e-3);
  }
}

TEST(GpnnForward, Deterministic) {
  const auto cohort = synthetic_cohort(2);
  const auto kb = make_synthetic_kb(4, 8);
  const auto params = gpnn::make_params(kb, 2, gpnn::Config{}, 9);
  const auto a = gpnn::forward(cohort.profiles[0], kb, params);
  const auto b = gpnn::forward(cohort.profiles[0], kb, params);
  EXPECT_EQ(a.z, b.z);
  EXPECT_EQ(a.logits, b.logits);
}

TEST(GpnnForward, FullLossGradientMatchesFiniteDifferences) {
  for (auto init : {gpnn::Init::kAbundance, gpnn::Init::kGaussian}) {
    for (auto act : {Activation::kLayerNorm, Activation::kLeakyRelu}) {
      const auto kb = make_synthetic_kb(2, 3, false);
      auto cfg = small_config(8);
      cfg.init = init;
      cfg.activation.kind = act;
      auto params = gpnn::make_params(kb, 2, cfg, 10);
      Rng rng(11);
      params.cls_w.value = gaussian_matrix(2, 2, 1.0, rng);
      const auto groups = random_groups(kb, 12);
      const LossFn loss = [&](bool acc) { return gpnn::loss_and_backward(groups, 1, params, acc); };
      GradCheckOptions opts;
      opts.probe_count = 64;
      EXPECT_LE(check_gradients(loss, params.trainable(), opts).max_relative_error, 1e-4)
          << gpnn::to_string(init) << "/" << to_string(act);
    }
  }
}

TEST(GpnnTrain, ZeroLearningRateLeavesParametersUnchanged) {
  const auto cohort = synthetic_cohort(5);
  const auto kb = make_synthetic_kb(4, 8);
  auto params = gpnn::make_params(kb, 2, gpnn::Config{}, 13);
  auto before = params;
  AdamConfig adam;
  adam.learning_rate = 0.0;
  const auto hist = gpnn::train_gpnn(cohort, kb, params, adam, 3, 1);
  const auto a = params.trainable();
  const auto b = before.trainable();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i]->value, b[i]->value) << a[i]->name;
  EXPECT_EQ(hist.epoch_loss.size(), 3u);
}

TEST(GpnnTrain, MissingProfilesIsDataError) {
  auto cohort = synthetic_cohort(2);
  cohort.profiles.clear();
  const auto kb = make_synthetic_kb(4, 8);
  auto params = gpnn::make_params(kb, 2, gpnn::Config{}, 1);
  EXPECT_THROW(gpnn::train_gpnn(cohort, kb, params, AdamConfig{}, 1, 1), DataError);
}

TEST(GpnnTrain, LearnsSyntheticCohortAndIsDeterministic) {
  const auto cohort = synthetic_cohort();
  const auto kb = make_synthetic_kb(4, 8);
  auto params = gpnn::make_params(kb, 2, gpnn::Config{}, 1);
  auto twin = params;
  const auto hist = gpnn::train_gpnn(cohort, kb, params, AdamConfig{}, 20, 1);
  ASSERT_EQ(hist.epoch_loss.size(), 20u);
  EXPECT_LT(hist.epoch_loss.back(), hist.epoch_loss.front());
  const auto out = train::predict_teacher(cohort, kb, params);
  EXPECT_GE(metrics::accuracy(out.predictions, cohort.labels()), 0.95);
  gpnn::train_gpnn(cohort, kb, twin, AdamConfig{}, 20, 1);
  EXPECT_TRUE(params == twin);
}
