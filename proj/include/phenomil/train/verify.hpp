#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "phenomil/core/gradcheck.hpp"
#include "phenomil/data/synthetic.hpp"
#include "phenomil/knowledge/embedding.hpp"
#include "phenomil/model/gpnn.hpp"
#include "phenomil/model/pamil.hpp"
#include "phenomil/train/trainer.hpp"

namespace phenomil::train {

struct GradCheckEntry {
  std::string name;
  double max_relative_error = 0.0;
  std::size_t probes = 0;
};

/// Tiny fixture: a synthetic KB with `n_phenotypes` gene sets of
/// `genes_per_set` genes, pseudo embeddings, and one sample with `patches`
/// patches plus its transcriptome.
struct GradFixture {
  PhenotypeKB kb;
  Matrix u;
  Cohort cohort;
};

inline GradFixture make_grad_fixture(std::size_t n_phenotypes, std::size_t genes_per_set, std::size_t patches,
                                     std::size_t d, std::uint64_t seed) {
  GradFixture f;
  f.kb = make_synthetic_kb(n_phenotypes, genes_per_set, false);
  f.u = embed_phenotypes(f.kb, EmbeddingSource::pseudo(d, seed));
  SyntheticConfig cfg;
  cfg.n_samples_per_class = 1;
  cfg.patches_min = patches;
  cfg.patches_max = patches;
  cfg.d = d;
  cfg.seed = seed;
  cfg.saliency_profiles = default_saliency_profiles(n_phenotypes, 2);
  f.cohort = generate_synthetic_cohort(f.kb, f.u, cfg);
  return f;
}

/// Hook used by negative-control tests: perturbs one analytic gradient
/// entry after the backward pass.
inline void corrupt_first_gradient(const ParamRefs& params) {
  if (!params.empty() && params[0]->grad.size() > 0) params[0]->grad[0] += 1.0;
}

/// Gradient checks over every trainable configuration: PA-MIL joint loss
/// with each guidance objective and activation, both heads, the phenotype
/// phase, and the GP-NN loss under both activations.
inline std::vector<GradCheckEntry> run_gradient_suite(std::uint64_t seed, std::size_t probe_count = 32,
                                                      double eps = 1e-5, bool corrupt = false) {
  std::vector<GradCheckEntry> out;
  GradCheckOptions opts;
  opts.probe_count = probe_count;
  opts.eps = eps;
  opts.seed = seed;

  struct Case {
    std::string name;
    Objective objective;
    Activation activation;
    pamil::Head head;
    Phase phase;
    std::size_t n_phenotypes;
    std::size_t patches;
  };
  const std::vector<Case> cases{
      {"pamil_joint_l2", Objective::kL2, Activation::kLayerNorm, pamil::Head::kScoreLinear, Phase::kJoint, 2, 5},
      {"pamil_joint_l1", Objective::kL1, Activation::kLayerNorm, pamil::Head::kScoreLinear, Phase::kJoint, 2, 5},
      {"pamil_joint_cl", Objective::kContrastive, Activation::kLayerNorm, pamil::Head::kScoreLinear, Phase::kJoint, 2, 5},
      {"pamil_joint_l2_n4", Objective::kL2, Activation::kLayerNorm, pamil::Head::kScoreLinear, Phase::kJoint, 4, 7},
      {"pamil_joint_l2_leaky", Objective::kL2, Activation::kLeakyRelu, pamil::Head::kScoreLinear, Phase::kJoint, 4, 7},
      {"pamil_joint_feature_head", Objective::kL2, Activation::kLayerNorm, pamil::Head::kFeatureMlp, Phase::kJoint, 4, 7},
      {"pamil_phase1_l2", Objective::kL2, Activation::kLayerNorm, pamil::Head::kScoreLinear, Phase::kPhenotype, 4, 7},
      {"pamil_phase2", Objective::kL2, Activation::kLayerNorm, pamil::Head::kScoreLinear, Phase::kClassifier, 4, 7},
  };
  const std::size_t d = 8;
  for (const auto& c : cases) {
    const auto fx = make_grad_fixture(c.n_phenotypes, 3, c.patches, d, seed);
    gpnn::Config gc;
    gc.d = d;
    gc.activation.kind = c.activation;
    const auto teacher = gpnn::make_params(fx.kb, 2, gc, derive_seed(seed, "teacher"));
    const auto targets = teacher_targets(teacher, fx.cohort, fx.kb);
    pamil::Config pc;
    pc.activation.kind = c.activation;
    pc.head = c.head;
    pc.init_std = 0.3;  // non-trivial weights so every term carries gradient
    pc.bottleneck_init_std = 0.3;
    auto student = pamil::make_params(fx.u, 2, pc, seed);
    // Move centers off U so the alignment term is not at a symmetric point.
    Rng rng(derive_seed(seed, "centers"));
    axpy(1.0, gaussian_matrix(fx.u.rows(), d, 0.2, rng), student.centers.value);
    GuidanceConfig g;
    g.objective = c.objective;
    g.lambda = 1.0;
    const auto& bag = fx.cohort.bags[0];
    const auto refs = c.phase == Phase::kJoint        ? student.trainable()
                      : c.phase == Phase::kPhenotype ? student.phenotype_params()
                                                     : student.classifier_params();
    const LossFn loss = [&](bool accumulate) {
      const double v = sample_objective(bag, fx.u, student, &targets[0], g, c.phase, accumulate).total;
      if (accumulate && corrupt) corrupt_first_gradient(refs);
      return v;
    };
    const auto rep = check_gradients(loss, refs, opts);
    out.push_back({c.name, rep.max_relative_error, rep.probes.size()});
  }

  for (auto act : {Activation::kLayerNorm, Activation::kLeakyRelu}) {
    const auto fx = make_grad_fixture(2, 3, 5, d, seed);
    gpnn::Config gc;
    gc.d = d;
    gc.activation.kind = act;
    auto teacher = gpnn::make_params(fx.kb, 2, gc, seed);
    // Larger classifier weights keep the CE gradient well above round-off.
    Rng rng(derive_seed(seed, "gpnn-cls"));
    teacher.cls_w.value = gaussian_matrix(2, fx.kb.size(), 1.0, rng);
    const auto groups = gpnn::prepare_input(fx.cohort.profiles[0], fx.kb, gc);
    const auto label = fx.cohort.bags[0].label;
    auto refs = teacher.trainable();
    const LossFn loss = [&](bool accumulate) {
      const double v = gpnn::loss_and_backward(groups, label, teacher, accumulate);
      if (accumulate && corrupt) corrupt_first_gradient(refs);
      return v;
    };
    const auto rep = check_gradients(loss, refs, opts);
    out.push_back({act == Activation::kLayerNorm ? "gpnn_ln" : "gpnn_leaky", rep.max_relative_error, rep.probes.size()});
  }
  return out;
}

}  // namespace phenomil::train
