#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "phenomil/core/adam.hpp"
#include "phenomil/core/error.hpp"
#include "phenomil/core/kernels.hpp"
#include "phenomil/data/cohort.hpp"
#include "phenomil/knowledge/kb.hpp"
#include "phenomil/model/gpnn.hpp"
#include "phenomil/model/pamil.hpp"
#include "phenomil/train/guidance.hpp"

namespace phenomil::train {

enum class Mode { kSequential, kJoint };

inline std::string to_string(Mode m) { return m == Mode::kJoint ? "joint" : "sequential"; }

inline Mode parse_mode(const std::string& s) {
  if (s == "joint") return Mode::kJoint;
  if (s == "sequential") return Mode::kSequential;
  throw ConfigError("unknown mode '" + s + "' (expected sequential or joint)");
}

/// Which objective a single-sample pass optimizes.
enum class Phase {
  kJoint,           // CE + contrast + lambda (feat + logit), all student tensors
  kPhenotype,       // contrast + lambda (feat + logit), attention and bottleneck only
  kClassifier,      // CE, classifier head only
};

inline std::string to_string(Phase p) {
  switch (p) {
    case Phase::kJoint: return "joint";
    case Phase::kPhenotype: return "phase1";
    case Phase::kClassifier: return "phase2";
  }
  return "joint";
}

/// Frozen-teacher outputs for one sample.
struct TeacherTarget {
  Matrix z;
  std::vector<double> s_hat;
};

inline std::vector<TeacherTarget> teacher_targets(const gpnn::Params& teacher, const Cohort& cohort,
                                                  const PhenotypeKB& kb) {
  if (!cohort.has_profiles()) throw DataError("guided training needs transcriptome profiles");
  std::vector<TeacherTarget> out;
  out.reserve(cohort.size());
  for (const auto& prof : cohort.profiles) {
    auto t = gpnn::forward(prof, kb, teacher);
    out.push_back({std::move(t.z), t.act.out});
  }
  return out;
}

struct LossTerms {
  double l_ce = 0.0;
  double l_contrast = 0.0;
  double l_feat = 0.0;
  double l_logit = 0.0;
  double total = 0.0;
};

/// Forward pass, loss composition for `phase`, and (optionally) backward
/// into the student gradients. Returns the per-term values and the forward
/// trace. Centers are never touched here.
inline LossTerms sample_objective(const FeatureBag& bag, const Matrix& u, pamil::Params& params,
                                  const TeacherTarget* teacher, const GuidanceConfig& guidance, Phase phase,
                                  bool accumulate, pamil::ForwardTrace* trace_out = nullptr) {
  auto t = pamil::forward(bag, u, params);
  LossTerms terms;
  terms.l_ce = t.l_ce;
  terms.l_contrast = t.l_contrast;
  pamil::Upstream up;

  const bool guided = guidance.enabled() && phase != Phase::kClassifier;
  if (guided && teacher == nullptr) throw ConfigError("guidance is enabled but no teacher target was supplied");
  GuidanceLosses g;
  if (guided) {
    g = guidance_losses(t.V(), teacher->z, t.S(), teacher->s_hat, guidance);
    terms.l_feat = g.l_feat;
    terms.l_logit = g.l_logit;
  }
  const double lambda = guidance.lambda;
  switch (phase) {
    case Phase::kJoint:
      terms.total = terms.l_ce + terms.l_contrast + lambda * (terms.l_feat + terms.l_logit);
      break;
    case Phase::kPhenotype:
      terms.total = terms.l_contrast + lambda * (terms.l_feat + terms.l_logit);
      break;
    case Phase::kClassifier:
      terms.total = terms.l_ce;
      break;
  }

  if (accumulate) {
    if (phase != Phase::kPhenotype) up.d_logits = cross_entropy(t.logits, bag.label).grad;
    if (phase != Phase::kClassifier) {
      up.d_v = info_nce(t.V(), params.centers.value, params.config.tau).d_queries;
      if (guided) {
        axpy(lambda, g.d_v, up.d_v);
        up.d_s = g.d_s;
        for (auto& x : up.d_s) x *= lambda;
      }
    }
    const auto scope = phase == Phase::kClassifier ? pamil::BackwardScope::kClassifierOnly : pamil::BackwardScope::kFull;
    pamil::backward(t, bag.features, u, params, up, scope);
  }
  if (trace_out) *trace_out = std::move(t);
  return terms;
}

struct TrainConfig {
  AdamConfig adam;
  GuidanceConfig guidance;
  Mode mode = Mode::kJoint;
  std::size_t epochs = 20;         // joint epochs, or sequential phase 1
  std::size_t epochs_phase2 = 20;  // sequential phase 2
  std::uint64_t seed = 1;

  void validate() const {
    adam.validate();
    guidance.validate();
  }
};

struct EpochRecord {
  Phase phase = Phase::kJoint;
  std::size_t epoch = 0;
  LossTerms mean;
  std::size_t optimizer_steps = 0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  double wall_seconds = 0.0;
  std::uint64_t seed = 0;
  std::size_t optimizer_steps = 0;

  bool all_finite() const {
    for (const auto& e : epochs) {
      const auto& m = e.mean;
      for (double v : {m.l_ce, m.l_contrast, m.l_feat, m.l_logit, m.total})
        if (!std::isfinite(v)) return false;
    }
    return true;
  }
};

/// Runs one epoch of `phase` over `cohort` with the seeded order of
/// (seed, phase, epoch). A partial accumulation window is flushed at the end.
inline EpochRecord run_epoch(const Cohort& cohort, const Matrix& u, pamil::Params& params,
                             const std::vector<TeacherTarget>* teacher, const TrainConfig& cfg, Phase phase,
                             std::size_t epoch) {
  const auto active = phase == Phase::kJoint        ? params.trainable()
                      : phase == Phase::kPhenotype ? params.phenotype_params()
                                                   : params.classifier_params();
  zero_grads(params.trainable());
  const bool update_centers = phase != Phase::kClassifier;
  EpochRecord rec;
  rec.phase = phase;
  rec.epoch = epoch;
  std::size_t pending = 0;
  const auto order = gpnn::epoch_order(cohort.size(), derive_seed(cfg.seed, "pamil-order-" + to_string(phase)), epoch);
  for (auto idx : order) {
    const TeacherTarget* target = teacher ? &(*teacher)[idx] : nullptr;
    pamil::ForwardTrace trace;
    const auto terms = sample_objective(cohort.bags[idx], u, params, target, cfg.guidance, phase, true, &trace);
    rec.mean.l_ce += terms.l_ce;
    rec.mean.l_contrast += terms.l_contrast;
    rec.mean.l_feat += terms.l_feat;
    rec.mean.l_logit += terms.l_logit;
    rec.mean.total += terms.total;
    if (update_centers) pamil::update_centers(params.centers.value, trace.V(), params.config.alpha);
    if (++pending == cfg.adam.accumulation_steps) {
      adam_step(active, cfg.adam, pending);
      ++rec.optimizer_steps;
      pending = 0;
    }
  }
  if (pending > 0) {
    adam_step(active, cfg.adam, pending);
    ++rec.optimizer_steps;
  }
  const double n = static_cast<double>(std::max<std::size_t>(1, cohort.size()));
  for (double* v : {&rec.mean.l_ce, &rec.mean.l_contrast, &rec.mean.l_feat, &rec.mean.l_logit, &rec.mean.total}) *v /= n;
  return rec;
}

inline void require_trainable_cohort(const Cohort& cohort, const Matrix& u, const pamil::Params& params) {
  if (cohort.size() == 0) throw DataError("training cohort is empty");
  if (u.rows() != params.num_phenotypes() || u.cols() != params.dimension()) {
    throw ShapeError("embedding matrix " + shape_string(u) + " does not match the student");
  }
  if (cohort.num_classes() != params.num_classes()) throw ShapeError("cohort class count does not match the student");
}

inline const std::vector<TeacherTarget>* require_teacher(const TrainConfig& cfg,
                                                         const std::vector<TeacherTarget>* teacher,
                                                         const Cohort& cohort) {
  if (!cfg.guidance.enabled()) return nullptr;
  if (teacher == nullptr) throw ConfigError("guidance is enabled but no teacher was provided");
  if (teacher->size() != cohort.size()) throw ShapeError("teacher targets do not align with the cohort");
  return teacher;
}

/// Joint objective CE + contrast + lambda (feat + logit) over all student
/// tensors. `start_epoch` resumes a run from a checkpoint taken at an epoch
/// boundary.
inline TrainReport train_joint(const Cohort& cohort, const Matrix& u, pamil::Params& params,
                               const std::vector<TeacherTarget>* teacher, const TrainConfig& cfg,
                               std::size_t start_epoch = 0) {
  cfg.validate();
  require_trainable_cohort(cohort, u, params);
  teacher = require_teacher(cfg, teacher, cohort);
  const auto t0 = std::chrono::steady_clock::now();
  TrainReport report;
  report.seed = cfg.seed;
  for (std::size_t ep = start_epoch; ep < cfg.epochs; ++ep) {
    report.epochs.push_back(run_epoch(cohort, u, params, teacher, cfg, Phase::kJoint, ep));
    report.optimizer_steps += report.epochs.back().optimizer_steps;
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

/// Phase 1 learns phenotype features (contrast + guidance) with the
/// classifier frozen; phase 2 trains the classifier head on CE with every
/// other tensor and the centers frozen.
inline TrainReport train_sequential(const Cohort& cohort, const Matrix& u, pamil::Params& params,
                                    const std::vector<TeacherTarget>* teacher, const TrainConfig& cfg) {
  cfg.validate();
  require_trainable_cohort(cohort, u, params);
  teacher = require_teacher(cfg, teacher, cohort);
  const auto t0 = std::chrono::steady_clock::now();
  TrainReport report;
  report.seed = cfg.seed;
  for (std::size_t ep = 0; ep < cfg.epochs; ++ep) {
    report.epochs.push_back(run_epoch(cohort, u, params, teacher, cfg, Phase::kPhenotype, ep));
    report.optimizer_steps += report.epochs.back().optimizer_steps;
  }
  for (std::size_t ep = 0; ep < cfg.epochs_phase2; ++ep) {
    report.epochs.push_back(run_epoch(cohort, u, params, nullptr, cfg, Phase::kClassifier, ep));
    report.optimizer_steps += report.epochs.back().optimizer_steps;
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

inline TrainReport train_student(const Cohort& cohort, const Matrix& u, pamil::Params& params,
                                 const std::vector<TeacherTarget>* teacher, const TrainConfig& cfg) {
  return cfg.mode == Mode::kJoint ? train_joint(cohort, u, params, teacher, cfg)
                                  : train_sequential(cohort, u, params, teacher, cfg);
}

// ---------------------------------------------------------------------------
// Inference helpers.

struct StudentOutputs {
  std::vector<std::vector<double>> probabilities;
  std::vector<std::size_t> predictions;
  std::vector<std::vector<double>> saliency;
};

inline StudentOutputs predict(const Cohort& cohort, const Matrix& u, const pamil::Params& params) {
  StudentOutputs out;
  for (const auto& bag : cohort.bags) {
    const auto t = pamil::forward(bag, u, params);
    auto p = softmax(t.logits);
    std::size_t best = 0;
    for (std::size_t k = 1; k < p.size(); ++k)
      if (p[k] > p[best]) best = k;
    out.probabilities.push_back(std::move(p));
    out.predictions.push_back(best);
    out.saliency.push_back(t.S());
  }
  return out;
}

inline StudentOutputs predict_teacher(const Cohort& cohort, const PhenotypeKB& kb, const gpnn::Params& params) {
  if (!cohort.has_profiles()) throw DataError("cohort has no transcriptome profiles");
  StudentOutputs out;
  for (const auto& prof : cohort.profiles) {
    const auto t = gpnn::forward(prof, kb, params);
    auto p = softmax(t.logits);
    std::size_t best = 0;
    for (std::size_t k = 1; k < p.size(); ++k)
      if (p[k] > p[best]) best = k;
    out.probabilities.push_back(std::move(p));
    out.predictions.push_back(best);
    out.saliency.push_back(t.s_hat());
  }
  return out;
}

}  // namespace phenomil::train
