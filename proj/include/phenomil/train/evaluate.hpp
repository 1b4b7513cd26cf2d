#pragma once

#include <chrono>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "phenomil/core/rng.hpp"
#include "phenomil/data/cohort.hpp"
#include "phenomil/data/kfold.hpp"
#include "phenomil/knowledge/kb.hpp"
#include "phenomil/metrics/metrics.hpp"
#include "phenomil/model/gpnn.hpp"
#include "phenomil/model/pamil.hpp"
#include "phenomil/train/config.hpp"
#include "phenomil/train/trainer.hpp"

namespace phenomil::train {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

/// Mean per-sample Spearman between predicted and planted saliency; NaN
/// when any sample lacks planted saliency.
inline double planted_saliency_spearman(const Cohort& cohort, const std::vector<std::vector<double>>& saliency) {
  if (cohort.size() == 0) return kNaN;
  double sum = 0.0;
  for (std::size_t j = 0; j < cohort.size(); ++j) {
    const auto& planted = cohort.bags[j].planted_saliency;
    if (!planted) return kNaN;
    sum += metrics::spearman(saliency[j], *planted);
  }
  return sum / static_cast<double>(cohort.size());
}

inline metrics::EvalResult evaluate_outputs(const StudentOutputs& out, const Cohort& cohort) {
  const auto labels = cohort.labels();
  return metrics::evaluate(out.probabilities, out.predictions, labels, cohort.num_classes());
}

/// Teacher trained with the run's optimizer settings for teacher_epochs.
inline gpnn::Params train_teacher(const Cohort& cohort, const PhenotypeKB& kb, std::size_t d, const RunConfig& cfg,
                                  std::uint64_t seed) {
  gpnn::Config gc = cfg.gpnn;
  gc.d = d;
  auto teacher = gpnn::make_params(kb, cohort.num_classes(), gc, seed);
  gpnn::train_gpnn(cohort, kb, teacher, cfg.train.adam, cfg.teacher_epochs, seed);
  return teacher;
}

inline pamil::Params train_pamil(const Cohort& cohort, const Matrix& u, const gpnn::Params* teacher,
                                 const PhenotypeKB& kb, const RunConfig& cfg, std::uint64_t seed,
                                 TrainReport* report = nullptr) {
  auto student = pamil::make_params(u, cohort.num_classes(), cfg.pamil, seed);
  std::vector<TeacherTarget> targets;
  if (teacher != nullptr && cfg.train.guidance.enabled()) targets = teacher_targets(*teacher, cohort, kb);
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  auto rep = train_student(cohort, u, student, targets.empty() ? nullptr : &targets, tc);
  if (report) *report = std::move(rep);
  return student;
}

struct FoldResult {
  metrics::EvalResult eval;
  double saliency_spearman = kNaN;  // PA-MIL only, needs planted saliency
  double teacher_accuracy = kNaN;   // set when a teacher was trained
  std::vector<double> train_loss;   // mean total loss per epoch
};

struct CrossValidation {
  std::vector<FoldResult> folds;
  double wall_seconds = 0.0;

  std::vector<metrics::EvalResult> evals() const {
    std::vector<metrics::EvalResult> out;
    for (const auto& f : folds) out.push_back(f.eval);
    return out;
  }
};

/// Stratified k-fold run of `cfg.model`. Guided PA-MIL folds train a fresh
/// teacher on the fold's training split. Seeds derive from cfg.seed and the
/// fold index.
inline CrossValidation cross_validate(const Cohort& cohort, const PhenotypeKB& kb, const Matrix& u, const RunConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto folds = stratified_kfold(cohort.labels(), cfg.kfold, cfg.seed);
  const bool gpnn_only = cfg.model == "gpnn";
  const bool need_teacher = gpnn_only || cfg.train.guidance.enabled();
  CrossValidation cv;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    const auto train = subset(cohort, folds[f].train);
    const auto test = subset(cohort, folds[f].test);
    FoldResult r;
    std::optional<gpnn::Params> teacher;
    if (need_teacher) {
      teacher = train_teacher(train, kb, u.cols(), cfg, derive_seed(cfg.seed, "teacher-fold-" + std::to_string(f)));
      const auto tp = predict_teacher(test, kb, *teacher);
      r.teacher_accuracy = metrics::accuracy(tp.predictions, test.labels());
      if (gpnn_only) r.eval = evaluate_outputs(tp, test);
    }
    if (!gpnn_only) {
      TrainReport rep;
      const auto student = train_pamil(train, u, teacher ? &*teacher : nullptr, kb, cfg,
                                       derive_seed(cfg.seed, "student-fold-" + std::to_string(f)), &rep);
      for (const auto& e : rep.epochs) r.train_loss.push_back(e.mean.total);
      const auto out = predict(test, u, student);
      r.eval = evaluate_outputs(out, test);
      r.saliency_spearman = planted_saliency_spearman(test, out.saliency);
    }
    cv.folds.push_back(std::move(r));
  }
  cv.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return cv;
}

/// Per-fold rows plus a mean+-std summary row.
inline std::string cross_validation_csv(const CrossValidation& cv) {
  std::string out = metrics::csv_header() + "\n";
  for (std::size_t f = 0; f < cv.folds.size(); ++f) out += metrics::csv_row(std::to_string(f), cv.folds[f].eval) + "\n";
  out += metrics::csv_summary(cv.evals()) + "\n";
  return out;
}

}  // namespace phenomil::train
