// Acceptance run: one PASS/FAIL line per criterion, exit 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "phenomil/cli/commands.hpp"
#include "phenomil/data/synthetic.hpp"
#include "phenomil/explain/analysis.hpp"
#include "phenomil/explain/shapley.hpp"
#include "phenomil/knowledge/embedding.hpp"
#include "phenomil/metrics/metrics.hpp"
#include "phenomil/model/checkpoint.hpp"
#include "phenomil/train/evaluate.hpp"
#include "phenomil/train/trainer.hpp"
#include "phenomil/train/verify.hpp"

using namespace phenomil;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double mean_of(const std::vector<double>& v) { return metrics::mean_std(v).mean; }

// ---------------------------------------------------------------------------
// 1. Gradient correctness

Outcome gradients() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_name;
  for (const auto& e : train::run_gradient_suite(1)) {
    if (e.max_relative_error >= worst) {
      worst = e.max_relative_error;
      worst_name = e.name;
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-4 && secs < 60.0,
          fmt::format("max relative error {:.2e} ({}), {:.1f} s", worst, worst_name, secs)};
}

// ---------------------------------------------------------------------------
// 2-4. Planted-truth recovery on the synthetic 2-class cohort

struct Recovery {
  train::CrossValidation cv;
  double seconds = 0.0;
};

const Recovery& recovery_run() {
  static const Recovery r = [] {
    const auto t0 = Clock::now();
    const auto kb = make_synthetic_kb(4, 8);
    const auto u = embed_phenotypes(kb, EmbeddingSource::pseudo(32, 1));
    SyntheticConfig sc;
    sc.d = 32;
    sc.n_samples_per_class = 50;
    sc.noise_sigma = 0.3;
    sc.seed = 1;
    sc.saliency_profiles = default_saliency_profiles(4, 2);
    const auto cohort = generate_synthetic_cohort(kb, u, sc);
    train::RunConfig cfg;
    cfg.model = "pamil";
    cfg.seed = 1;
    cfg.kfold = 5;
    cfg.train.mode = train::Mode::kJoint;
    cfg.train.guidance.use_feat = cfg.train.guidance.use_logit = true;
    cfg.train.guidance.objective = train::Objective::kL2;
    Recovery out;
    out.cv = train::cross_validate(cohort, kb, u, cfg);
    out.seconds = seconds_since(t0);
    return out;
  }();
  return r;
}

Outcome classification() {
  const auto& r = recovery_run();
  std::vector<double> acc, auc;
  for (const auto& f : r.cv.folds) {
    acc.push_back(f.eval.accuracy);
    auc.push_back(f.eval.auc);
  }
  const double a = mean_of(acc), c = mean_of(auc);
  return {a >= 0.95 && c >= 0.98 && r.seconds < 600.0,
          fmt::format("5-fold accuracy {:.4f}, AUC {:.4f}, {:.1f} s", a, c, r.seconds)};
}

Outcome saliency_recovery() {
  std::vector<double> sp;
  for (const auto& f : recovery_run().cv.folds) sp.push_back(f.saliency_spearman);
  const double m = mean_of(sp);
  return {m >= 0.8, fmt::format("mean per-sample Spearman {:.4f} (threshold 0.8)", m)};
}

Outcome teacher_quality() {
  std::vector<double> acc;
  for (const auto& f : recovery_run().cv.folds) acc.push_back(f.teacher_accuracy);
  const double m = mean_of(acc);
  return {m >= 0.95, fmt::format("GP-NN held-out accuracy {:.4f}", m)};
}

// ---------------------------------------------------------------------------
// 5. Leakage direction

Outcome leakage() {
  int wins = 0;
  std::string detail;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto kb = make_synthetic_kb(4, 8);
    const auto u = embed_phenotypes(kb, EmbeddingSource::pseudo(32, seed));
    SyntheticConfig sc;
    sc.seed = seed;
    sc.saliency_profiles = shared_saliency_profiles(4, 2);
    sc.class_signal = 0.3;
    sc.class_signal_phenotype = 0;
    const auto cohort = generate_synthetic_cohort(kb, u, sc);
    double conc[2] = {0.0, 0.0};
    for (int a = 0; a < 2; ++a) {
      pamil::Config pc;
      pc.activation.kind = a == 0 ? Activation::kLayerNorm : Activation::kLeakyRelu;
      auto student = pamil::make_params(u, 2, pc, seed);
      train::TrainConfig tc;
      tc.seed = seed;
      tc.adam.accumulation_steps = 1;
      tc.guidance.use_feat = tc.guidance.use_logit = false;
      train::train_joint(cohort, u, student, nullptr, tc);
      conc[a] = explain::leakage_score(student, cohort, u, kb).concentration;
    }
    wins += conc[1] > conc[0];
    detail += fmt::format("{}seed {}: ln {:.2f} leaky {:.2f}", seed == 1 ? "" : "; ", seed, conc[0], conc[1]);
  }
  return {wins >= 4, fmt::format("leaky > ln in {}/5 ({})", wins, detail)};
}

// ---------------------------------------------------------------------------
// 6. Shapley exactness

double game(std::span<const double> s) {
  double v = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) v += std::sin(s[i]) * (1.0 + 0.3 * static_cast<double>(i));
  for (std::size_t i = 0; i + 1 < s.size(); ++i) v += s[i] * s[i + 1];
  return v + std::max(s[0], s[s.size() - 1]);
}

std::vector<double> gaussian_vec(std::size_t n, Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

Outcome shapley() {
  double worst_sampled = 0.0;
  for (std::size_t n : {4u, 8u, 12u}) {
    Rng rng(derive_seed(6, n));
    const auto x = gaussian_vec(n, rng), b = gaussian_vec(n, rng);
    const auto exact = explain::shapley_exact(game, x, b);
    const auto sampled = explain::shapley_sampled(game, x, b, 20000, n);
    const auto [lo, hi] = std::minmax_element(exact.values.begin(), exact.values.end());
    for (std::size_t i = 0; i < n; ++i) {
      worst_sampled = std::max(worst_sampled, std::abs(sampled.values[i] - exact.values[i]) / (*hi - *lo));
    }
  }
  double worst_eff = 0.0;
  for (std::uint64_t g = 0; g < 100; ++g) {
    Rng rng(derive_seed(7, g));
    const std::size_t n = 2 + g % 11;
    const auto x = gaussian_vec(n, rng), b = gaussian_vec(n, rng);
    worst_eff = std::max(worst_eff, std::abs(explain::shapley_exact(game, x, b).efficiency_gap()));
  }
  // Linear score head: phi_i = W[c, i] (S_i - mean_i).
  const auto kb = make_synthetic_kb(6, 4);
  const auto u = embed_phenotypes(kb, EmbeddingSource::pseudo(16, 2));
  SyntheticConfig sc;
  sc.d = 16;
  sc.n_samples_per_class = 10;
  sc.saliency_profiles = default_saliency_profiles(6, 2);
  const auto cohort = generate_synthetic_cohort(kb, u, sc);
  pamil::Config pc;
  pc.bottleneck_init_std = 0.5;
  const auto student = pamil::make_params(u, 2, pc, 3);
  const auto sal = explain::cohort_saliency(cohort, u, student);
  const auto base = explain::mean_rows(sal);
  double worst_linear = 0.0;
  for (std::size_t j = 0; j < sal.size(); ++j)
    for (std::size_t c = 0; c < 2; ++c) {
      const auto r = explain::sample_phenotype_shapley(student, sal[j], base, c);
      for (std::size_t i = 0; i < sal[j].size(); ++i) {
        worst_linear = std::max(worst_linear, std::abs(r.values[i] - student.cls_w.value(c, i) * (sal[j][i] - base[i])));
      }
    }
  return {worst_sampled <= 0.05 && worst_eff <= 1e-9 && worst_linear <= 1e-9,
          fmt::format("sampled error {:.4f} of range, efficiency gap {:.1e}, linear-head error {:.1e}", worst_sampled,
                      worst_eff, worst_linear)};
}

// ---------------------------------------------------------------------------
// 7. Metric oracles

Outcome metric_oracles() {
  std::mt19937_64 rng(7);
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 4 + static_cast<std::size_t>(rng() % 17);
    const std::size_t c = 2 + static_cast<std::size_t>(rng() % 3);
    std::vector<double> scores(n);
    std::vector<int> bin(n);
    std::vector<std::size_t> pred(n), lab(n);
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = static_cast<double>(rng() % 8) / 8.0;
      bin[i] = static_cast<int>(rng() % 2);
      pred[i] = rng() % c;
      lab[i] = rng() % c;
    }
    bin[0] = 0;
    bin[1] = 1;
    double wins = 0.0, pairs = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (bin[i] == 1 && bin[j] == 0) {
          pairs += 1.0;
          wins += scores[i] > scores[j] ? 1.0 : scores[i] == scores[j] ? 0.5 : 0.0;
        }
    worst = std::max(worst, std::abs(metrics::roc_auc(scores, bin) - wins / pairs));

    const std::size_t k_max = metrics::infer_classes(pred, lab);
    double recall_sum = 0.0, present = 0.0, f1_sum = 0.0;
    for (std::size_t k = 0; k < k_max; ++k) {
      double tp = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < n; ++i) {
        tp += pred[i] == k && lab[i] == k;
        fp += pred[i] == k && lab[i] != k;
        fn += pred[i] != k && lab[i] == k;
      }
      const double support = tp + fn;
      const double p = tp + fp > 0 ? tp / (tp + fp) : 0.0;
      const double r = support > 0 ? tp / support : 0.0;
      if (support > 0) {
        recall_sum += r;
        present += 1.0;
      }
      f1_sum += support * (p + r > 0 ? 2 * p * r / (p + r) : 0.0);
    }
    worst = std::max(worst, std::abs(metrics::balanced_accuracy(pred, lab) - recall_sum / present));
    worst = std::max(worst, std::abs(metrics::weighted_f1(pred, lab) - f1_sum / static_cast<double>(n)));
  }
  return {worst <= 1e-12, fmt::format("1000 instances, max deviation {:.1e}", worst)};
}

// ---------------------------------------------------------------------------
// 8. Invariant suite

Matrix random_rotation(std::size_t d, Rng& rng) {
  Matrix q = gaussian_matrix(d, d, 1.0, rng);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t k = 0; k < i; ++k) {
      double proj = 0.0;
      for (std::size_t r = 0; r < d; ++r) proj += q(i, r) * q(k, r);
      for (std::size_t r = 0; r < d; ++r) q(i, r) -= proj * q(k, r);
    }
    double norm = 0.0;
    for (std::size_t r = 0; r < d; ++r) norm += q(i, r) * q(i, r);
    norm = std::sqrt(norm);
    for (std::size_t r = 0; r < d; ++r) q(i, r) /= norm;
  }
  return q;
}

std::vector<Matrix> values_of(const ParamRefs& refs) {
  std::vector<Matrix> out;
  for (auto* p : refs) out.push_back(p->value);
  return out;
}

Outcome invariants() {
  std::vector<std::string> failed;
  auto check = [&](bool ok, const std::string& name) {
    if (!ok) failed.push_back(name);
  };
  Rng rng(8);

  double softmax_err = 0.0;
  for (int t = 0; t < 50; ++t) {
    const auto a = softmax_rows(gaussian_matrix(5, 7, 3.0, rng), 1.0);
    for (std::size_t i = 0; i < a.rows(); ++i) {
      double s = 0.0;
      for (double v : a.row(i)) s += v;
      softmax_err = std::max(softmax_err, std::abs(s - 1.0));
    }
  }
  check(softmax_err <= 1e-12, "softmax row sums");

  double ln_err = 0.0;
  for (int t = 0; t < 50; ++t) {
    const auto v = gaussian_matrix(1, 9, 2.0, rng);
    const auto raw = v.values();
    double m0 = 0.0, var0 = 0.0;
    for (double x : raw) m0 += x / 9.0;
    for (double x : raw) var0 += (x - m0) * (x - m0) / 9.0;
    const auto y = layer_norm(raw, 1e-5);
    double m = 0.0, var = 0.0;
    for (double x : y) m += x / 9.0;
    for (double x : y) var += (x - m) * (x - m) / 9.0;
    ln_err = std::max({ln_err, std::abs(m), std::abs(var - var0 / (var0 + 1e-5))});
  }
  check(ln_err <= 1e-9, "layer norm moments");

  double min_align = 1.0, rot_err = 0.0;
  for (int t = 0; t < 20; ++t) {
    const auto v = gaussian_matrix(4, 6, 1.0, rng), c = gaussian_matrix(4, 6, 1.0, rng);
    const auto q = random_rotation(6, rng);
    const double l = pamil::alignment_loss(v, c, 0.07);
    min_align = std::min(min_align, l);
    rot_err = std::max(rot_err, std::abs(l - pamil::alignment_loss(matmul(v, q), matmul(c, q), 0.07)));
  }
  check(min_align >= 0.0, "alignment non-negative");
  check(rot_err <= 1e-8, "alignment rotation invariance");

  {
    const auto c0 = gaussian_matrix(3, 4, 1.0, rng), v = gaussian_matrix(3, 4, 1.0, rng);
    auto keep = c0, take = c0;
    pamil::update_centers(keep, v, 1.0);
    pamil::update_centers(take, v, 0.0);
    check(keep == c0 && take == v, "center update fixed points");
  }

  const auto kb = make_synthetic_kb(4, 5);
  const auto u = embed_phenotypes(kb, EmbeddingSource::pseudo(16, 8));
  SyntheticConfig sc;
  sc.d = 16;
  sc.n_samples_per_class = 5;
  sc.patches_min = 10;
  sc.patches_max = 16;
  sc.saliency_profiles = default_saliency_profiles(4, 2);
  const auto cohort = generate_synthetic_cohort(kb, u, sc);
  gpnn::Config gc;
  gc.d = 16;
  auto teacher = gpnn::make_params(kb, 2, gc, 4);
  gpnn::train_gpnn(cohort, kb, teacher, AdamConfig{}, 3, 4);
  const auto targets = train::teacher_targets(teacher, cohort, kb);
  train::TrainConfig tc;
  tc.epochs = 2;
  tc.epochs_phase2 = 2;
  tc.adam.accumulation_steps = 3;
  tc.adam.learning_rate = 5e-3;

  {
    auto s = pamil::make_params(u, 2, pamil::Config{}, 1);
    const auto phen = values_of(s.phenotype_params());
    const auto centers = s.centers.value;
    train::run_epoch(cohort, u, s, &targets, tc, train::Phase::kClassifier, 0);
    check(values_of(s.phenotype_params()) == phen && s.centers.value == centers, "phase-2 freeze");
    auto p = pamil::make_params(u, 2, pamil::Config{}, 1);
    const auto head = values_of(p.classifier_params());
    train::run_epoch(cohort, u, p, &targets, tc, train::Phase::kPhenotype, 0);
    check(values_of(p.classifier_params()) == head, "phase-1 freeze");
  }

  {
    auto s = pamil::make_params(u, 2, pamil::Config{}, 2);
    train::train_joint(cohort, u, s, &targets, tc);
    const auto bytes = checkpoint::encode_pamil(s);
    auto back = checkpoint::decode_pamil(bytes);
    check(back == s && checkpoint::encode_pamil(back) == bytes, "student checkpoint round-trip");
    const auto gbytes = checkpoint::encode_gpnn(teacher);
    auto gback = checkpoint::decode_gpnn(gbytes);
    check(gback == teacher && checkpoint::encode_gpnn(gback) == gbytes, "teacher checkpoint round-trip");
  }

  for (auto mode : {train::Mode::kJoint, train::Mode::kSequential}) {
    auto run_c = tc;
    run_c.mode = mode;
    auto a = pamil::make_params(u, 2, pamil::Config{}, 5);
    auto b = pamil::make_params(u, 2, pamil::Config{}, 5);
    train::train_student(cohort, u, a, &targets, run_c);
    train::train_student(cohort, u, b, &targets, run_c);
    check(checkpoint::encode_pamil(a) == checkpoint::encode_pamil(b), "bitwise determinism " + train::to_string(mode));
  }

  std::string detail = failed.empty() ? "all invariants hold" : "failed:";
  for (const auto& f : failed) detail += " [" + f + "]";
  return {failed.empty(), detail};
}

// ---------------------------------------------------------------------------
// 9. Ablation matrix through the command line

bool report_is_finite(const fs::path& csv) {
  std::ifstream in(csv);
  std::string line;
  std::getline(in, line);
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    std::stringstream cells(line);
    std::string cell;
    std::getline(cells, cell, ',');
    std::getline(cells, cell, ',');
    for (int k = 0; k < 5; ++k) {
      std::getline(cells, cell, ',');
      if (!std::isfinite(std::stod(cell))) return false;
    }
    ++rows;
  }
  return rows > 0;
}

Outcome ablation_matrix() {
  const auto t0 = Clock::now();
  const auto root = fs::temp_directory_path() / "phenomil_acceptance_ablation";
  fs::remove_all(root);
  std::ostringstream sink;
  auto run = [&](std::vector<std::string> args) { return cli::run(args, sink, sink); };
  if (run({"gen-data", "--phenotypes", "4", "--classes", "2", "--per-class", "4", "--d", "16", "--patches-min", "8",
           "--patches-max", "16", "--seed", "1", "--out", (root / "data").string()}) != 0) {
    return {false, "gen-data failed"};
  }
  const auto cohort = (root / "data" / "cohort.json").string();
  const auto teacher = (root / "teacher" / "gpnn.ckpt").string();
  if (run({"train", "--model", "gpnn", "--cohort", cohort, "--epochs", "2", "--out", (root / "teacher").string()}) != 0) {
    return {false, "teacher training failed"};
  }
  std::size_t ok = 0, total = 0;
  std::string first_failure;
  for (const char* guidance : {"off", "feat", "logit", "both"})
    for (const char* objective : {"l2", "l1", "cl"})
      for (const char* activation : {"ln", "leaky"})
        for (const char* mode : {"sequential", "joint"}) {
          const auto name = fmt::format("{}_{}_{}_{}", guidance, objective, activation, mode);
          const auto out = root / name;
          std::vector<std::string> args{"train",       "--model",     "pamil",    "--cohort",     cohort,
                                        "--guidance",  guidance,      "--objective", objective,   "--activation",
                                        activation,    "--mode",      mode,       "--epochs",     "2",
                                        "--epochs-phase2", "2",       "--accumulation", "2",      "--out",
                                        out.string()};
          if (std::string(guidance) != "off") {
            args.push_back("--teacher");
            args.push_back(teacher);
          }
          ++total;
          const int code = run(args);
          if (code == 0 && report_is_finite(out / "train_report.csv")) {
            ++ok;
          } else if (first_failure.empty()) {
            first_failure = fmt::format(", first failure {} (exit {})", name, code);
          }
        }
  const double secs = seconds_since(t0);
  return {ok == total && secs < 120.0, fmt::format("{}/{} configurations finite with exit 0, {:.1f} s{}", ok, total, secs,
                                                   first_failure)};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient correctness", gradients},
      {"planted classification recovery", classification},
      {"planted saliency recovery", saliency_recovery},
      {"teacher quality", teacher_quality},
      {"leakage ablation direction", leakage},
      {"shapley exactness", shapley},
      {"metric oracles", metric_oracles},
      {"invariant suite", invariants},
      {"ablation matrix smoke", ablation_matrix},
  };
  int failures = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << fmt::format("{} [{}] {}: {}", o.pass ? "PASS" : "FAIL", k + 1, criteria[k].first, o.detail) << std::endl;
  }
  std::cout << fmt::format("{} of {} criteria passed", criteria.size() - static_cast<std::size_t>(failures),
                           criteria.size())
            << std::endl;
  return failures == 0 ? 0 : 1;
}
