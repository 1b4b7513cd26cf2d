#pragma once

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <tuple>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include "phenomil/core/error.hpp"
#include "phenomil/data/bag.hpp"
#include "phenomil/data/cohort.hpp"
#include "phenomil/data/synthetic.hpp"
#include "phenomil/explain/analysis.hpp"
#include "phenomil/knowledge/embedding.hpp"
#include "phenomil/knowledge/kb.hpp"
#include "phenomil/metrics/metrics.hpp"
#include "phenomil/model/checkpoint.hpp"
#include "phenomil/train/config.hpp"
#include "phenomil/train/evaluate.hpp"
#include "phenomil/train/verify.hpp"

#ifndef PHENOMIL_DATA_DIR
#define PHENOMIL_DATA_DIR "data"
#endif

namespace phenomil::cli {

inline constexpr const char* kToolVersion = "0.1.0";

enum ExitCode : int { kExitOk = 0, kExitVerification = 1, kExitUsage = 2 };

/// Raised when a verification gate (e.g. gradient check) fails.
class VerificationFailure : public Error {
 public:
  explicit VerificationFailure(const std::string& what) : Error(what) {}
};

// ---------------------------------------------------------------------------
// Files and manifests.

namespace fs = std::filesystem;

/// Writes through a sibling temporary file and renames it into place.
inline void write_atomic(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write '" + tmp.string() + "'");
    out << text;
    out.flush();
    if (!out) throw DataError("short write to '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  return std::string(std::istreambuf_iterator<char>(in), {});
}

struct RunManifest {
  std::string command;
  std::string config_path;
  std::string snapshot;            // resolved settings (INI or JSON text)
  std::vector<std::string> argv;   // arguments without --out, for replay
  std::uint64_t seed = 0;
  std::vector<std::string> artifacts;
  std::string tool_version = kToolVersion;
  double wall_seconds = 0.0;
};

inline nlohmann::ordered_json manifest_to_json(const RunManifest& m) {
  nlohmann::ordered_json j;
  j["command"] = m.command;
  j["config_path"] = m.config_path;
  j["snapshot"] = m.snapshot;
  j["argv"] = m.argv;
  j["seed"] = m.seed;
  j["artifacts"] = m.artifacts;
  j["tool_version"] = m.tool_version;
  j["wall_seconds"] = m.wall_seconds;
  return j;
}

inline RunManifest read_manifest(const std::string& path) {
  RunManifest m;
  try {
    const auto j = nlohmann::json::parse(read_text(path));
    m.command = j.at("command").get<std::string>();
    m.config_path = j.at("config_path").get<std::string>();
    m.snapshot = j.at("snapshot").get<std::string>();
    m.argv = j.at("argv").get<std::vector<std::string>>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.artifacts = j.at("artifacts").get<std::vector<std::string>>();
    m.tool_version = j.at("tool_version").get<std::string>();
    m.wall_seconds = j.at("wall_seconds").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest '" + path + "': " + e.what());
  }
  return m;
}

inline void write_manifest(const RunManifest& m, const fs::path& dir) {
  write_atomic(dir / "manifest.json", manifest_to_json(m).dump(2) + "\n");
}

/// $PHENOMIL_OUT when set, otherwise ./phenomil_out.
inline std::string default_out_dir() {
  const char* env = std::getenv("PHENOMIL_OUT");
  return env && *env ? std::string(env) : std::string("phenomil_out");
}

inline std::string data_dir() {
  const char* env = std::getenv("PHENOMIL_DATA_DIR");
  return env && *env ? std::string(env) : std::string(PHENOMIL_DATA_DIR);
}

/// A KB argument is a file path or the name of a bundled KB (nsclc, rcc).
inline std::string resolve_kb_path(const std::string& arg) {
  if (fs::exists(arg)) return arg;
  const fs::path bundled = fs::path(data_dir()) / "kb" / (arg + ".json");
  if (fs::exists(bundled)) return bundled.string();
  throw LookupError("no KB file or bundled KB named '" + arg + "'");
}

/// Cohort, its KB and the frozen text embeddings referenced by a cohort manifest.
struct Workspace {
  std::string cohort_path;
  Cohort cohort;
  PhenotypeKB kb;
  Matrix u;
};

inline Workspace load_workspace(const std::string& cohort_path) {
  if (cohort_path.empty()) throw ConfigError("a cohort manifest is required (--cohort)");
  Workspace w;
  w.cohort_path = cohort_path;
  const auto m = read_cohort_manifest(cohort_path);
  if (m.kb_path.empty() || m.embeddings_path.empty()) {
    throw ConfigError("cohort manifest must reference a KB and an embedding file");
  }
  w.kb = load_kb(resolve_relative(cohort_path, m.kb_path));
  const auto emb = resolve_relative(cohort_path, m.embeddings_path);
  w.u = embed_phenotypes(w.kb, EmbeddingSource::file(emb, read_embedding_file(emb).dimension));
  w.cohort = load_cohort(cohort_path);
  return w;
}

inline std::string absolute_string(const std::string& p) {
  return p.empty() ? p : fs::absolute(p).lexically_normal().string();
}

/// Drops "--out X" / "--out=X" so a manifest can be replayed elsewhere.
inline std::vector<std::string> strip_out_flag(const std::vector<std::string>& args) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--out") {
      ++i;
      continue;
    }
    if (args[i].rfind("--out=", 0) == 0) continue;
    out.push_back(args[i]);
  }
  return out;
}

inline std::string checkpoint_kind(const std::string& path) {
  const auto bytes = io::read_file_bytes(path);
  if (bytes.size() < 4) throw FormatError("checkpoint '" + path + "' is too short", 0);
  const std::string magic(bytes.begin(), bytes.begin() + 4);
  if (magic == std::string(checkpoint::kPamilMagic.begin(), checkpoint::kPamilMagic.end())) return "pamil";
  if (magic == std::string(checkpoint::kGpnnMagic.begin(), checkpoint::kGpnnMagic.end())) return "gpnn";
  throw FormatError("'" + path + "' is not a checkpoint", 0);
}

inline gpnn::Params load_teacher_for(const std::string& path, const Workspace& w) {
  auto t = checkpoint::load_gpnn(path);
  if (t.num_phenotypes() != w.kb.size()) {
    throw ShapeError(fmt::format("teacher has {} phenotypes but the KB has {}", t.num_phenotypes(), w.kb.size()));
  }
  for (std::size_t i = 0; i < w.kb.size(); ++i) {
    if (t.encoders[i].input_width() != w.kb.phenotypes[i].genes.size()) {
      throw ShapeError("teacher gene-set sizes do not match the KB");
    }
  }
  if (t.config.d != w.u.cols()) throw ShapeError("teacher feature dimension does not match the embeddings");
  if (t.num_classes() != w.cohort.num_classes()) throw ShapeError("teacher class count does not match the cohort");
  return t;
}

inline pamil::Params load_student_for(const std::string& path, const Workspace& w) {
  auto s = checkpoint::load_pamil(path);
  if (s.num_phenotypes() != w.kb.size()) {
    throw ShapeError(fmt::format("student has {} phenotypes but the KB has {}", s.num_phenotypes(), w.kb.size()));
  }
  if (s.dimension() != w.u.cols()) throw ShapeError("student feature dimension does not match the embeddings");
  if (s.num_classes() != w.cohort.num_classes()) throw ShapeError("student class count does not match the cohort");
  return s;
}

// ---------------------------------------------------------------------------
// Shared option groups.

/// Flags that override a run config. Only options given on the command
/// line are applied, so config-file values survive otherwise.
struct RunFlags {
  std::string config;
  std::string model, mode, guidance, objective, activation, head, teacher, cohort, gpnn_init;
  std::uint64_t seed = 1;
  std::size_t kfold = 5, epochs = 20, epochs_phase2 = 20, teacher_epochs = 20, accumulation = 32;
  double lr = 5e-4, weight_decay = 1e-4, clip_norm = 10.0, lambda = 1.0, tau_guidance = 1.0;
  std::map<std::string, CLI::Option*> opts;

  void add(CLI::App* app, bool with_kfold) {
    app->add_option("--config", config, "INI run config; flags override its values")->check(CLI::ExistingFile);
    opts["cohort"] = app->add_option("--cohort", cohort, "cohort manifest (cohort.json)");
    opts["model"] = app->add_option("--model", model, "pamil or gpnn")->check(CLI::IsMember({"pamil", "gpnn"}));
    opts["mode"] = app->add_option("--mode", mode, "sequential or joint")->check(CLI::IsMember({"sequential", "joint"}));
    opts["guidance"] = app->add_option("--guidance", guidance, "off, feat, logit or both")
                           ->check(CLI::IsMember({"off", "feat", "logit", "both"}));
    opts["objective"] = app->add_option("--objective", objective, "l2, l1 or cl")->check(CLI::IsMember({"l2", "l1", "cl"}));
    opts["activation"] = app->add_option("--activation", activation, "ln or leaky")->check(CLI::IsMember({"ln", "leaky"}));
    opts["head"] = app->add_option("--head", head, "score or feature")->check(CLI::IsMember({"score", "feature"}));
    opts["teacher"] = app->add_option("--teacher", teacher, "GP-NN checkpoint for guided training");
    opts["gpnn_init"] = app->add_option("--gpnn-init", gpnn_init, "abundance or gaussian")
                            ->check(CLI::IsMember({"abundance", "gaussian"}));
    opts["seed"] = app->add_option("--seed", seed, "run seed");
    if (with_kfold) opts["kfold"] = app->add_option("--kfold", kfold, "number of folds");
    opts["epochs"] = app->add_option("--epochs", epochs, "epochs (joint, phase 1, or GP-NN)");
    opts["epochs_phase2"] = app->add_option("--epochs-phase2", epochs_phase2, "sequential phase-2 epochs");
    opts["teacher_epochs"] = app->add_option("--teacher-epochs", teacher_epochs, "GP-NN epochs when a teacher is trained");
    opts["lr"] = app->add_option("--lr", lr, "learning rate");
    opts["weight_decay"] = app->add_option("--weight-decay", weight_decay, "decoupled weight decay");
    opts["clip_norm"] = app->add_option("--clip-norm", clip_norm, "global gradient-norm clip");
    opts["accumulation"] = app->add_option("--accumulation", accumulation, "samples per optimizer step");
    opts["lambda"] = app->add_option("--lambda", lambda, "guidance weight");
    opts["tau_guidance"] = app->add_option("--tau-guidance", tau_guidance, "temperature of the cl objective");
  }

  bool given(const std::string& key) const {
    const auto it = opts.find(key);
    return it != opts.end() && it->second->count() > 0;
  }

  train::RunConfig resolve() const {
    train::RunConfig c = config.empty() ? train::RunConfig{} : train::load_run_config(config);
    if (given("cohort")) c.cohort = cohort;
    if (given("model")) c.model = model;
    if (given("mode")) c.train.mode = train::parse_mode(mode);
    if (given("guidance")) std::tie(c.train.guidance.use_feat, c.train.guidance.use_logit) = train::parse_guidance_level(guidance);
    if (given("objective")) c.train.guidance.objective = train::parse_objective(objective);
    if (given("activation")) {
      c.pamil.activation.kind = parse_activation(activation);
      c.gpnn.activation.kind = c.pamil.activation.kind;
    }
    if (given("head")) c.pamil.head = pamil::parse_head(head);
    if (given("teacher")) c.teacher = teacher;
    if (given("gpnn_init")) c.gpnn.init = gpnn::parse_init(gpnn_init);
    if (given("seed")) c.seed = seed;
    if (given("kfold")) c.kfold = kfold;
    if (given("epochs")) c.train.epochs = epochs;
    if (given("epochs_phase2")) c.train.epochs_phase2 = epochs_phase2;
    if (given("teacher_epochs")) c.teacher_epochs = teacher_epochs;
    if (given("lr")) c.train.adam.learning_rate = lr;
    if (given("weight_decay")) c.train.adam.weight_decay = weight_decay;
    if (given("clip_norm")) c.train.adam.clip_norm = clip_norm;
    if (given("accumulation")) c.train.adam.accumulation_steps = accumulation;
    if (given("lambda")) c.train.guidance.lambda = lambda;
    if (given("tau_guidance")) c.train.guidance.tau_guidance = tau_guidance;
    c.train.seed = c.seed;
    c.cohort = absolute_string(c.cohort);
    c.teacher = absolute_string(c.teacher);
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// gen-data

struct GenDataFlags {
  std::string kb;
  std::size_t phenotypes = 4, genes_per_phenotype = 8, classes = 2, per_class = 50, d = 32;
  std::size_t patches_min = 48, patches_max = 96;
  bool disjoint_genes = false;
  std::uint64_t seed = 1;
  double noise = 0.3, decay = 0.55, class_signal = 0.0, beta = 2.0, expr_sigma = 0.25;
  int signal_phenotype = -1;
  std::string profile = "default";
  std::vector<std::string> signal_genes;
  std::string embeddings;
};

inline nlohmann::ordered_json gen_data_snapshot(const GenDataFlags& f, const std::string& kb_path) {
  nlohmann::ordered_json j;
  j["kb"] = kb_path;
  j["phenotypes"] = f.phenotypes;
  j["genes_per_phenotype"] = f.genes_per_phenotype;
  j["disjoint_genes"] = f.disjoint_genes;
  j["classes"] = f.classes;
  j["per_class"] = f.per_class;
  j["seed"] = f.seed;
  j["d"] = f.d;
  j["noise"] = f.noise;
  j["patches_min"] = f.patches_min;
  j["patches_max"] = f.patches_max;
  j["profile"] = f.profile;
  j["decay"] = f.decay;
  j["class_signal"] = f.class_signal;
  j["signal_phenotype"] = f.signal_phenotype;
  j["beta"] = f.beta;
  j["expr_sigma"] = f.expr_sigma;
  j["signal_genes"] = f.signal_genes;
  j["embeddings"] = f.embeddings;
  return j;
}

inline RunManifest cmd_gen_data(const GenDataFlags& f, const fs::path& out, std::ostream& log) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::string kb_path = f.kb.empty() ? std::string{} : resolve_kb_path(f.kb);
  const PhenotypeKB kb = kb_path.empty() ? make_synthetic_kb(f.phenotypes, f.genes_per_phenotype, !f.disjoint_genes)
                                         : load_kb(kb_path);
  const Matrix u = f.embeddings.empty()
                       ? embed_phenotypes(kb, EmbeddingSource::pseudo(f.d, f.seed))
                       : embed_phenotypes(kb, EmbeddingSource::file(f.embeddings, read_embedding_file(f.embeddings).dimension));

  SyntheticConfig cfg;
  cfg.n_samples_per_class = f.per_class;
  cfg.patches_min = f.patches_min;
  cfg.patches_max = f.patches_max;
  cfg.d = u.cols();
  cfg.noise_sigma = f.noise;
  cfg.seed = f.seed;
  cfg.expr_beta = f.beta;
  cfg.expr_sigma = f.expr_sigma;
  cfg.class_signal = f.class_signal;
  if (f.signal_phenotype >= 0) cfg.class_signal_phenotype = static_cast<std::size_t>(f.signal_phenotype);
  if (f.classes < 2) throw ConfigError("--classes must be >= 2");
  if (f.profile == "default") {
    cfg.saliency_profiles = default_saliency_profiles(kb.size(), f.classes, f.decay);
  } else {
    cfg.saliency_profiles = shared_saliency_profiles(kb.size(), f.classes, f.decay);
  }
  for (const auto& spec : f.signal_genes) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--signal-gene expects GENE=SCALE, got '" + spec + "'");
    try {
      cfg.gene_signal_scale[spec.substr(0, eq)] = std::stod(spec.substr(eq + 1));
    } catch (const std::exception&) {
      throw ConfigError("--signal-gene scale is not a number in '" + spec + "'");
    }
  }
  const Cohort cohort = generate_synthetic_cohort(kb, u, cfg);

  fs::create_directories(out / "bags");
  fs::create_directories(out / "profiles");
  save_kb(kb, (out / "kb.json").string());
  write_embedding_file((out / "embeddings.tsv").string(), kb.names(), u);
  CohortManifest m;
  m.class_names = cohort.class_names;
  m.kb_path = "kb.json";
  m.embeddings_path = "embeddings.tsv";
  m.kb_name = cohort.kb_name;
  for (std::size_t j = 0; j < cohort.size(); ++j) {
    const auto& id = cohort.bags[j].sample_id;
    const std::string bag_rel = "bags/" + id + ".pab";
    const std::string prof_rel = "profiles/" + id + ".tsv";
    write_bag(cohort.bags[j], (out / bag_rel).string());
    write_profile(cohort.profiles[j], (out / prof_rel).string());
    m.samples.push_back({id, bag_rel, prof_rel});
  }
  write_cohort_manifest(m, (out / "cohort.json").string());

  RunManifest rm;
  rm.command = "gen-data";
  rm.snapshot = gen_data_snapshot(f, kb_path).dump(2);
  rm.seed = f.seed;
  rm.artifacts = {"kb.json", "embeddings.tsv", "cohort.json", "bags/", "profiles/"};
  rm.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  log << fmt::format("wrote {} bags and {} profiles ({} classes, {} phenotypes, d={}) to {}\n", cohort.size(),
                     cohort.profiles.size(), cohort.num_classes(), kb.size(), u.cols(), out.string());
  return rm;
}

// ---------------------------------------------------------------------------
// train

inline std::string pamil_report_csv(const train::TrainReport& r) {
  std::string s = "phase,epoch,l_ce,l_contrast,l_feat,l_logit,total,optimizer_steps\n";
  for (const auto& e : r.epochs) {
    s += fmt::format("{},{},{:.9g},{:.9g},{:.9g},{:.9g},{:.9g},{}\n", train::to_string(e.phase), e.epoch + 1, e.mean.l_ce,
                     e.mean.l_contrast, e.mean.l_feat, e.mean.l_logit, e.mean.total, e.optimizer_steps);
  }
  return s;
}

inline std::string gpnn_report_csv(const gpnn::TrainHistory& h) {
  std::string s = "epoch,loss\n";
  for (std::size_t e = 0; e < h.epoch_loss.size(); ++e) s += fmt::format("{},{:.9g}\n", e + 1, h.epoch_loss[e]);
  return s;
}

inline RunManifest cmd_train(const train::RunConfig& cfg, const std::string& config_path, const fs::path& out,
                             std::ostream& log) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto w = load_workspace(cfg.cohort);
  RunManifest rm;
  rm.command = "train";
  rm.config_path = config_path;
  rm.seed = cfg.seed;
  fs::create_directories(out);
  if (cfg.model == "gpnn") {
    gpnn::Config gc = cfg.gpnn;
    gc.d = w.u.cols();
    auto teacher = gpnn::make_params(w.kb, w.cohort.num_classes(), gc, cfg.seed);
    const auto h = gpnn::train_gpnn(w.cohort, w.kb, teacher, cfg.train.adam, cfg.train.epochs, cfg.seed);
    checkpoint::save_gpnn(teacher, (out / "gpnn.ckpt").string());
    write_atomic(out / "train_report.csv", gpnn_report_csv(h));
    rm.artifacts = {"gpnn.ckpt", "train_report.csv", "run_config.ini"};
    const auto pred = train::predict_teacher(w.cohort, w.kb, teacher);
    log << fmt::format("gpnn: {} epochs, {} optimizer steps, final loss {:.6g}, training accuracy {:.4f}\n",
                       h.epoch_loss.size(), h.optimizer_steps, h.epoch_loss.empty() ? 0.0 : h.epoch_loss.back(),
                       metrics::accuracy(pred.predictions, w.cohort.labels()));
  } else {
    std::optional<gpnn::Params> teacher;
    if (cfg.train.guidance.enabled()) {
      if (cfg.teacher.empty()) {
        throw ConfigError("guidance '" +
                          train::guidance_level_name(cfg.train.guidance.use_feat, cfg.train.guidance.use_logit) +
                          "' needs a teacher checkpoint (--teacher); train one with --model gpnn or pass --guidance off");
      }
      teacher = load_teacher_for(cfg.teacher, w);
    }
    train::TrainReport rep;
    auto student = train::train_pamil(w.cohort, w.u, teacher ? &*teacher : nullptr, w.kb, cfg, cfg.seed, &rep);
    if (!rep.all_finite()) throw NumericError("training produced a non-finite loss");
    checkpoint::save_pamil(student, (out / "pamil.ckpt").string());
    write_atomic(out / "train_report.csv", pamil_report_csv(rep));
    rm.artifacts = {"pamil.ckpt", "train_report.csv", "run_config.ini"};
    log << fmt::format("pamil ({} mode, guidance {}): {} epochs, {} optimizer steps, final total loss {:.6g}\n",
                       train::to_string(cfg.train.mode),
                       train::guidance_level_name(cfg.train.guidance.use_feat, cfg.train.guidance.use_logit), rep.epochs.size(),
                       rep.optimizer_steps, rep.epochs.empty() ? 0.0 : rep.epochs.back().mean.total);
  }
  rm.snapshot = train::run_config_to_ini(cfg);
  write_atomic(out / "run_config.ini", rm.snapshot);
  rm.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rm;
}

// ---------------------------------------------------------------------------
// eval

inline std::string fold_details_csv(const std::vector<std::string>& names, const std::vector<double>& spearman,
                                    const std::vector<double>& teacher_acc) {
  std::string s = "fold,saliency_spearman,teacher_accuracy\n";
  for (std::size_t i = 0; i < names.size(); ++i)
    s += fmt::format("{},{:.9g},{:.9g}\n", names[i], spearman[i], teacher_acc[i]);
  return s;
}

inline RunManifest cmd_eval(const train::RunConfig& cfg, const std::string& config_path, const std::string& ckpt,
                            const fs::path& out, std::ostream& log) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto w = load_workspace(cfg.cohort);
  RunManifest rm;
  rm.command = "eval";
  rm.config_path = config_path;
  rm.seed = cfg.seed;
  rm.snapshot = train::run_config_to_ini(cfg);
  fs::create_directories(out);
  std::string csv = metrics::csv_header() + "\n";
  if (!ckpt.empty()) {
    // External test: a frozen model scored on the whole cohort.
    train::StudentOutputs pred;
    double sp = train::kNaN;
    if (checkpoint_kind(ckpt) == "pamil") {
      const auto student = load_student_for(ckpt, w);
      pred = train::predict(w.cohort, w.u, student);
      sp = train::planted_saliency_spearman(w.cohort, pred.saliency);
    } else {
      const auto teacher = load_teacher_for(ckpt, w);
      pred = train::predict_teacher(w.cohort, w.kb, teacher);
    }
    const auto r = train::evaluate_outputs(pred, w.cohort);
    csv += metrics::csv_row("external", r) + "\n";
    write_atomic(out / "eval.csv", csv);
    write_atomic(out / "fold_details.csv", fold_details_csv({"external"}, {sp}, {train::kNaN}));
    log << metrics::text_block(r, w.cohort.class_names);
  } else {
    const auto cv = train::cross_validate(w.cohort, w.kb, w.u, cfg);
    write_atomic(out / "eval.csv", train::cross_validation_csv(cv));
    std::vector<std::string> names;
    std::vector<double> sp, ta;
    for (std::size_t f = 0; f < cv.folds.size(); ++f) {
      names.push_back(std::to_string(f));
      sp.push_back(cv.folds[f].saliency_spearman);
      ta.push_back(cv.folds[f].teacher_accuracy);
    }
    write_atomic(out / "fold_details.csv", fold_details_csv(names, sp, ta));
    log << metrics::csv_summary(cv.evals()) << "\n";
  }
  write_atomic(out / "run_config.ini", rm.snapshot);
  rm.artifacts = {"eval.csv", "fold_details.csv", "run_config.ini"};
  rm.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rm;
}

// ---------------------------------------------------------------------------
// explain

struct ExplainFlags {
  std::string what, cohort, student, teacher, activation, sample;
  std::size_t top_genes = 4, top_phenotypes = 3, permutations = 2000, bins = 128;
  std::uint64_t seed = 1;
};

inline nlohmann::ordered_json explain_snapshot(const ExplainFlags& f) {
  nlohmann::ordered_json j;
  j["what"] = f.what;
  j["cohort"] = absolute_string(f.cohort);
  j["student"] = absolute_string(f.student);
  j["teacher"] = absolute_string(f.teacher);
  j["activation"] = f.activation;
  j["sample"] = f.sample;
  j["top_genes"] = f.top_genes;
  j["top_phenotypes"] = f.top_phenotypes;
  j["permutations"] = f.permutations;
  j["bins"] = f.bins;
  j["seed"] = f.seed;
  return j;
}

inline RunManifest cmd_explain(const ExplainFlags& f, const fs::path& out, std::ostream& log) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto w = load_workspace(f.cohort);
  auto need = [](const std::string& path, const char* flag, const std::string& what) {
    if (path.empty()) throw ConfigError(fmt::format("--what {} needs {}", what, flag));
  };
  RunManifest rm;
  rm.command = "explain";
  rm.seed = f.seed;
  rm.snapshot = explain_snapshot(f).dump(2);
  fs::create_directories(out);
  std::string artifact;
  if (f.what == "shapley") {
    need(f.student, "--student", f.what);
    const auto student = load_student_for(f.student, w);
    const auto t = explain::phenotype_contributions(student, w.cohort, w.u, w.kb, f.seed);
    artifact = "contributions.csv";
    write_atomic(out / artifact, explain::contributions_csv(t));
    for (std::size_t c = 0; c < t.class_names.size(); ++c) {
      const auto r = t.ranked(c);
      log << t.class_names[c] << ":";
      for (std::size_t k = 0; k < std::min(f.top_phenotypes, r.size()); ++k) log << fmt::format(" {} ({:.4g})", r[k].name, r[k].weight);
      log << "\n";
    }
  } else if (f.what == "genes") {
    need(f.teacher, "--teacher", f.what);
    const auto teacher = load_teacher_for(f.teacher, w);
    const auto g = explain::gene_phenotype_contributions(teacher, w.cohort, w.kb, f.permutations, f.seed, f.top_genes);
    artifact = "genes.csv";
    write_atomic(out / artifact, explain::genes_csv(g));
  } else if (f.what == "heatmap") {
    need(f.student, "--student", f.what);
    const auto student = load_student_for(f.student, w);
    artifact = "saliency_heatmap.csv";
    write_atomic(out / artifact,
                 explain::saliency_heatmap_csv(w.cohort, explain::cohort_saliency(w.cohort, w.u, student), w.kb.names()));
  } else if (f.what == "attention") {
    need(f.student, "--student", f.what);
    const auto student = load_student_for(f.student, w);
    if (w.cohort.size() == 0) throw DataError("cohort is empty");
    std::size_t idx = 0;
    if (!f.sample.empty()) {
      const auto it = std::find_if(w.cohort.bags.begin(), w.cohort.bags.end(),
                                   [&](const FeatureBag& b) { return b.sample_id == f.sample; });
      if (it == w.cohort.bags.end()) throw LookupError("no sample '" + f.sample + "' in the cohort");
      idx = static_cast<std::size_t>(it - w.cohort.bags.begin());
    }
    const auto baseline = explain::mean_rows(explain::cohort_saliency(w.cohort, w.u, student));
    artifact = "attention_" + w.cohort.bags[idx].sample_id + ".csv";
    write_atomic(out / artifact,
                 explain::attention_heatmap_csv(student, w.cohort.bags[idx], w.u, w.kb, f.top_phenotypes, baseline));
  } else if (f.what == "sankey") {
    need(f.student, "--student", f.what);
    need(f.teacher, "--teacher", f.what);
    const auto student = load_student_for(f.student, w);
    const auto teacher = load_teacher_for(f.teacher, w);
    const auto g = explain::gene_phenotype_contributions(teacher, w.cohort, w.kb, f.permutations, f.seed, f.top_genes);
    const auto p = explain::phenotype_contributions(student, w.cohort, w.u, w.kb, f.seed);
    artifact = "sankey.csv";
    write_atomic(out / artifact, explain::sankey_csv(g, p));
  } else if (f.what == "leakage") {
    need(f.student, "--student", f.what);
    const auto student = load_student_for(f.student, w);
    const auto act = to_string(student.config.activation.kind);
    if (!f.activation.empty() && f.activation != act) {
      throw ConfigError("--activation " + f.activation + " does not match the student checkpoint (" + act + ")");
    }
    const auto r = explain::leakage_score(student, w.cohort, w.u, w.kb, f.bins);
    artifact = "leakage_" + act + ".csv";
    write_atomic(out / artifact, explain::leakage_csv(r));
    log << fmt::format("leakage ({}): concentration index {:.6g}\n", act, r.concentration);
  } else {
    throw ConfigError("unknown --what '" + f.what + "'");
  }
  rm.artifacts = {artifact};
  rm.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  log << "wrote " << (out / artifact).string() << "\n";
  return rm;
}

// ---------------------------------------------------------------------------
// grad-check

struct GradCheckFlags {
  std::uint64_t seed = 1;
  std::size_t probes = 32;
  double eps = 1e-5;
  double threshold = 1e-4;
  bool corrupt = false;
};

inline RunManifest cmd_grad_check(const GradCheckFlags& f, const fs::path& out, std::ostream& log, bool& passed) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto entries = train::run_gradient_suite(f.seed, f.probes, f.eps, f.corrupt);
  std::string csv = "check,max_relative_error,probes\n";
  passed = true;
  for (const auto& e : entries) {
    const bool ok = e.max_relative_error <= f.threshold;
    passed = passed && ok;
    csv += fmt::format("{},{:.9g},{}\n", e.name, e.max_relative_error, e.probes);
    log << fmt::format("{:<28} max rel err {:.3e}  {}\n", e.name, e.max_relative_error, ok ? "ok" : "FAIL");
  }
  fs::create_directories(out);
  write_atomic(out / "grad_check.csv", csv);
  nlohmann::ordered_json snap{{"seed", f.seed}, {"probes", f.probes}, {"eps", f.eps}, {"threshold", f.threshold},
                              {"corrupt", f.corrupt}};
  RunManifest rm;
  rm.command = "grad-check";
  rm.seed = f.seed;
  rm.snapshot = snap.dump(2);
  rm.artifacts = {"grad_check.csv"};
  rm.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  log << (passed ? "gradient check passed\n" : "gradient check FAILED\n");
  return rm;
}

// ---------------------------------------------------------------------------
// Entry point.

/// Runs one command. `args` excludes the program name. Returns the exit code.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"phenotype-guided multiple instance learning toolkit", "phenomil"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);
  std::string out_dir = default_out_dir();
  auto add_out = [&](CLI::App* sub) { sub->add_option("--out", out_dir, "output directory (default $PHENOMIL_OUT)"); };

  GenDataFlags gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic cohort");
  gen_cmd->add_option("--kb", gen.kb, "KB JSON file or bundled name (nsclc, rcc); synthetic KB when omitted");
  gen_cmd->add_option("--phenotypes", gen.phenotypes, "phenotypes in the synthetic KB");
  gen_cmd->add_option("--genes-per-phenotype", gen.genes_per_phenotype, "genes per synthetic gene set");
  gen_cmd->add_flag("--disjoint-genes", gen.disjoint_genes, "no gene shared between neighbouring synthetic sets");
  gen_cmd->add_option("--classes", gen.classes, "number of classes");
  gen_cmd->add_option("--per-class", gen.per_class, "samples per class");
  gen_cmd->add_option("--seed", gen.seed, "generator seed");
  gen_cmd->add_option("--d", gen.d, "feature dimension");
  gen_cmd->add_option("--noise", gen.noise, "patch noise sigma");
  gen_cmd->add_option("--patches-min", gen.patches_min, "minimum patches per bag");
  gen_cmd->add_option("--patches-max", gen.patches_max, "maximum patches per bag");
  gen_cmd->add_option("--profile", gen.profile, "default (class-specific) or shared saliency profiles")
      ->check(CLI::IsMember({"default", "shared"}));
  gen_cmd->add_option("--decay", gen.decay, "geometric decay of the saliency profile");
  gen_cmd->add_option("--class-signal", gen.class_signal, "class offset added to patch features");
  gen_cmd->add_option("--signal-phenotype", gen.signal_phenotype, "restrict the class offset to one phenotype's patches");
  gen_cmd->add_option("--beta", gen.beta, "expression response to saliency");
  gen_cmd->add_option("--expr-sigma", gen.expr_sigma, "expression noise sigma");
  gen_cmd->add_option("--signal-gene", gen.signal_genes, "GENE=SCALE multiplier on the expression response");
  gen_cmd->add_option("--embeddings", gen.embeddings, "embedding file instead of pseudo embeddings");
  add_out(gen_cmd);

  RunFlags train_flags;
  auto* train_cmd = app.add_subcommand("train", "train a GP-NN teacher or a PA-MIL student");
  train_flags.add(train_cmd, false);
  add_out(train_cmd);

  RunFlags eval_flags;
  std::string eval_ckpt;
  auto* eval_cmd = app.add_subcommand("eval", "k-fold evaluation, or external test of a checkpoint");
  eval_flags.add(eval_cmd, true);
  eval_cmd->add_option("--checkpoint", eval_ckpt, "score a frozen checkpoint on the whole cohort")->check(CLI::ExistingFile);
  add_out(eval_cmd);

  ExplainFlags ex;
  auto* ex_cmd = app.add_subcommand("explain", "interpretability exports");
  ex_cmd->add_option("--what", ex.what, "shapley, genes, heatmap, attention, sankey or leakage")
      ->required()
      ->check(CLI::IsMember({"shapley", "genes", "heatmap", "attention", "sankey", "leakage"}));
  ex_cmd->add_option("--cohort", ex.cohort, "cohort manifest")->required();
  ex_cmd->add_option("--student", ex.student, "PA-MIL checkpoint");
  ex_cmd->add_option("--teacher", ex.teacher, "GP-NN checkpoint");
  ex_cmd->add_option("--activation", ex.activation, "expected student activation (ln or leaky)")
      ->check(CLI::IsMember({"ln", "leaky"}));
  ex_cmd->add_option("--sample", ex.sample, "sample id for --what attention (default: first)");
  ex_cmd->add_option("--top-genes", ex.top_genes, "genes kept per phenotype");
  ex_cmd->add_option("--top-phenotypes", ex.top_phenotypes, "phenotypes kept in attention maps");
  ex_cmd->add_option("--permutations", ex.permutations, "permutations for sampled Shapley");
  ex_cmd->add_option("--bins", ex.bins, "histogram bins for JS divergence");
  ex_cmd->add_option("--seed", ex.seed, "seed for sampled Shapley");
  add_out(ex_cmd);

  GradCheckFlags gc;
  auto* gc_cmd = app.add_subcommand("grad-check", "finite-difference check of every analytic gradient");
  gc_cmd->add_option("--seed", gc.seed, "fixture and probe seed");
  gc_cmd->add_option("--probes", gc.probes, "probed entries per check");
  gc_cmd->add_option("--eps", gc.eps, "central-difference step");
  gc_cmd->add_option("--threshold", gc.threshold, "maximum accepted relative error");
  gc_cmd->add_flag("--corrupt-gradient", gc.corrupt, "perturb one analytic gradient (negative control)")->group("");
  add_out(gc_cmd);

  std::string replay_manifest;
  auto* replay_cmd = app.add_subcommand("replay", "re-run the command recorded in a manifest");
  replay_cmd->add_option("--manifest", replay_manifest, "manifest.json of an earlier run")->required()->check(CLI::ExistingFile);
  replay_cmd->add_option("--out", out_dir, "output directory for the replay")->required();

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (replay_cmd->parsed()) {
      const auto m = read_manifest(replay_manifest);
      auto again = m.argv;
      again.push_back("--out");
      again.push_back(out_dir);
      return run(again, out, err);
    }
    const fs::path out_path(out_dir);
    RunManifest rm;
    int code = kExitOk;
    if (gen_cmd->parsed()) {
      rm = cmd_gen_data(gen, out_path, out);
    } else if (train_cmd->parsed()) {
      rm = cmd_train(train_flags.resolve(), train_flags.config, out_path, out);
    } else if (eval_cmd->parsed()) {
      rm = cmd_eval(eval_flags.resolve(), eval_flags.config, eval_ckpt, out_path, out);
    } else if (ex_cmd->parsed()) {
      rm = cmd_explain(ex, out_path, out);
    } else if (gc_cmd->parsed()) {
      bool passed = false;
      rm = cmd_grad_check(gc, out_path, out, passed);
      code = passed ? kExitOk : kExitVerification;
    }
    rm.argv = strip_out_flag(args);
    write_manifest(rm, out_path);
    return code;
  } catch (const VerificationFailure& e) {
    err << "verification failed: " << e.what() << "\n";
    return kExitVerification;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}

}  // namespace phenomil::cli
