#pragma once

#include <cstdint>
#include <sstream>
#include <string>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>

#include "phenomil/core/error.hpp"
#include "phenomil/model/gpnn.hpp"
#include "phenomil/model/pamil.hpp"
#include "phenomil/train/trainer.hpp"

namespace phenomil::train {

/// Resolved settings for one run. The INI layout has sections [optimizer],
/// [guidance], [model], [data] and [run]; each key mirrors a CLI flag.
struct RunConfig {
  // [run]
  std::string model = "pamil";  // pamil | gpnn
  std::uint64_t seed = 1;
  std::size_t kfold = 5;
  std::string out;

  TrainConfig train;  // [optimizer], [guidance], mode/epochs in [run]
  pamil::Config pamil;
  gpnn::Config gpnn;
  std::size_t teacher_epochs = 20;

  // [data]
  std::string cohort;
  std::string teacher;  // GP-NN checkpoint for guided runs

  void validate() const {
    if (model != "pamil" && model != "gpnn") throw ConfigError("model must be pamil or gpnn");
    train.validate();
    pamil.validate();
    gpnn.validate();
  }
};

inline RunConfig run_config_from_ptree(const boost::property_tree::ptree& pt, RunConfig c = {}) {
  try {
    c.model = pt.get("run.model", c.model);
    c.seed = pt.get("run.seed", c.seed);
    c.kfold = pt.get("run.kfold", c.kfold);
    c.out = pt.get("run.out", c.out);
    c.train.mode = parse_mode(pt.get("run.mode", to_string(c.train.mode)));
    c.train.epochs = pt.get("run.epochs", c.train.epochs);
    c.train.epochs_phase2 = pt.get("run.epochs_phase2", c.train.epochs_phase2);
    c.teacher_epochs = pt.get("run.teacher_epochs", c.teacher_epochs);

    auto& a = c.train.adam;
    a.learning_rate = pt.get("optimizer.lr", a.learning_rate);
    a.weight_decay = pt.get("optimizer.weight_decay", a.weight_decay);
    a.beta1 = pt.get("optimizer.beta1", a.beta1);
    a.beta2 = pt.get("optimizer.beta2", a.beta2);
    a.epsilon = pt.get("optimizer.epsilon", a.epsilon);
    a.clip_norm = pt.get("optimizer.clip_norm", a.clip_norm);
    a.accumulation_steps = pt.get("optimizer.accumulation_steps", a.accumulation_steps);

    auto& g = c.train.guidance;
    std::tie(g.use_feat, g.use_logit) =
        parse_guidance_level(pt.get("guidance.level", guidance_level_name(g.use_feat, g.use_logit)));
    g.objective = parse_objective(pt.get("guidance.objective", to_string(g.objective)));
    g.lambda = pt.get("guidance.lambda", g.lambda);
    g.tau_guidance = pt.get("guidance.tau_guidance", g.tau_guidance);

    const auto act = parse_activation(pt.get("model.activation", to_string(c.pamil.activation.kind)));
    c.pamil.activation.kind = act;
    c.gpnn.activation.kind = act;
    c.pamil.head = pamil::parse_head(pt.get("model.head", pamil::to_string(c.pamil.head)));
    c.pamil.tau = pt.get("model.tau", c.pamil.tau);
    c.pamil.alpha = pt.get("model.alpha", c.pamil.alpha);
    c.pamil.feature_hidden = pt.get("model.feature_hidden", c.pamil.feature_hidden);
    c.pamil.init_std = pt.get("model.init_std", c.pamil.init_std);
    c.pamil.bottleneck_init_std = pt.get("model.bottleneck_init_std", c.pamil.bottleneck_init_std);
    c.gpnn.max_hidden = pt.get("model.gpnn_hidden", c.gpnn.max_hidden);
    c.gpnn.init = gpnn::parse_init(pt.get("model.gpnn_init", gpnn::to_string(c.gpnn.init)));
    c.gpnn.log_input = pt.get("model.log_input", c.gpnn.log_input);

    c.cohort = pt.get("data.cohort", c.cohort);
    c.teacher = pt.get("data.teacher", c.teacher);
  } catch (const boost::property_tree::ptree_error& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  return c;
}

inline RunConfig load_run_config(const std::string& path, RunConfig defaults = {}) {
  boost::property_tree::ptree pt;
  try {
    boost::property_tree::read_ini(path, pt);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ParseError(std::string("run config: ") + e.message(), e.line());
  }
  return run_config_from_ptree(pt, std::move(defaults));
}

/// Snapshot text; reloading it reproduces the same RunConfig.
inline std::string run_config_to_ini(const RunConfig& c) {
  const auto& a = c.train.adam;
  const auto& g = c.train.guidance;
  std::string s;
  s += "[run]\n";
  s += fmt::format("model = {}\nseed = {}\nkfold = {}\nmode = {}\nepochs = {}\nepochs_phase2 = {}\nteacher_epochs = {}\n",
                   c.model, c.seed, c.kfold, to_string(c.train.mode), c.train.epochs, c.train.epochs_phase2,
                   c.teacher_epochs);
  if (!c.out.empty()) s += fmt::format("out = {}\n", c.out);
  s += "\n[optimizer]\n";
  s += fmt::format("lr = {:.17g}\nweight_decay = {:.17g}\nbeta1 = {:.17g}\nbeta2 = {:.17g}\nepsilon = {:.17g}\n",
                   a.learning_rate, a.weight_decay, a.beta1, a.beta2, a.epsilon);
  s += fmt::format("clip_norm = {:.17g}\naccumulation_steps = {}\n", a.clip_norm, a.accumulation_steps);
  s += "\n[guidance]\n";
  s += fmt::format("level = {}\nobjective = {}\nlambda = {:.17g}\ntau_guidance = {:.17g}\n",
                   guidance_level_name(g.use_feat, g.use_logit), to_string(g.objective), g.lambda, g.tau_guidance);
  s += "\n[model]\n";
  s += fmt::format("activation = {}\nhead = {}\ntau = {:.17g}\nalpha = {:.17g}\nfeature_hidden = {}\ninit_std = {:.17g}\n",
                   to_string(c.pamil.activation.kind), pamil::to_string(c.pamil.head), c.pamil.tau, c.pamil.alpha,
                   c.pamil.feature_hidden, c.pamil.init_std);
  s += fmt::format("bottleneck_init_std = {:.17g}\n", c.pamil.bottleneck_init_std);
  s += fmt::format("gpnn_hidden = {}\nlog_input = {}\ngpnn_init = {}\n", c.gpnn.max_hidden,
                   c.gpnn.log_input ? "true" : "false", gpnn::to_string(c.gpnn.init));
  s += "\n[data]\n";
  if (!c.cohort.empty()) s += fmt::format("cohort = {}\n", c.cohort);
  if (!c.teacher.empty()) s += fmt::format("teacher = {}\n", c.teacher);
  return s;
}

inline RunConfig parse_run_config_text(const std::string& text, RunConfig defaults = {}) {
  boost::property_tree::ptree pt;
  std::istringstream in(text);
  try {
    boost::property_tree::read_ini(in, pt);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ParseError(std::string("run config: ") + e.message(), e.line());
  }
  return run_config_from_ptree(pt, std::move(defaults));
}

}  // namespace phenomil::train
