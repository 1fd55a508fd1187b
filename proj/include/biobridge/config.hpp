#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "biobridge/corpus.hpp"
#include "biobridge/encoder.hpp"
#include "biobridge/lm.hpp"
#include "biobridge/qformer.hpp"
#include "biobridge/synth.hpp"

namespace bb {

enum class OptKind { kSgd, kAdam };

struct OptimConfig {
  OptKind kind = OptKind::kSgd;
  double momentum = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

enum class Stage { kA, kB, kC };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::kA: return "a";
    case Stage::kB: return "b";
    case Stage::kC: return "c";
  }
  throw std::invalid_argument("stage_name: bad enum value");
}

inline Stage stage_from_name(const std::string& name) {
  for (auto s : {Stage::kA, Stage::kB, Stage::kC})
    if (name == stage_name(s)) return s;
  throw std::invalid_argument("stage_from_name: unknown stage '" + name + "'");
}

struct StageConfig {
  Stage stage = Stage::kA;
  double learning_rate = 1e-5;
  int epochs = 1;
  int batch_size = 8;
  std::uint64_t seed = 1;
  std::vector<std::string> frozen;
  std::map<std::string, double> loss_weights = {{"ptc", 1.0}, {"ptm", 1.0}};
  OptimConfig optim;
  int patience = 5;
  bool train_qformer = false;
  int max_new_tokens = 64;

  void validate() const {
    if (learning_rate < 0.0)
      throw std::invalid_argument("StageConfig: learning_rate must be non-negative");
    if (epochs < 1 || batch_size < 1)
      throw std::invalid_argument("StageConfig: epochs and batch_size must be >= 1");
    if (max_new_tokens < 1)
      throw std::invalid_argument("StageConfig: max_new_tokens must be >= 1");
    if (patience < 0) throw std::invalid_argument("StageConfig: patience must be >= 0");
  }
};

struct ModelConfig {
  EncoderConfig prot_enc{2, 4, 64, 128, 512};
  EncoderConfig text_enc{2, 4, 64, 128, 512};
  QFormerConfig qformer;
  EncoderConfig lm{2, 4, 128, 256, 512};
  PromptLayout layout = PromptLayout::kDelimited;
  int num_classes = 2;
  std::uint64_t init_seed = 1;

  void validate() const {
    prot_enc.validate();
    text_enc.validate();
    qformer.validate();
    lm.validate();
    if (prot_enc.model_dim != qformer.model_dim)
      throw std::invalid_argument("ModelConfig: protein encoder dim " +
                                  std::to_string(prot_enc.model_dim) +
                                  " must match query-former dim " +
                                  std::to_string(qformer.model_dim));
    if (text_enc.model_dim != qformer.model_dim)
      throw std::invalid_argument("ModelConfig: text encoder dim must match query-former dim");
    if (num_classes < 2) throw std::invalid_argument("ModelConfig: num_classes must be >= 2");
  }
};

namespace cfgio {

inline nlohmann::json encoder_to_json(const EncoderConfig& c) {
  return {{"layers", c.num_layers}, {"heads", c.num_heads}, {"dim", c.model_dim},
          {"ff", c.ff_dim},         {"max_len", c.max_len}};
}

inline EncoderConfig encoder_from_json(const nlohmann::json& j, const EncoderConfig& base) {
  EncoderConfig c = base;
  c.num_layers = j.value("layers", c.num_layers);
  c.num_heads = j.value("heads", c.num_heads);
  c.model_dim = j.value("dim", c.model_dim);
  c.ff_dim = j.value("ff", c.ff_dim);
  c.max_len = j.value("max_len", c.max_len);
  return c;
}

inline nlohmann::json qformer_to_json(const QFormerConfig& c) {
  return {{"queries", c.num_queries}, {"depth", c.depth},       {"heads", c.num_heads},
          {"dim", c.model_dim},       {"ff", c.ff_dim},         {"init_tau", c.init_tau},
          {"tau_floor", c.tau_floor}};
}

inline QFormerConfig qformer_from_json(const nlohmann::json& j, const QFormerConfig& base) {
  QFormerConfig c = base;
  c.num_queries = j.value("queries", c.num_queries);
  c.depth = j.value("depth", c.depth);
  c.num_heads = j.value("heads", c.num_heads);
  c.model_dim = j.value("dim", c.model_dim);
  c.ff_dim = j.value("ff", c.ff_dim);
  c.init_tau = j.value("init_tau", c.init_tau);
  c.tau_floor = j.value("tau_floor", c.tau_floor);
  return c;
}

inline nlohmann::json optim_to_json(const OptimConfig& c) {
  return {{"kind", c.kind == OptKind::kSgd ? "sgd" : "adam"},
          {"momentum", c.momentum},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"eps", c.eps}};
}

inline OptimConfig optim_from_json(const nlohmann::json& j, const OptimConfig& base) {
  OptimConfig c = base;
  if (j.contains("kind")) {
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "sgd") {
      c.kind = OptKind::kSgd;
    } else if (kind == "adam") {
      c.kind = OptKind::kAdam;
    } else {
      throw std::invalid_argument("OptimConfig: unknown kind '" + kind + "'");
    }
  }
  c.momentum = j.value("momentum", c.momentum);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  return c;
}

inline nlohmann::json stage_to_json(const StageConfig& c) {
  return {{"stage", stage_name(c.stage)},
          {"learning_rate", c.learning_rate},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"frozen", c.frozen},
          {"loss_weights", c.loss_weights},
          {"optim", optim_to_json(c.optim)},
          {"patience", c.patience},
          {"train_qformer", c.train_qformer},
          {"max_new_tokens", c.max_new_tokens}};
}

inline StageConfig stage_from_json(const nlohmann::json& j, const StageConfig& base) {
  StageConfig c = base;
  if (j.contains("stage")) c.stage = stage_from_name(j.at("stage").get<std::string>());
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  if (j.contains("frozen")) c.frozen = j.at("frozen").get<std::vector<std::string>>();
  if (j.contains("loss_weights"))
    c.loss_weights = j.at("loss_weights").get<std::map<std::string, double>>();
  if (j.contains("optim")) c.optim = optim_from_json(j.at("optim"), c.optim);
  c.patience = j.value("patience", c.patience);
  c.train_qformer = j.value("train_qformer", c.train_qformer);
  c.max_new_tokens = j.value("max_new_tokens", c.max_new_tokens);
  c.validate();
  return c;
}

inline nlohmann::json model_to_json(const ModelConfig& c) {
  return {{"prot_enc", encoder_to_json(c.prot_enc)},
          {"text_enc", encoder_to_json(c.text_enc)},
          {"qformer", qformer_to_json(c.qformer)},
          {"lm", encoder_to_json(c.lm)},
          {"layout", c.layout == PromptLayout::kDelimited ? "delimited" : "prefix"},
          {"num_classes", c.num_classes},
          {"init_seed", c.init_seed}};
}

inline ModelConfig model_from_json(const nlohmann::json& j, const ModelConfig& base) {
  ModelConfig c = base;
  if (j.contains("prot_enc")) c.prot_enc = encoder_from_json(j.at("prot_enc"), c.prot_enc);
  if (j.contains("text_enc")) c.text_enc = encoder_from_json(j.at("text_enc"), c.text_enc);
  if (j.contains("qformer")) c.qformer = qformer_from_json(j.at("qformer"), c.qformer);
  if (j.contains("lm")) c.lm = encoder_from_json(j.at("lm"), c.lm);
  if (j.contains("layout")) {
    const auto layout = j.at("layout").get<std::string>();
    if (layout == "delimited") {
      c.layout = PromptLayout::kDelimited;
    } else if (layout == "prefix") {
      c.layout = PromptLayout::kPrefix;
    } else {
      throw std::invalid_argument("ModelConfig: unknown layout '" + layout + "'");
    }
  }
  c.num_classes = j.value("num_classes", c.num_classes);
  c.init_seed = j.value("init_seed", c.init_seed);
  c.validate();
  return c;
}

}  // namespace cfgio

struct RunConfig {
  ModelConfig model;
  StageConfig stage_a;
  StageConfig stage_b;
  StageConfig stage_c;
  MixtureSpec mixture = MixtureSpec::pretrain_defaults();
  SyntheticTaskSpec task;
  CorpusSpec corpus;
  std::size_t pack_window = 128;
  std::string run_dir = "runs/default";

  RunConfig() {
    stage_a.stage = Stage::kA;
    stage_a.seed = 11;
    stage_b.stage = Stage::kB;
    stage_b.seed = 12;
    stage_c.stage = Stage::kC;
    stage_c.seed = 13;
  }

  void validate() const {
    model.validate();
    stage_a.validate();
    stage_b.validate();
    stage_c.validate();
    mixture.validate();
    task.validate();
    if (pack_window == 0 || pack_window > static_cast<std::size_t>(model.lm.max_len))
      throw std::invalid_argument("RunConfig: pack_window must be in [1, lm max_len]");
  }

  nlohmann::json to_json() const {
    return {{"model", cfgio::model_to_json(model)},
            {"stage_a", cfgio::stage_to_json(stage_a)},
            {"stage_b", cfgio::stage_to_json(stage_b)},
            {"stage_c", cfgio::stage_to_json(stage_c)},
            {"mixture", mixture.ratio},
            {"task", task.to_json()},
            {"corpus", {{"seed", corpus.seed}, {"docs_per_source", corpus.docs_per_source}}},
            {"pack_window", pack_window},
            {"run_dir", run_dir}};
  }

  static RunConfig from_json(const nlohmann::json& j) {
    RunConfig c;
    if (j.contains("model")) c.model = cfgio::model_from_json(j.at("model"), c.model);
    if (j.contains("stage_a")) c.stage_a = cfgio::stage_from_json(j.at("stage_a"), c.stage_a);
    if (j.contains("stage_b")) c.stage_b = cfgio::stage_from_json(j.at("stage_b"), c.stage_b);
    if (j.contains("stage_c")) c.stage_c = cfgio::stage_from_json(j.at("stage_c"), c.stage_c);
    if (j.contains("mixture"))
      c.mixture.ratio = j.at("mixture").get<std::array<double, kNumSources>>();
    if (j.contains("task")) c.task = SyntheticTaskSpec::from_json(j.at("task"));
    if (j.contains("corpus")) {
      c.corpus.seed = j.at("corpus").value("seed", c.corpus.seed);
      c.corpus.docs_per_source =
          j.at("corpus").value("docs_per_source", c.corpus.docs_per_source);
    }
    c.pack_window = j.value("pack_window", c.pack_window);
    c.run_dir = j.value("run_dir", c.run_dir);
    c.validate();
    return c;
  }

  static RunConfig from_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("RunConfig: cannot open " + path);
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw std::invalid_argument("RunConfig: invalid JSON in " + path);
    return from_json(j);
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("RunConfig: cannot open " + path + " for writing");
    out << to_json().dump(2) << '\n';
  }
};

}  // namespace bb
