#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "biobridge/checkpoint.hpp"
#include "biobridge/config.hpp"
#include "biobridge/corpus.hpp"
#include "biobridge/encoder.hpp"
#include "biobridge/lm.hpp"
#include "biobridge/metrics.hpp"
#include "biobridge/qformer.hpp"
#include "biobridge/synth.hpp"
#include "biobridge/vocab.hpp"

namespace bb {

// One registry, one namespace per component. The protein encoder is frozen at
// construction and stays that way for the life of the bundle.
struct ModelBundle {
  ModelConfig cfg;
  TextVocab vocab;
  ProteinVocab prot_vocab;
  Rng init_rng;
  ParamRegistry reg;
  ProteinEncoder prot_enc;
  TextEncoder text_enc;
  QFormer qformer;
  Projector projector;
  CausalLM lm;
  ClassificationHead cls_head;

  ModelBundle(const ModelConfig& c, TextVocab v)
      : cfg((c.validate(), c)),
        vocab(std::move(v)),
        init_rng(c.init_seed),
        prot_enc(reg, "prot_enc", cfg.prot_enc, init_rng),
        text_enc(reg, "text_enc", cfg.text_enc, vocab.size(), init_rng),
        qformer(reg, "qformer", cfg.qformer, vocab.size(), init_rng),
        projector(reg, "projector", cfg.qformer.model_dim, cfg.lm.model_dim, init_rng),
        lm(reg, "lm", cfg.lm, vocab.size(), init_rng),
        cls_head(reg, "cls_head", cfg.lm.model_dim, cfg.num_classes, init_rng) {
    prot_enc.freeze();
  }

  TensorPtr protein_states(const std::string& seq) const {
    Tape tape;
    return prot_enc.forward(tape, prot_vocab.encode(seq));
  }

  TensorPtr protein_latents(const std::string& seq) const {
    Tape tape;
    return qformer.forward(tape, protein_states(seq));
  }

  TensorPtr text_embedding(const std::string& text) const {
    Tape tape;
    return text_enc.forward(tape, vocab.encode(text));
  }
};

class Optimizer {
 public:
  Optimizer(std::vector<std::pair<std::string, TensorPtr>> params, const OptimConfig& cfg,
            double lr)
      : params_(std::move(params)), cfg_(cfg), lr_(lr) {
    if (lr < 0.0) throw std::invalid_argument("Optimizer: learning rate must be non-negative");
    for (const auto& [name, p] : params_) {
      state_[name].assign(p->numel(), 0.0);
      if (cfg_.kind == OptKind::kAdam) state2_[name].assign(p->numel(), 0.0);
    }
  }

  void step() {
    ++t_;
    for (auto& [name, p] : params_) {
      auto& m = state_[name];
      if (cfg_.kind == OptKind::kSgd) {
        for (std::size_t i = 0; i < p->numel(); ++i) {
          m[i] = cfg_.momentum * m[i] + p->grad[i];
          p->values[i] -= lr_ * m[i];
        }
      } else {
        auto& v = state2_[name];
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < p->numel(); ++i) {
          m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * p->grad[i];
          v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * p->grad[i] * p->grad[i];
          p->values[i] -= lr_ * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
        }
      }
    }
  }

  void zero_grads() {
    for (auto& [name, p] : params_) p->zero_grad();
  }

  const std::vector<std::pair<std::string, TensorPtr>>& params() const { return params_; }

 private:
  std::vector<std::pair<std::string, TensorPtr>> params_;
  OptimConfig cfg_;
  double lr_;
  std::size_t t_ = 0;
  std::map<std::string, std::vector<double>> state_;
  std::map<std::string, std::vector<double>> state2_;
};

inline void check_frozen_resolve(const ParamRegistry& reg, const std::vector<std::string>& frozen) {
  for (const auto& prefix : frozen)
    if (reg.with_prefix(prefix).empty())
      throw std::invalid_argument("StageConfig: frozen prefix '" + prefix +
                                  "' matches no parameters");
}

inline std::vector<std::pair<std::string, TensorPtr>> trainable_params(
    const ParamRegistry& reg, const std::vector<std::string>& include,
    const std::vector<std::string>& frozen) {
  check_frozen_resolve(reg, frozen);
  std::vector<std::pair<std::string, TensorPtr>> out;
  for (const auto& prefix : include) {
    for (auto& [name, p] : reg.with_prefix(prefix)) {
      if (!p->requires_grad) continue;
      bool skip = false;
      for (const auto& f : frozen)
        if (name.rfind(f, 0) == 0) skip = true;
      if (!skip) out.emplace_back(name, p);
    }
  }
  return out;
}

struct TrainResult {
  std::vector<double> losses;
  std::vector<double> val_losses;
  std::size_t steps = 0;
  bool stopped_early = false;
};

inline void write_loss_csv(const std::string& path, const std::vector<double>& losses) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_loss_csv: cannot open " + path);
  out << "step,loss\n";
  out.precision(17);
  for (std::size_t i = 0; i < losses.size(); ++i) out << i << ',' << losses[i] << '\n';
}

namespace detail {

inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size,
                                                          Rng& rng, bool min_two) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < n; i += batch_size) {
    const std::size_t end = std::min(n, i + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  if (min_two && batches.size() >= 2 && batches.back().size() == 1) {
    auto& prev = batches[batches.size() - 2];
    prev.push_back(batches.back().front());
    batches.pop_back();
  }
  return batches;
}

inline void ensure_finite(double loss, const char* where, std::size_t step) {
  if (!std::isfinite(loss))
    throw std::runtime_error(std::string(where) + ": non-finite loss at step " +
                             std::to_string(step));
}

// Numeric blowups inside an op surface as domain_error without step context;
// tag them with the step so a diverging run names where it died.
template <typename F>
inline double guarded_step(const char* where, std::size_t step, F&& body) {
  try {
    return body();
  } catch (const std::domain_error& e) {
    throw std::runtime_error(std::string(where) + ": non-finite loss at step " +
                             std::to_string(step) + " (" + e.what() + ")");
  }
}

inline void finish_run(const std::string& run_dir, const std::string& stage,
                       const ParamRegistry& reg, const TrainResult& result) {
  if (run_dir.empty()) return;
  std::filesystem::create_directories(run_dir);
  write_loss_csv(run_dir + "/stage_" + stage + "_loss.csv", result.losses);
  save_checkpoint(run_dir + "/stage_" + stage + ".ckpt", reg);
}

struct FreezeGuard {
  const ParamRegistry& reg;
  std::vector<std::pair<std::string, std::uint64_t>> before;

  FreezeGuard(const ParamRegistry& r, std::vector<std::string> prefixes) : reg(r) {
    for (auto& p : prefixes) before.emplace_back(p, fingerprint(reg, p));
  }

  void verify(const char* where) const {
    for (const auto& [prefix, fp] : before)
      if (fingerprint(reg, prefix) != fp)
        throw std::runtime_error(std::string(where) + ": parameters under '" + prefix +
                                 "' changed but must stay fixed");
  }
};

}  // namespace detail

// Language-model pretraining over packed token streams: next-token
// cross-entropy at every position after the first.
inline TrainResult train_stage_a(ModelBundle& bundle, const std::vector<PackedSequence>& packs,
                                 const StageConfig& cfg, const std::string& run_dir = "") {
  cfg.validate();
  if (packs.empty()) throw std::invalid_argument("train_stage_a: no packs");
  for (const auto& p : packs) {
    if (p.tokens.size() < 2)
      throw std::invalid_argument("train_stage_a: pack shorter than 2 tokens");
    if (p.tokens.size() > static_cast<std::size_t>(bundle.cfg.lm.max_len))
      throw std::invalid_argument("train_stage_a: pack of " + std::to_string(p.tokens.size()) +
                                  " tokens exceeds LM max_len " +
                                  std::to_string(bundle.cfg.lm.max_len));
  }
  detail::FreezeGuard guard(bundle.reg, {"prot_enc.", "qformer.", "text_enc.", "projector."});
  Optimizer opt(trainable_params(bundle.reg, {"lm."}, cfg.frozen), cfg.optim, cfg.learning_rate);
  Rng rng(cfg.seed);

  TrainResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto batches = detail::make_batches(packs.size(), static_cast<std::size_t>(cfg.batch_size),
                                              rng, false);
    for (const auto& batch : batches) {
      result.losses.push_back(detail::guarded_step("train_stage_a", result.steps, [&] {
        Tape tape;
        std::vector<TensorPtr> losses;
        for (std::size_t idx : batch) {
          const auto& tokens = packs[idx].tokens;
          std::vector<int> labels = tokens;
          std::vector<std::uint8_t> mask(tokens.size(), 1);
          mask[0] = 0;
          losses.push_back(masked_next_token_loss(tape, bundle.lm,
                                                  bundle.lm.embed(tape, tokens), labels, mask));
        }
        auto loss = mean_all(tape, stack_scalars(tape, losses));
        detail::ensure_finite(loss->values[0], "train_stage_a", result.steps);
        opt.zero_grads();
        tape.backward(loss);
        opt.step();
        return loss->values[0];
      }));
      ++result.steps;
    }
  }
  guard.verify("train_stage_a");
  detail::finish_run(run_dir, "a", bundle.reg, result);
  return result;
}

// Contrastive + matching alignment on (sequence, description) pairs. Protein
// states go through the frozen encoder once and are reused every epoch.
inline TrainResult train_stage_b(ModelBundle& bundle, const std::vector<SyntheticItem>& pairs,
                                 const StageConfig& cfg, const std::string& run_dir = "") {
  cfg.validate();
  if (pairs.size() < 2) throw std::invalid_argument("train_stage_b: need at least 2 pairs");
  detail::FreezeGuard guard(bundle.reg, {"prot_enc.", "lm.", "projector.", "cls_head."});
  std::vector<std::string> include = {"qformer.", "text_enc."};
  Optimizer opt(trainable_params(bundle.reg, include, cfg.frozen), cfg.optim, cfg.learning_rate);
  Rng rng(cfg.seed);

  std::vector<TensorPtr> hs;
  std::vector<std::vector<int>> texts;
  hs.reserve(pairs.size());
  texts.reserve(pairs.size());
  for (const auto& item : pairs) {
    hs.push_back(bundle.protein_states(item.sequence));
    texts.push_back(bundle.vocab.encode(item.description));
  }

  const double w_ptc = cfg.loss_weights.count("ptc") ? cfg.loss_weights.at("ptc") : 1.0;
  const double w_ptm = cfg.loss_weights.count("ptm") ? cfg.loss_weights.at("ptm") : 1.0;

  TrainResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto batches = detail::make_batches(pairs.size(), static_cast<std::size_t>(cfg.batch_size),
                                              rng, true);
    for (const auto& batch : batches) {
      result.losses.push_back(detail::guarded_step("train_stage_b", result.steps, [&] {
        Tape tape;
        std::vector<TensorPtr> zps, zts;
        std::vector<TensorPtr> batch_hs;
        std::vector<std::vector<int>> batch_texts;
        for (std::size_t idx : batch) {
          zps.push_back(bundle.qformer.forward(tape, hs[idx]));
          zts.push_back(bundle.text_enc.forward(tape, texts[idx]));
          batch_hs.push_back(hs[idx]);
          batch_texts.push_back(texts[idx]);
        }
        auto sim = pairwise_similarity(tape, zps, zts, bundle.qformer.tau(tape));
        auto loss = scale(tape, ptc_loss(tape, sim), w_ptc);
        if (batch.size() >= 2 && w_ptm != 0.0) {
          auto negs = construct_negatives(batch.size(), rng);
          auto ptm = ptm_loss(tape, bundle.qformer, batch_hs, batch_texts, negs);
          loss = add(tape, loss, scale(tape, ptm, w_ptm));
        }
        detail::ensure_finite(loss->values[0], "train_stage_b", result.steps);
        opt.zero_grads();
        tape.backward(loss);
        opt.step();
        return loss->values[0];
      }));
      ++result.steps;
    }
  }
  guard.verify("train_stage_b");
  detail::finish_run(run_dir, "b", bundle.reg, result);
  return result;
}

namespace detail {

inline std::vector<std::string> stage_c_include(const StageConfig& cfg, bool with_cls_head) {
  std::vector<std::string> include = {"projector.", "lm."};
  if (with_cls_head) include.emplace_back("cls_head.");
  if (cfg.train_qformer) include.emplace_back("qformer.");
  return include;
}

// Tracks a validation curve and signals once it has gone `patience` epochs
// without a new minimum.
struct PlateauWatch {
  int patience;
  double best = std::numeric_limits<double>::infinity();
  int stale = 0;

  explicit PlateauWatch(int p) : patience(p) {}

  bool should_stop(double val) {
    if (val < best) {
      best = val;
      stale = 0;
      return false;
    }
    return ++stale >= patience;
  }
};

}  // namespace detail

inline double validation_generation_loss(const ModelBundle& bundle,
                                         const std::vector<SyntheticItem>& items,
                                         const std::vector<int>& prefix_ids = {}) {
  if (items.empty())
    throw std::invalid_argument("validation_generation_loss: no items");
  double total = 0.0;
  for (const auto& item : items) {
    Tape tape;
    auto zp = bundle.qformer.forward(tape, bundle.protein_states(item.sequence));
    auto prompt =
        assemble_prompt(tape, bundle.lm, bundle.projector, zp, prefix_ids, {}, bundle.cfg.layout);
    auto ids = bundle.vocab.encode(item.description);
    ids.push_back(TextVocab::kEos);
    total += lm_loss(tape, bundle.lm, prompt.emb, ids)->values[0];
  }
  return total / static_cast<double>(items.size());
}

// Residues spelled out as space-separated letters, bypassing the encoder,
// query-former, and projector entirely.
inline std::vector<int> plain_residue_ids(const TextVocab& vocab, const std::string& seq) {
  std::string spaced;
  for (char c : seq) {
    if (!spaced.empty()) spaced += ' ';
    spaced += c;
  }
  return vocab.encode(spaced);
}

inline double validation_classification_loss(const ModelBundle& bundle,
                                             const std::vector<SyntheticItem>& items,
                                             const std::vector<int>& prefix_ids = {},
                                             bool plaintext = false) {
  if (items.empty())
    throw std::invalid_argument("validation_classification_loss: no items");
  double total = 0.0;
  for (const auto& item : items) {
    Tape tape;
    TensorPtr emb;
    if (plaintext) {
      emb = bundle.lm.embed(tape, plain_residue_ids(bundle.vocab, item.sequence));
    } else {
      auto zp = bundle.qformer.forward(tape, bundle.protein_states(item.sequence));
      emb = assemble_prompt(tape, bundle.lm, bundle.projector, zp, prefix_ids, {},
                            bundle.cfg.layout)
                .emb;
    }
    total += classification_ce(tape, bundle.lm, emb, bundle.cls_head, item.label)->values[0];
  }
  return total / static_cast<double>(items.size());
}

// Instruction-style grounding: the LM learns to emit each description from the
// projected protein latents.
inline TrainResult train_stage_c_generation(ModelBundle& bundle,
                                            const std::vector<SyntheticItem>& items,
                                            const StageConfig& cfg,
                                            const std::vector<int>& prefix_ids = {},
                                            const std::string& run_dir = "",
                                            const std::vector<SyntheticItem>& val_items = {}) {
  cfg.validate();
  if (items.empty()) throw std::invalid_argument("train_stage_c_generation: no items");
  detail::FreezeGuard guard(bundle.reg, {"prot_enc.", "text_enc.", "cls_head."});
  Optimizer opt(trainable_params(bundle.reg, detail::stage_c_include(cfg, false), cfg.frozen),
                cfg.optim, cfg.learning_rate);
  Rng rng(cfg.seed);

  std::vector<TensorPtr> hs;
  std::vector<std::vector<int>> targets;
  for (const auto& item : items) {
    hs.push_back(bundle.protein_states(item.sequence));
    auto ids = bundle.vocab.encode(item.description);
    ids.push_back(TextVocab::kEos);
    targets.push_back(std::move(ids));
  }

  TrainResult result;
  detail::PlateauWatch plateau(cfg.patience);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto batches = detail::make_batches(items.size(), static_cast<std::size_t>(cfg.batch_size),
                                              rng, false);
    for (const auto& batch : batches) {
      result.losses.push_back(detail::guarded_step("train_stage_c_generation", result.steps, [&] {
        Tape tape;
        std::vector<TensorPtr> losses;
        for (std::size_t idx : batch) {
          auto zp = bundle.qformer.forward(tape, hs[idx]);
          auto prompt = assemble_prompt(tape, bundle.lm, bundle.projector, zp, prefix_ids, {},
                                        bundle.cfg.layout);
          losses.push_back(lm_loss(tape, bundle.lm, prompt.emb, targets[idx]));
        }
        auto loss = mean_all(tape, stack_scalars(tape, losses));
        detail::ensure_finite(loss->values[0], "train_stage_c_generation", result.steps);
        opt.zero_grads();
        tape.backward(loss);
        opt.step();
        return loss->values[0];
      }));
      ++result.steps;
    }
    if (cfg.patience > 0 && !val_items.empty()) {
      result.val_losses.push_back(validation_generation_loss(bundle, val_items, prefix_ids));
      if (plateau.should_stop(result.val_losses.back())) {
        result.stopped_early = true;
        break;
      }
    }
  }
  guard.verify("train_stage_c_generation");
  detail::finish_run(run_dir, "c", bundle.reg, result);
  return result;
}

inline TrainResult train_stage_c_classification(ModelBundle& bundle,
                                                const std::vector<SyntheticItem>& items,
                                                const StageConfig& cfg,
                                                const std::vector<int>& prefix_ids = {},
                                                const std::string& run_dir = "",
                                                const std::vector<SyntheticItem>& val_items = {}) {
  cfg.validate();
  if (items.empty()) throw std::invalid_argument("train_stage_c_classification: no items");
  detail::FreezeGuard guard(bundle.reg, {"prot_enc.", "text_enc."});
  Optimizer opt(trainable_params(bundle.reg, detail::stage_c_include(cfg, true), cfg.frozen),
                cfg.optim, cfg.learning_rate);
  Rng rng(cfg.seed);

  std::vector<TensorPtr> hs;
  for (const auto& item : items) hs.push_back(bundle.protein_states(item.sequence));

  TrainResult result;
  detail::PlateauWatch plateau(cfg.patience);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto batches = detail::make_batches(items.size(), static_cast<std::size_t>(cfg.batch_size),
                                              rng, false);
    for (const auto& batch : batches) {
      result.losses.push_back(
          detail::guarded_step("train_stage_c_classification", result.steps, [&] {
            Tape tape;
            std::vector<TensorPtr> losses;
            for (std::size_t idx : batch) {
              auto zp = bundle.qformer.forward(tape, hs[idx]);
              auto prompt = assemble_prompt(tape, bundle.lm, bundle.projector, zp, prefix_ids, {},
                                            bundle.cfg.layout);
              losses.push_back(classification_ce(tape, bundle.lm, prompt.emb, bundle.cls_head,
                                                 items[idx].label));
            }
            auto loss = mean_all(tape, stack_scalars(tape, losses));
            detail::ensure_finite(loss->values[0], "train_stage_c_classification", result.steps);
            opt.zero_grads();
            tape.backward(loss);
            opt.step();
            return loss->values[0];
          }));
      ++result.steps;
    }
    if (cfg.patience > 0 && !val_items.empty()) {
      result.val_losses.push_back(
          validation_classification_loss(bundle, val_items, prefix_ids, false));
      if (plateau.should_stop(result.val_losses.back())) {
        result.stopped_early = true;
        break;
      }
    }
  }
  guard.verify("train_stage_c_classification");
  detail::finish_run(run_dir, "c", bundle.reg, result);
  return result;
}

inline TrainResult train_stage_c_plaintext(ModelBundle& bundle,
                                           const std::vector<SyntheticItem>& items,
                                           const StageConfig& cfg,
                                           const std::string& run_dir = "",
                                           const std::vector<SyntheticItem>& val_items = {}) {
  cfg.validate();
  if (items.empty()) throw std::invalid_argument("train_stage_c_plaintext: no items");
  detail::FreezeGuard guard(bundle.reg, {"prot_enc.", "text_enc.", "qformer.", "projector."});
  Optimizer opt(trainable_params(bundle.reg, {"lm.", "cls_head."}, cfg.frozen), cfg.optim,
                cfg.learning_rate);
  Rng rng(cfg.seed);

  std::vector<std::vector<int>> prompts;
  for (const auto& item : items) prompts.push_back(plain_residue_ids(bundle.vocab, item.sequence));

  TrainResult result;
  detail::PlateauWatch plateau(cfg.patience);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto batches = detail::make_batches(items.size(), static_cast<std::size_t>(cfg.batch_size),
                                              rng, false);
    for (const auto& batch : batches) {
      result.losses.push_back(detail::guarded_step("train_stage_c_plaintext", result.steps, [&] {
        Tape tape;
        std::vector<TensorPtr> losses;
        for (std::size_t idx : batch) {
          auto emb = bundle.lm.embed(tape, prompts[idx]);
          losses.push_back(
              classification_ce(tape, bundle.lm, emb, bundle.cls_head, items[idx].label));
        }
        auto loss = mean_all(tape, stack_scalars(tape, losses));
        detail::ensure_finite(loss->values[0], "train_stage_c_plaintext", result.steps);
        opt.zero_grads();
        tape.backward(loss);
        opt.step();
        return loss->values[0];
      }));
      ++result.steps;
    }
    if (cfg.patience > 0 && !val_items.empty()) {
      result.val_losses.push_back(validation_classification_loss(bundle, val_items, {}, true));
      if (plateau.should_stop(result.val_losses.back())) {
        result.stopped_early = true;
        break;
      }
    }
  }
  guard.verify("train_stage_c_plaintext");
  detail::finish_run(run_dir, "c", bundle.reg, result);
  return result;
}

inline RetrievalResult eval_retrieval_task(const ModelBundle& bundle,
                                           const std::vector<SyntheticItem>& items,
                                           const std::vector<int>& ks) {
  if (items.size() < 2) throw std::invalid_argument("eval_retrieval_task: need at least 2 pairs");
  Tape tape;
  std::vector<TensorPtr> zps, zts;
  for (const auto& item : items) {
    zps.push_back(bundle.qformer.forward(tape, bundle.protein_states(item.sequence)));
    zts.push_back(bundle.text_enc.forward(tape, bundle.vocab.encode(item.description)));
  }
  auto sim = pairwise_similarity(tape, zps, zts, 1.0);
  return eval_retrieval(sim.s, ks);
}

inline int classify_item(const ModelBundle& bundle, const std::string& seq,
                         const std::vector<int>& prefix_ids = {}) {
  Tape tape;
  auto zp = bundle.qformer.forward(tape, bundle.protein_states(seq));
  auto prompt =
      assemble_prompt(tape, bundle.lm, bundle.projector, zp, prefix_ids, {}, bundle.cfg.layout);
  auto probs = classify(tape, bundle.lm, prompt.emb, bundle.cls_head);
  std::size_t best = 0;
  for (std::size_t c = 1; c < probs->numel(); ++c)
    if (probs->values[c] > probs->values[best]) best = c;
  return static_cast<int>(best);
}

inline int classify_item_plaintext(const ModelBundle& bundle, const std::string& seq) {
  Tape tape;
  auto emb = bundle.lm.embed(tape, plain_residue_ids(bundle.vocab, seq));
  auto probs = classify(tape, bundle.lm, emb, bundle.cls_head);
  std::size_t best = 0;
  for (std::size_t c = 1; c < probs->numel(); ++c)
    if (probs->values[c] > probs->values[best]) best = c;
  return static_cast<int>(best);
}

inline ClassificationResult eval_classification_task(const ModelBundle& bundle,
                                                     const std::vector<SyntheticItem>& items,
                                                     bool plaintext = false,
                                                     const std::vector<int>& prefix_ids = {}) {
  std::vector<int> preds, golds;
  for (const auto& item : items) {
    preds.push_back(plaintext ? classify_item_plaintext(bundle, item.sequence)
                              : classify_item(bundle, item.sequence, prefix_ids));
    golds.push_back(item.label);
  }
  return eval_classification(preds, golds);
}

inline std::string generate_description(const ModelBundle& bundle, const std::string& seq,
                                        const std::vector<int>& prefix_ids, int max_new) {
  Tape tape;
  auto zp = bundle.qformer.forward(tape, bundle.protein_states(seq));
  auto prompt =
      assemble_prompt(tape, bundle.lm, bundle.projector, zp, prefix_ids, {}, bundle.cfg.layout);
  return bundle.vocab.decode(generate(bundle.lm, prompt.emb, max_new));
}

inline double eval_generation_exact(const ModelBundle& bundle,
                                    const std::vector<SyntheticItem>& items,
                                    const std::vector<int>& prefix_ids, int max_new) {
  if (items.empty()) throw std::invalid_argument("eval_generation_exact: no items");
  std::size_t hits = 0;
  for (const auto& item : items)
    if (generate_description(bundle, item.sequence, prefix_ids, max_new) == item.description)
      ++hits;
  return static_cast<double>(hits) / static_cast<double>(items.size());
}

// Zero-shot regression readout: score each protein by its best cosine match against
// a probe description, then rank-correlate the scores with the targets.
inline double probe_cosine_score(const ModelBundle& bundle, const std::string& seq,
                                 const TensorPtr& zt) {
  auto zp = bundle.protein_latents(seq);
  const std::size_t k = zp->shape[0], d = zp->shape[1];
  if (zt->numel() != d) throw std::invalid_argument("probe_cosine_score: dim mismatch");
  double tn = 0.0;
  for (std::size_t j = 0; j < d; ++j) tn += zt->values[j] * zt->values[j];
  tn = std::sqrt(tn);
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t q = 0; q < k; ++q) {
    double dot = 0.0, pn = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double v = zp->values[q * d + j];
      dot += v * zt->values[j];
      pn += v * v;
    }
    best = std::max(best, dot / (std::sqrt(pn) * tn + 1e-12));
  }
  return best;
}

inline double eval_regression_task(const ModelBundle& bundle,
                                   const std::vector<SyntheticItem>& items,
                                   const std::string& probe =
                                       "a protein rich in hydrophobic residues") {
  if (items.size() < 3) throw std::invalid_argument("eval_regression_task: need at least 3 items");
  auto zt = bundle.text_embedding(probe);
  std::vector<double> scores, targets;
  for (const auto& item : items) {
    scores.push_back(probe_cosine_score(bundle, item.sequence, zt));
    targets.push_back(item.target);
  }
  return eval_spearman(scores, targets);
}

inline std::vector<std::string> checkpoint_diff(const ParamRegistry& a, const ParamRegistry& b) {
  std::vector<std::string> out;
  for (const auto& [name, pa] : a.params) {
    auto it = b.params.find(name);
    if (it == b.params.end() || it->second->shape != pa->shape ||
        it->second->values != pa->values) {
      out.push_back(name);
    }
  }
  for (const auto& [name, pb] : b.params)
    if (!a.params.count(name)) out.push_back(name);
  return out;
}

enum class AblationVariant { kFull, kNoPretraining, kNoAlignment };

inline const char* ablation_name(AblationVariant v) {
  switch (v) {
    case AblationVariant::kFull: return "full";
    case AblationVariant::kNoPretraining: return "no_pretraining";
    case AblationVariant::kNoAlignment: return "no_alignment";
  }
  throw std::invalid_argument("ablation_name: bad enum value");
}

inline AblationVariant ablation_from_name(const std::string& name) {
  for (auto v : {AblationVariant::kFull, AblationVariant::kNoPretraining,
                 AblationVariant::kNoAlignment})
    if (name == ablation_name(v)) return v;
  throw std::invalid_argument("ablation_from_name: unknown variant '" + name + "'");
}

struct AblationOutcome {
  AblationVariant variant = AblationVariant::kFull;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::map<std::string, double> breakdown;
};

// Every variant shares the bundle seed, the data, and the stage budgets; only
// the ablated component differs.
inline AblationOutcome run_ablation_variant(AblationVariant variant, const RunConfig& rc,
                                            const std::string& run_dir = "") {
  rc.validate();
  ModelBundle bundle(rc.model, default_text_vocab());

  SyntheticTaskSpec task = rc.task;
  if (task.family == TaskFamily::kRetrievalPairs) task.family = TaskFamily::kBinaryCls;
  auto data = generate_synthetic(task);

  if (variant != AblationVariant::kNoPretraining) {
    auto docs = generate_corpus(rc.corpus);
    auto packed = pack_corpus(docs, bundle.vocab, rc.pack_window);
    train_stage_a(bundle, packed.packs, rc.stage_a, run_dir);
  }
  if (variant != AblationVariant::kNoAlignment)
    train_stage_b(bundle, data.train, rc.stage_b, run_dir);

  AblationOutcome out;
  out.variant = variant;
  if (variant == AblationVariant::kNoAlignment) {
    train_stage_c_plaintext(bundle, data.train, rc.stage_c, run_dir);
    auto res = eval_classification_task(bundle, data.test, true);
    out.accuracy = res.accuracy;
    out.macro_f1 = res.macro_f1;
  } else {
    train_stage_c_classification(bundle, data.train, rc.stage_c, {}, run_dir);
    auto res = eval_classification_task(bundle, data.test);
    out.accuracy = res.accuracy;
    out.macro_f1 = res.macro_f1;
    auto retrieval = eval_retrieval_task(bundle, data.test, {1});
    out.breakdown["recall_at_1_p2t"] = retrieval.protein_to_text.at(1);
  }
  if (!run_dir.empty()) save_checkpoint(run_dir + "/final.ckpt", bundle.reg);
  return out;
}

inline std::vector<AblationOutcome> run_ablation(const RunConfig& rc,
                                                 const std::string& run_root = "") {
  std::vector<AblationOutcome> out;
  for (auto v : {AblationVariant::kFull, AblationVariant::kNoPretraining,
                 AblationVariant::kNoAlignment}) {
    const std::string dir = run_root.empty() ? "" : run_root + "/" + ablation_name(v);
    out.push_back(run_ablation_variant(v, rc, dir));
  }
  return out;
}

}  // namespace bb
