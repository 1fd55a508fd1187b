#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "biobridge/checkpoint.hpp"
#include "biobridge/encoder.hpp"
#include "biobridge/rng.hpp"
#include "biobridge/tensor.hpp"
#include "biobridge/vocab.hpp"

namespace bb {

inline EncoderConfig default_lm_config() {
  EncoderConfig cfg;
  cfg.num_layers = 2;
  cfg.num_heads = 4;
  cfg.model_dim = 128;
  cfg.ff_dim = 256;
  cfg.max_len = 512;
  return cfg;
}

// Row-wise affine map from query space into the LM's hidden space.
class Projector {
 public:
  Projector(ParamRegistry& reg, const std::string& prefix, int in_dim, int out_dim, Rng& rng)
      : in_dim_(in_dim) {
    if (in_dim < 1 || out_dim < 1) throw std::invalid_argument("Projector: dims must be >= 1");
    w_ = reg.create(prefix + ".w",
                    {static_cast<std::size_t>(in_dim), static_cast<std::size_t>(out_dim)});
    b_ = reg.create(prefix + ".b", {static_cast<std::size_t>(out_dim)});
    init_normal(w_, rng, 0.02);
  }

  TensorPtr forward(Tape& tape, const TensorPtr& z) const {
    if (z->rank() != 2 || z->shape[1] != static_cast<std::size_t>(in_dim_))
      throw std::invalid_argument("Projector: input " + shape_str(z->shape) +
                                  " does not match weight " + shape_str(w_->shape));
    return linear(tape, z, w_, b_);
  }

  const TensorPtr& weight() const { return w_; }
  const TensorPtr& bias() const { return b_; }

 private:
  int in_dim_;
  TensorPtr w_, b_;
};

// Decoder-only transformer over embedded inputs, so text tokens and
// projected protein vectors share one sequence. Output head is tied to the
// input embedding table.
class CausalLM {
 public:
  CausalLM(ParamRegistry& reg, const std::string& prefix, const EncoderConfig& cfg,
           std::size_t vocab_size, Rng& rng)
      : cfg_(cfg), vocab_size_(vocab_size) {
    cfg.validate();
    const auto d = static_cast<std::size_t>(cfg.model_dim);
    embedding_ = reg.create(prefix + ".embedding", {vocab_size, d});
    init_normal(embedding_, rng, 0.02);
    for (std::size_t j = 0; j < d; ++j) {
      double mean = 0.0;
      for (std::size_t v = 0; v < vocab_size; ++v) {
        if (v == TextVocab::kProtOpen || v == TextVocab::kProtClose) continue;
        mean += embedding_->at(v, j);
      }
      mean /= static_cast<double>(vocab_size - 2);
      embedding_->at(TextVocab::kProtOpen, j) = mean;
      embedding_->at(TextVocab::kProtClose, j) = mean;
    }
    for (int l = 0; l < cfg.num_layers; ++l)
      blocks_.emplace_back(reg, prefix + ".layers." + std::to_string(l), cfg, rng);
    final_ln_ = LayerNormParams(reg, prefix + ".final_ln", cfg.model_dim);
  }

  TensorPtr embed(Tape& tape, const std::vector<int>& ids) const {
    for (int id : ids)
      if (id < 0 || static_cast<std::size_t>(id) >= vocab_size_)
        throw std::invalid_argument("CausalLM: token id " + std::to_string(id) +
                                    " outside vocabulary of " + std::to_string(vocab_size_));
    return embedding_rows(tape, embedding_, ids);
  }

  // Hidden states under a causal mask; row t sees rows 0..t only.
  TensorPtr forward_hidden(Tape& tape, const TensorPtr& emb) const {
    if (emb->rank() != 2 || emb->shape[1] != static_cast<std::size_t>(cfg_.model_dim))
      throw std::invalid_argument("CausalLM: embedded input must be [T x " +
                                  std::to_string(cfg_.model_dim) + "], got " +
                                  shape_str(emb->shape));
    const std::size_t len = emb->shape[0];
    if (len < 1) throw std::invalid_argument("CausalLM: empty input");
    if (len > static_cast<std::size_t>(cfg_.max_len))
      throw std::invalid_argument("CausalLM: length " + std::to_string(len) + " exceeds max_len " +
                                  std::to_string(cfg_.max_len));
    std::vector<std::uint8_t> causal(len * len, 0);
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t j = 0; j <= i; ++j) causal[i * len + j] = 1;
    auto x = add(tape, emb, sinusoidal_posenc(len, static_cast<std::size_t>(cfg_.model_dim)));
    for (const auto& block : blocks_) x = block.forward(tape, x, &causal);
    return final_ln_.forward(tape, x);
  }

  TensorPtr logits(Tape& tape, const TensorPtr& hidden) const {
    return matmul(tape, hidden, transpose(tape, embedding_));
  }

  const EncoderConfig& config() const { return cfg_; }
  std::size_t vocab_size() const { return vocab_size_; }
  const TensorPtr& embedding() const { return embedding_; }

 private:
  EncoderConfig cfg_;
  std::size_t vocab_size_;
  TensorPtr embedding_;
  std::vector<TransformerBlock> blocks_;
  LayerNormParams final_ln_;
};

enum class PromptLayout { kDelimited, kPrefix };

// Embedded multi-modal prompt; protein vectors sit at
// [prot_start, prot_start + K) and are wrapped by the delimiter tokens.
struct AssembledPrompt {
  TensorPtr emb;
  std::size_t prot_start = 0;
  std::size_t num_protein = 0;
};

inline AssembledPrompt assemble_prompt(Tape& tape, const CausalLM& lm, const Projector& proj,
                                       const TensorPtr& zp, const std::vector<int>& prefix,
                                       const std::vector<int>& suffix,
                                       PromptLayout layout = PromptLayout::kDelimited) {
  if (zp->rank() != 2 || zp->shape[0] < 1)
    throw std::invalid_argument("assemble_prompt: need at least one latent vector");
  if (lm.vocab_size() <= static_cast<std::size_t>(TextVocab::kProtClose))
    throw std::invalid_argument("assemble_prompt: vocabulary lacks the protein delimiters");
  auto projected = proj.forward(tape, zp);
  auto open = lm.embed(tape, {TextVocab::kProtOpen});
  auto close = lm.embed(tape, {TextVocab::kProtClose});
  std::vector<TensorPtr> parts;
  std::size_t prot_start = 0;
  if (layout == PromptLayout::kDelimited) {
    if (!prefix.empty()) parts.push_back(lm.embed(tape, prefix));
    parts.push_back(open);
    parts.push_back(projected);
    parts.push_back(close);
    if (!suffix.empty()) parts.push_back(lm.embed(tape, suffix));
    prot_start = prefix.size() + 1;
  } else {
    parts.push_back(open);
    parts.push_back(projected);
    parts.push_back(close);
    if (!prefix.empty()) parts.push_back(lm.embed(tape, prefix));
    if (!suffix.empty()) parts.push_back(lm.embed(tape, suffix));
    prot_start = 1;
  }
  return AssembledPrompt{concat_rows(tape, parts), prot_start, zp->shape[0]};
}

// Mean cross-entropy of the tokens at masked-in positions, each predicted
// from the previous position's logits. Labels at masked-out positions are
// ignored entirely.
inline TensorPtr next_token_ce(Tape& tape, const TensorPtr& logits, const std::vector<int>& labels,
                               const std::vector<std::uint8_t>& mask) {
  const std::size_t len = logits->shape[0];
  if (labels.size() != len || mask.size() != len)
    throw std::invalid_argument("next_token_ce: labels/mask must cover all positions");
  if (len > 0 && mask[0])
    throw std::invalid_argument("next_token_ce: position 0 has no preceding context");
  std::vector<std::pair<std::size_t, std::size_t>> picks;
  for (std::size_t t = 0; t < len; ++t) {
    if (!mask[t]) continue;
    if (labels[t] < 0 || static_cast<std::size_t>(labels[t]) >= logits->shape[1])
      throw std::invalid_argument("next_token_ce: label out of vocabulary at position " +
                                  std::to_string(t));
    picks.emplace_back(t - 1, static_cast<std::size_t>(labels[t]));
  }
  if (picks.empty()) throw std::invalid_argument("next_token_ce: no target positions");
  auto log_probs = log_softmax_lastdim(tape, logits);
  auto picked = select_entries(tape, log_probs, picks);
  return scale(tape, mean_all(tape, picked), -1.0);
}

inline TensorPtr masked_next_token_loss(Tape& tape, const CausalLM& lm, const TensorPtr& full_emb,
                                        const std::vector<int>& labels,
                                        const std::vector<std::uint8_t>& mask) {
  return next_token_ce(tape, lm.logits(tape, lm.forward_hidden(tape, full_emb)), labels, mask);
}

// Cross-entropy averaged over the target tokens only; the prompt (text,
// delimiters, and protein vectors) provides context without loss terms.
inline TensorPtr lm_loss(Tape& tape, const CausalLM& lm, const TensorPtr& prompt_emb,
                         const std::vector<int>& target) {
  if (target.empty()) throw std::invalid_argument("lm_loss: empty target");
  auto full = concat_rows(tape, {prompt_emb, lm.embed(tape, target)});
  const std::size_t prompt_len = prompt_emb->shape[0];
  std::vector<int> labels(full->shape[0], 0);
  std::vector<std::uint8_t> mask(full->shape[0], 0);
  for (std::size_t j = 0; j < target.size(); ++j) {
    labels[prompt_len + j] = target[j];
    mask[prompt_len + j] = 1;
  }
  return masked_next_token_loss(tape, lm, full, labels, mask);
}

// Greedy decoding from an embedded prompt; stops before emitting EOS.
inline std::vector<int> generate(const CausalLM& lm, const TensorPtr& prompt_emb, int max_new,
                                 int eos_id = TextVocab::kEos) {
  if (max_new < 1) throw std::invalid_argument("generate: max_new must be >= 1");
  auto seq = make_tensor(prompt_emb->shape);
  seq->values = prompt_emb->values;
  std::vector<int> out;
  for (int step = 0; step < max_new; ++step) {
    Tape tape;
    auto logits = lm.logits(tape, lm.forward_hidden(tape, seq));
    const std::size_t last = logits->shape[0] - 1;
    std::size_t best = 0;
    for (std::size_t v = 1; v < logits->shape[1]; ++v)
      if (logits->at(last, v) > logits->at(last, best)) best = v;
    if (static_cast<int>(best) == eos_id) break;
    out.push_back(static_cast<int>(best));
    auto grown = make_tensor({seq->shape[0] + 1, seq->shape[1]});
    std::copy(seq->values.begin(), seq->values.end(), grown->values.begin());
    Tape scratch;
    auto row = lm.embed(scratch, {static_cast<int>(best)});
    std::copy(row->values.begin(), row->values.end(),
              grown->values.begin() + static_cast<std::ptrdiff_t>(seq->numel()));
    seq = grown;
  }
  return out;
}

class ClassificationHead {
 public:
  ClassificationHead(ParamRegistry& reg, const std::string& prefix, int hidden_dim,
                     int num_classes, Rng& rng)
      : num_classes_(num_classes) {
    if (num_classes < 2)
      throw std::invalid_argument("ClassificationHead: need at least 2 classes");
    w_ = reg.create(prefix + ".w",
                    {static_cast<std::size_t>(hidden_dim), static_cast<std::size_t>(num_classes)});
    b_ = reg.create(prefix + ".b", {static_cast<std::size_t>(num_classes)});
    init_normal(w_, rng, 0.02);
  }

  int num_classes() const { return num_classes_; }
  const TensorPtr& weight() const { return w_; }
  const TensorPtr& bias() const { return b_; }

 private:
  int num_classes_;
  TensorPtr w_, b_;
};

// Softmax class probabilities read from the final position's hidden state.
inline TensorPtr classify(Tape& tape, const CausalLM& lm, const TensorPtr& prompt_emb,
                          const ClassificationHead& head) {
  auto hidden = lm.forward_hidden(tape, prompt_emb);
  auto last = slice_rows(tape, hidden, hidden->shape[0] - 1, 1);
  auto class_logits = linear(tape, last, head.weight(), head.bias());
  return reshape(tape, softmax_lastdim(tape, class_logits),
                 {static_cast<std::size_t>(head.num_classes())});
}

inline TensorPtr classification_ce(Tape& tape, const CausalLM& lm, const TensorPtr& prompt_emb,
                                   const ClassificationHead& head, int label) {
  if (label < 0 || label >= head.num_classes())
    throw std::invalid_argument("classification_ce: label " + std::to_string(label) +
                                " outside " + std::to_string(head.num_classes()) + " classes");
  auto hidden = lm.forward_hidden(tape, prompt_emb);
  auto last = slice_rows(tape, hidden, hidden->shape[0] - 1, 1);
  auto lsm = log_softmax_lastdim(tape, linear(tape, last, head.weight(), head.bias()));
  auto picked = select_entries(tape, lsm, {{0, static_cast<std::size_t>(label)}});
  return scale(tape, sum_all(tape, picked), -1.0);
}

}  // namespace bb
