#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "biobridge/checkpoint.hpp"
#include "biobridge/rng.hpp"
#include "biobridge/tensor.hpp"
#include "biobridge/vocab.hpp"

namespace bb {

struct EncoderConfig {
  int num_layers = 2;
  int num_heads = 4;
  int model_dim = 64;
  int ff_dim = 128;
  int max_len = 512;

  void validate() const {
    if (num_layers < 1 || num_heads < 1 || model_dim < 1 || ff_dim < 1 || max_len < 1)
      throw std::invalid_argument("EncoderConfig: all fields must be >= 1");
    if (model_dim % num_heads != 0)
      throw std::invalid_argument("EncoderConfig: model_dim " + std::to_string(model_dim) +
                                  " not divisible by num_heads " + std::to_string(num_heads));
  }
};

inline constexpr double kInitStd = 0.02;

inline void init_normal(const TensorPtr& t, Rng& rng, double stddev) {
  for (auto& v : t->values) v = rng.normal(0.0, stddev);
}

// Weight matrices scale with fan-in; a fixed small stddev leaves attention and
// feed-forward paths nearly decoupled at narrow widths and training crawls.
inline void init_fan_in(const TensorPtr& t, Rng& rng) {
  init_normal(t, rng, 1.0 / std::sqrt(static_cast<double>(t->shape[0])));
}

// Scaled to the embedding init scale; a unit-amplitude table drowns out token
// identity at small dims and contrastive training stalls on near-identical
// pooled vectors.
inline TensorPtr sinusoidal_posenc(std::size_t len, std::size_t dim) {
  auto pe = make_tensor({len, dim});
  for (std::size_t pos = 0; pos < len; ++pos)
    for (std::size_t i = 0; 2 * i < dim; ++i) {
      const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
      const double angle = static_cast<double>(pos) * freq;
      pe->at(pos, 2 * i) = kInitStd * std::sin(angle);
      if (2 * i + 1 < dim) pe->at(pos, 2 * i + 1) = kInitStd * std::cos(angle);
    }
  return pe;
}

// Positions counted from the start in the lower dims and from the end in the
// upper dims, so both termini carry a length-independent signature a query can
// key on.
inline TensorPtr bidirectional_posenc(std::size_t len, std::size_t dim) {
  auto fwd = sinusoidal_posenc(len, dim);
  auto pe = make_tensor({len, dim});
  const std::size_t half = dim / 2;
  for (std::size_t pos = 0; pos < len; ++pos) {
    for (std::size_t j = 0; j < half; ++j) pe->at(pos, j) = fwd->at(pos, j);
    for (std::size_t j = half; j < dim; ++j) pe->at(pos, j) = fwd->at(len - 1 - pos, j);
  }
  return pe;
}

inline TensorPtr linear(Tape& tape, const TensorPtr& x, const TensorPtr& w, const TensorPtr& b) {
  return add_rowvec(tape, matmul(tape, x, w), b);
}

// Multi-head attention with separate query and key/value sources, so the
// same weights serve self- and cross-attention.
struct AttentionHeads {
  int heads = 1;
  TensorPtr wq, bq, wk, bk, wv, bv, wo, bo;

  AttentionHeads() = default;
  AttentionHeads(ParamRegistry& reg, const std::string& prefix, int model_dim, int num_heads,
                 Rng& rng)
      : heads(num_heads) {
    const auto d = static_cast<std::size_t>(model_dim);
    wq = reg.create(prefix + ".wq", {d, d});
    bq = reg.create(prefix + ".bq", {d});
    wk = reg.create(prefix + ".wk", {d, d});
    bk = reg.create(prefix + ".bk", {d});
    wv = reg.create(prefix + ".wv", {d, d});
    bv = reg.create(prefix + ".bv", {d});
    wo = reg.create(prefix + ".wo", {d, d});
    bo = reg.create(prefix + ".bo", {d});
    for (const auto& w : {wq, wk, wv, wo}) init_fan_in(w, rng);
  }

  TensorPtr forward(Tape& tape, const TensorPtr& q_src, const TensorPtr& kv_src,
                    const std::vector<std::uint8_t>* mask = nullptr) const {
    const std::size_t d = wq->shape[0];
    const std::size_t dh = d / static_cast<std::size_t>(heads);
    auto q = linear(tape, q_src, wq, bq);
    auto k = linear(tape, kv_src, wk, bk);
    auto v = linear(tape, kv_src, wv, bv);
    std::vector<TensorPtr> outs;
    outs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      const std::size_t c0 = static_cast<std::size_t>(h) * dh;
      outs.push_back(attention(tape, slice_cols(tape, q, c0, dh), slice_cols(tape, k, c0, dh),
                               slice_cols(tape, v, c0, dh), mask));
    }
    return linear(tape, concat_cols(tape, outs), wo, bo);
  }
};

struct FeedForward {
  TensorPtr w1, b1, w2, b2;

  FeedForward() = default;
  FeedForward(ParamRegistry& reg, const std::string& prefix, int model_dim, int ff_dim, Rng& rng) {
    const auto d = static_cast<std::size_t>(model_dim);
    const auto f = static_cast<std::size_t>(ff_dim);
    w1 = reg.create(prefix + ".w1", {d, f});
    b1 = reg.create(prefix + ".b1", {f});
    w2 = reg.create(prefix + ".w2", {f, d});
    b2 = reg.create(prefix + ".b2", {d});
    init_fan_in(w1, rng);
    init_fan_in(w2, rng);
  }

  TensorPtr forward(Tape& tape, const TensorPtr& x) const {
    return linear(tape, gelu(tape, linear(tape, x, w1, b1)), w2, b2);
  }
};

struct LayerNormParams {
  TensorPtr gain, bias;

  LayerNormParams() = default;
  LayerNormParams(ParamRegistry& reg, const std::string& prefix, int model_dim) {
    gain = reg.create(prefix + ".gain", {static_cast<std::size_t>(model_dim)});
    bias = reg.create(prefix + ".bias", {static_cast<std::size_t>(model_dim)});
    std::fill(gain->values.begin(), gain->values.end(), 1.0);
  }

  TensorPtr forward(Tape& tape, const TensorPtr& x) const {
    return layer_norm(tape, x, gain, bias, 1e-5);
  }
};

// Pre-norm transformer block: x += attn(ln1(x)); x += ffn(ln2(x)).
struct TransformerBlock {
  LayerNormParams ln1, ln2;
  AttentionHeads attn;
  FeedForward ffn;

  TransformerBlock() = default;
  TransformerBlock(ParamRegistry& reg, const std::string& prefix, const EncoderConfig& cfg,
                   Rng& rng)
      : ln1(reg, prefix + ".ln1", cfg.model_dim),
        ln2(reg, prefix + ".ln2", cfg.model_dim),
        attn(reg, prefix + ".attn", cfg.model_dim, cfg.num_heads, rng),
        ffn(reg, prefix + ".ffn", cfg.model_dim, cfg.ff_dim, rng) {}

  TensorPtr forward(Tape& tape, const TensorPtr& x,
                    const std::vector<std::uint8_t>* mask = nullptr) const {
    auto normed = ln1.forward(tape, x);
    auto after_attn = add(tape, x, attn.forward(tape, normed, normed, mask));
    return add(tape, after_attn, ffn.forward(tape, ln2.forward(tape, after_attn)));
  }
};

// Residue-level contextual encoder. Randomly initialized, then frozen for
// alignment so its representations stay fixed.
class ProteinEncoder {
 public:
  ProteinEncoder(ParamRegistry& reg, const std::string& prefix, const EncoderConfig& cfg, Rng& rng)
      : cfg_(cfg), prefix_(prefix) {
    cfg.validate();
    embedding_ = reg.create(prefix + ".embedding",
                            {ProteinVocab::kSize, static_cast<std::size_t>(cfg.model_dim)});
    init_normal(embedding_, rng, 0.02);
    for (int l = 0; l < cfg.num_layers; ++l)
      blocks_.emplace_back(reg, prefix + ".layers." + std::to_string(l), cfg, rng);
    final_ln_ = LayerNormParams(reg, prefix + ".final_ln", cfg.model_dim);
    registered_ = reg.with_prefix(prefix + ".");
  }

  // One contextual embedding per residue, in input order.
  TensorPtr forward(Tape& tape, const std::vector<int>& ids) const {
    if (ids.empty()) throw std::invalid_argument("ProteinEncoder: empty input");
    if (ids.size() > static_cast<std::size_t>(cfg_.max_len))
      throw std::invalid_argument("ProteinEncoder: input length " + std::to_string(ids.size()) +
                                  " exceeds max_len " + std::to_string(cfg_.max_len));
    auto x = add(tape, embedding_rows(tape, embedding_, ids),
                 bidirectional_posenc(ids.size(), static_cast<std::size_t>(cfg_.model_dim)));
    for (const auto& block : blocks_) x = block.forward(tape, x);
    return final_ln_.forward(tape, x);
  }

  void freeze() {
    frozen_ = true;
    for (auto& [name, t] : registered_) t->requires_grad = false;
  }

  bool frozen() const { return frozen_; }
  const EncoderConfig& config() const { return cfg_; }
  const std::string& prefix() const { return prefix_; }

 private:
  EncoderConfig cfg_;
  std::string prefix_;
  TensorPtr embedding_;
  std::vector<TransformerBlock> blocks_;
  LayerNormParams final_ln_;
  std::vector<std::pair<std::string, TensorPtr>> registered_;
  bool frozen_ = false;
};

// Text encoder pooled at an internally prepended CLS position.
class TextEncoder {
 public:
  TextEncoder(ParamRegistry& reg, const std::string& prefix, const EncoderConfig& cfg,
              std::size_t vocab_size, Rng& rng)
      : cfg_(cfg) {
    cfg.validate();
    embedding_ =
        reg.create(prefix + ".embedding", {vocab_size, static_cast<std::size_t>(cfg.model_dim)});
    init_normal(embedding_, rng, 0.02);
    for (int l = 0; l < cfg.num_layers; ++l)
      blocks_.emplace_back(reg, prefix + ".layers." + std::to_string(l), cfg, rng);
    final_ln_ = LayerNormParams(reg, prefix + ".final_ln", cfg.model_dim);
  }

  // Final-layer CLS representation, shape [d].
  TensorPtr forward(Tape& tape, const std::vector<int>& ids) const {
    if (ids.empty()) throw std::invalid_argument("TextEncoder: empty input");
    auto hidden = forward_all(tape, ids);
    auto cls = slice_rows(tape, hidden, 0, 1);
    auto flat = make_tensor({static_cast<std::size_t>(cfg_.model_dim)});
    flat->values = cls->values;
    return detail::finish(tape, flat, {cls}, [cls, flat] {
      for (std::size_t i = 0; i < flat->numel(); ++i) cls->adj[i] += flat->adj[i];
    });
  }

  // All positions including the CLS row, shape [(1+L) x d].
  TensorPtr forward_all(Tape& tape, const std::vector<int>& ids) const {
    if (ids.empty()) throw std::invalid_argument("TextEncoder: empty input");
    if (ids.size() + 1 > static_cast<std::size_t>(cfg_.max_len))
      throw std::invalid_argument("TextEncoder: input length " + std::to_string(ids.size()) +
                                  " plus CLS exceeds max_len " + std::to_string(cfg_.max_len));
    std::vector<int> with_cls;
    with_cls.reserve(ids.size() + 1);
    with_cls.push_back(TextVocab::kCls);
    with_cls.insert(with_cls.end(), ids.begin(), ids.end());
    auto x = add(tape, embedding_rows(tape, embedding_, with_cls),
                 sinusoidal_posenc(with_cls.size(), static_cast<std::size_t>(cfg_.model_dim)));
    for (const auto& block : blocks_) x = block.forward(tape, x);
    return final_ln_.forward(tape, x);
  }

  const EncoderConfig& config() const { return cfg_; }

 private:
  EncoderConfig cfg_;
  TensorPtr embedding_;
  std::vector<TransformerBlock> blocks_;
  LayerNormParams final_ln_;
};

}  // namespace bb
