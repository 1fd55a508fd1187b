#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "biobridge/checkpoint.hpp"
#include "biobridge/encoder.hpp"
#include "biobridge/rng.hpp"
#include "biobridge/tensor.hpp"
#include "biobridge/vocab.hpp"

namespace bb {

struct QFormerConfig {
  int num_queries = 8;
  int depth = 2;
  int num_heads = 4;
  int model_dim = 64;
  int ff_dim = 128;
  double init_tau = 0.07;
  double tau_floor = 0.01;

  void validate() const {
    if (num_queries < 1 || depth < 1 || num_heads < 1 || model_dim < 1 || ff_dim < 1)
      throw std::invalid_argument("QFormerConfig: all sizes must be >= 1");
    if (model_dim % num_heads != 0)
      throw std::invalid_argument("QFormerConfig: model_dim not divisible by num_heads");
    if (init_tau <= 0.0 || tau_floor <= 0.0)
      throw std::invalid_argument("QFormerConfig: temperatures must be positive");
  }
};

// Latent-query transformer bridging protein embeddings to the text side.
// Each block runs self-attention over the queries (joined by text tokens
// when matching), cross-attention from queries into the protein states,
// then a feed-forward update.
class QFormer {
 public:
  QFormer(ParamRegistry& reg, const std::string& prefix, const QFormerConfig& cfg,
          std::size_t text_vocab_size, Rng& rng)
      : cfg_(cfg) {
    cfg.validate();
    const auto k = static_cast<std::size_t>(cfg.num_queries);
    const auto d = static_cast<std::size_t>(cfg.model_dim);
    query_bank_ = reg.create(prefix + ".query_bank", {k, d});
    init_normal(query_bank_, rng, 0.02);
    text_emb_ = reg.create(prefix + ".text_emb", {text_vocab_size, d});
    init_normal(text_emb_, rng, 0.02);
    for (int l = 0; l < cfg.depth; ++l) {
      const std::string bp = prefix + ".blocks." + std::to_string(l);
      blocks_.push_back(Block{
          LayerNormParams(reg, bp + ".ln_self", cfg.model_dim),
          AttentionHeads(reg, bp + ".self_attn", cfg.model_dim, cfg.num_heads, rng),
          LayerNormParams(reg, bp + ".ln_cross", cfg.model_dim),
          AttentionHeads(reg, bp + ".cross_attn", cfg.model_dim, cfg.num_heads, rng),
          LayerNormParams(reg, bp + ".ln_ffn", cfg.model_dim),
          FeedForward(reg, bp + ".ffn", cfg.model_dim, cfg.ff_dim, rng),
      });
    }
    final_ln_ = LayerNormParams(reg, prefix + ".final_ln", cfg.model_dim);
    match_w_ = reg.create(prefix + ".match_head.w", {d});
    match_b_ = reg.create(prefix + ".match_head.b", {1});
    log_tau_ = reg.create(prefix + ".log_tau", {1});
    log_tau_->values[0] = std::log(cfg.init_tau);
  }

  // Latent protein summary z^p, always [K x d] regardless of L.
  TensorPtr forward(Tape& tape, const TensorPtr& h) const {
    check_h(h);
    auto x = query_bank_;
    for (const auto& block : blocks_) {
      auto normed = block.ln_self.forward(tape, x);
      x = add(tape, x, block.self_attn.forward(tape, normed, normed));
      x = add(tape, x, block.cross_attn.forward(tape, block.ln_cross.forward(tape, x), h));
      x = add(tape, x, block.ffn.forward(tape, block.ln_ffn.forward(tape, x)));
    }
    return final_ln_.forward(tape, x);
  }

  // Query outputs after running queries and text through the shared
  // self-attention. Text rows skip cross-attention.
  TensorPtr forward_joint(Tape& tape, const TensorPtr& h, const std::vector<int>& text_ids) const {
    check_h(h);
    if (text_ids.empty()) throw std::invalid_argument("QFormer: empty text for joint pass");
    const auto k = static_cast<std::size_t>(cfg_.num_queries);
    const auto d = static_cast<std::size_t>(cfg_.model_dim);
    auto text = add(tape, embedding_rows(tape, text_emb_, text_ids),
                    sinusoidal_posenc(text_ids.size(), d));
    auto x = concat_rows(tape, {query_bank_, text});
    for (const auto& block : blocks_) {
      auto normed = block.ln_self.forward(tape, x);
      x = add(tape, x, block.self_attn.forward(tape, normed, normed));
      auto queries = slice_rows(tape, x, 0, k);
      auto rest = slice_rows(tape, x, k, text_ids.size());
      queries = add(tape, queries,
                    block.cross_attn.forward(tape, block.ln_cross.forward(tape, queries), h));
      x = concat_rows(tape, {queries, rest});
      x = add(tape, x, block.ffn.forward(tape, block.ln_ffn.forward(tape, x)));
    }
    return final_ln_.forward(tape, slice_rows(tape, x, 0, k));
  }

  // Match probability in (0,1); the zero-initialized head scores 0.5.
  TensorPtr match_prob(Tape& tape, const TensorPtr& h, const std::vector<int>& text_ids) const {
    auto pooled = mean_rows(tape, forward_joint(tape, h, text_ids));
    auto score = add(tape, sum_all(tape, mul(tape, pooled, match_w_)), match_b_);
    return sigmoid(tape, score);
  }

  // exp(log_tau) with the floor applied.
  TensorPtr tau(Tape& tape) const {
    return clampv(tape, expv(tape, log_tau_), cfg_.tau_floor, 1e9);
  }

  double tau_value() const { return std::max(std::exp(log_tau_->values[0]), cfg_.tau_floor); }

  const QFormerConfig& config() const { return cfg_; }
  const TensorPtr& query_bank() const { return query_bank_; }

 private:
  struct Block {
    LayerNormParams ln_self;
    AttentionHeads self_attn;
    LayerNormParams ln_cross;
    AttentionHeads cross_attn;
    LayerNormParams ln_ffn;
    FeedForward ffn;
  };

  void check_h(const TensorPtr& h) const {
    if (h->rank() != 2 || h->shape[0] < 1)
      throw std::invalid_argument("QFormer: protein states must be [L x d] with L >= 1");
    if (h->shape[1] != static_cast<std::size_t>(cfg_.model_dim))
      throw std::invalid_argument("QFormer: protein state dim " + std::to_string(h->shape[1]) +
                                  " does not match model_dim " + std::to_string(cfg_.model_dim));
  }

  QFormerConfig cfg_;
  TensorPtr query_bank_, text_emb_, match_w_, match_b_, log_tau_;
  std::vector<Block> blocks_;
  LayerNormParams final_ln_;
};

// S[i][j] = max over query rows of cos(z_ik^p, z_j^t), divided by tau.
struct SimilarityMatrix {
  TensorPtr s;
  TensorPtr tau;
  std::size_t batch = 0;
};

inline SimilarityMatrix pairwise_similarity(Tape& tape, const std::vector<TensorPtr>& zps,
                                            const std::vector<TensorPtr>& zts,
                                            const TensorPtr& tau) {
  if (zps.size() != zts.size())
    throw std::invalid_argument("pairwise_similarity: batch sizes differ: " +
                                std::to_string(zps.size()) + " vs " + std::to_string(zts.size()));
  if (zps.empty()) throw std::invalid_argument("pairwise_similarity: empty batch");
  if (tau->numel() != 1 || tau->values[0] <= 0.0)
    throw std::invalid_argument("pairwise_similarity: tau must be a positive scalar");
  const std::size_t b = zps.size();
  std::vector<TensorPtr> entries;
  entries.reserve(b * b);
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t k = zps[i]->shape[0];
    for (std::size_t j = 0; j < b; ++j) {
      std::vector<TensorPtr> per_query;
      per_query.reserve(k);
      for (std::size_t q = 0; q < k; ++q)
        per_query.push_back(cosine_sim(tape, slice_rows(tape, zps[i], q, 1), zts[j]));
      entries.push_back(maxv(tape, stack_scalars(tape, per_query)));
    }
  }
  auto flat = stack_scalars(tape, entries);
  auto scaled = scale_by(tape, reshape(tape, flat, {b, b}), recip(tape, tau));
  return SimilarityMatrix{scaled, tau, b};
}

inline SimilarityMatrix pairwise_similarity(Tape& tape, const std::vector<TensorPtr>& zps,
                                            const std::vector<TensorPtr>& zts, double tau) {
  return pairwise_similarity(tape, zps, zts, make_scalar(tau));
}

// Symmetric InfoNCE over the similarity matrix: mean diagonal log-softmax
// across rows plus across columns, negated.
inline TensorPtr ptc_loss(Tape& tape, const SimilarityMatrix& sim) {
  const std::size_t b = sim.batch;
  std::vector<std::pair<std::size_t, std::size_t>> diag;
  diag.reserve(b);
  for (std::size_t i = 0; i < b; ++i) diag.emplace_back(i, i);
  auto p2t = sum_all(tape, select_entries(tape, log_softmax_lastdim(tape, sim.s), diag));
  auto t2p = sum_all(
      tape, select_entries(tape, log_softmax_lastdim(tape, transpose(tape, sim.s)), diag));
  return scale(tape, add(tape, p2t, t2p), -1.0 / static_cast<double>(b));
}

// For each pair i: one wrong text index and one wrong protein index, drawn
// uniformly from the rest of the batch.
struct NegativeIndices {
  std::vector<std::size_t> text_from;
  std::vector<std::size_t> prot_from;
};

inline NegativeIndices construct_negatives(std::size_t batch, Rng& rng) {
  if (batch < 2)
    throw std::invalid_argument("construct_negatives: need at least 2 pairs, got " +
                                std::to_string(batch));
  NegativeIndices out;
  out.text_from.resize(batch);
  out.prot_from.resize(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    const auto draw = [&] {
      auto j = static_cast<std::size_t>(rng.below(batch - 1));
      return j >= i ? j + 1 : j;
    };
    out.text_from[i] = draw();
    out.prot_from[i] = draw();
  }
  return out;
}

enum class PtmForm { kBce, kVerbatim };

// Matching loss over positives plus the constructed negatives. The default
// is the matched/unmatched cross-entropy; kVerbatim keeps the raw
// log-probability sum with clamping.
inline TensorPtr ptm_loss(Tape& tape, const QFormer& qf, const std::vector<TensorPtr>& hs,
                          const std::vector<std::vector<int>>& texts, const NegativeIndices& negs,
                          PtmForm form = PtmForm::kBce) {
  const std::size_t b = hs.size();
  if (texts.size() != b) throw std::invalid_argument("ptm_loss: batch sizes differ");
  if (negs.text_from.size() != b || negs.prot_from.size() != b)
    throw std::invalid_argument("ptm_loss: negatives do not cover the batch");
  const double lo = 1e-7, hi = 1.0 - 1e-7;
  std::vector<TensorPtr> terms;
  terms.reserve(3 * b);
  auto log_clamped = [&](const TensorPtr& p) { return logv(tape, clampv(tape, p, lo, hi)); };
  for (std::size_t i = 0; i < b; ++i) {
    auto pos = qf.match_prob(tape, hs[i], texts[i]);
    auto neg_text = qf.match_prob(tape, hs[i], texts[negs.text_from[i]]);
    auto neg_prot = qf.match_prob(tape, hs[negs.prot_from[i]], texts[i]);
    if (form == PtmForm::kBce) {
      auto one = make_scalar(1.0);
      terms.push_back(log_clamped(pos));
      terms.push_back(log_clamped(sub(tape, one, neg_text)));
      terms.push_back(log_clamped(sub(tape, one, neg_prot)));
    } else {
      terms.push_back(log_clamped(neg_prot));
      terms.push_back(log_clamped(neg_text));
      terms.push_back(scale(tape, log_clamped(pos), -1.0));
    }
  }
  auto total = sum_all(tape, stack_scalars(tape, terms));
  const double norm = form == PtmForm::kBce ? -1.0 / (3.0 * static_cast<double>(b))
                                            : 1.0 / static_cast<double>(b);
  return scale(tape, total, norm);
}

}  // namespace bb
