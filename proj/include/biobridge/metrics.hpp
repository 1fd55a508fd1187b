#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "biobridge/tensor.hpp"

namespace bb {

struct ClassificationResult {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
};

inline ClassificationResult eval_classification(const std::vector<int>& preds,
                                                const std::vector<int>& golds) {
  if (preds.size() != golds.size())
    throw std::invalid_argument("eval_classification: " + std::to_string(preds.size()) +
                                " predictions vs " + std::to_string(golds.size()) + " golds");
  if (preds.empty()) throw std::invalid_argument("eval_classification: empty input");

  std::size_t correct = 0;
  std::set<int> classes;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] == golds[i]) ++correct;
    classes.insert(preds[i]);
    classes.insert(golds[i]);
  }

  double f1_sum = 0.0;
  for (int c : classes) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const bool p = preds[i] == c;
      const bool g = golds[i] == c;
      if (p && g) ++tp;
      if (p && !g) ++fp;
      if (!p && g) ++fn;
    }
    const double denom = static_cast<double>(2 * tp + fp + fn);
    f1_sum += denom == 0.0 ? 0.0 : 2.0 * static_cast<double>(tp) / denom;
  }

  ClassificationResult out;
  out.accuracy = static_cast<double>(correct) / static_cast<double>(preds.size());
  out.macro_f1 = f1_sum / static_cast<double>(classes.size());
  return out;
}

// Average ranks: tied values share the mean of the positions they span.
inline std::vector<double> average_ranks(const std::vector<double>& xs) {
  const std::size_t n = xs.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && xs[order[j + 1]] == xs[order[i]]) ++j;
    const double shared = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = shared;
    i = j + 1;
  }
  return ranks;
}

inline double eval_spearman(const std::vector<double>& preds, const std::vector<double>& golds) {
  if (preds.size() != golds.size())
    throw std::invalid_argument("eval_spearman: " + std::to_string(preds.size()) +
                                " predictions vs " + std::to_string(golds.size()) + " golds");
  if (preds.size() < 2) throw std::invalid_argument("eval_spearman: need at least 2 items");
  for (double v : preds)
    if (!std::isfinite(v)) throw std::domain_error("eval_spearman: non-finite prediction");
  for (double v : golds)
    if (!std::isfinite(v)) throw std::domain_error("eval_spearman: non-finite gold");

  const auto ra = average_ranks(preds);
  const auto rb = average_ranks(golds);
  const auto n = static_cast<double>(preds.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double da = ra[i] - ma;
    const double db = rb[i] - mb;
    cov += da * db;
    va += da * da;
    vb += db * db;
  }
  if (va == 0.0 || vb == 0.0)
    throw std::invalid_argument("eval_spearman: zero rank variance, correlation undefined");
  return cov / std::sqrt(va * vb);
}

struct RetrievalResult {
  std::map<int, double> protein_to_text;
  std::map<int, double> text_to_protein;
};

// S holds similarity[i][j] between protein i and text j; the true match is the
// diagonal. Ties rank the lower column index first, so results are exact under
// reruns.
inline RetrievalResult eval_retrieval(const TensorPtr& sim, const std::vector<int>& ks) {
  if (sim->shape.size() != 2 || sim->shape[0] != sim->shape[1])
    throw std::invalid_argument("eval_retrieval: similarity must be square, got " +
                                shape_str(sim->shape));
  const std::size_t n = sim->shape[0];
  if (n < 2) throw std::invalid_argument("eval_retrieval: need at least 2 pairs");
  for (int k : ks)
    if (k < 1 || static_cast<std::size_t>(k) > n)
      throw std::invalid_argument("eval_retrieval: k = " + std::to_string(k) +
                                  " out of range for " + std::to_string(n) + " pairs");

  auto rank_of_true = [&](bool by_row) {
    std::vector<std::size_t> rank(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double truth = sim->at(i, i);
      std::size_t ahead = 0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        const double v = by_row ? sim->at(i, j) : sim->at(j, i);
        if (v > truth || (v == truth && j < i)) ++ahead;
      }
      rank[i] = ahead;
    }
    return rank;
  };

  RetrievalResult out;
  const auto row_rank = rank_of_true(true);
  const auto col_rank = rank_of_true(false);
  for (int k : ks) {
    std::size_t hit_rows = 0, hit_cols = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (row_rank[i] < static_cast<std::size_t>(k)) ++hit_rows;
      if (col_rank[i] < static_cast<std::size_t>(k)) ++hit_cols;
    }
    out.protein_to_text[k] = static_cast<double>(hit_rows) / static_cast<double>(n);
    out.text_to_protein[k] = static_cast<double>(hit_cols) / static_cast<double>(n);
  }
  return out;
}

struct MetricReport {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double spearman = 0.0;
  RetrievalResult retrieval;
  std::map<std::string, double> breakdown;
};

}  // namespace bb
