#pragma once

#include <array>
#include <cstddef>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "biobridge/corpus.hpp"
#include "biobridge/rng.hpp"
#include "biobridge/vocab.hpp"

namespace bb {

inline constexpr std::size_t kNumResidueClasses = 4;
inline constexpr std::array<const char*, kNumResidueClasses> kClassResidues = {
    "AVLIMFWPG", "STCYNQ", "KRH", "DE"};
inline constexpr std::array<const char*, kNumResidueClasses> kClassWords = {
    "hydrophobic", "polar", "basic", "acidic"};
inline constexpr std::array<const char*, 4> kBucketWords = {"tiny", "short", "medium", "long"};

// Indexed like ProteinVocab::kCanonical ("ACDEFGHIKLMNPQRSTVWY").
inline constexpr std::array<const char*, 20> kResidueNames = {
    "alanine",    "cysteine",   "aspartate", "glutamate",  "phenylalanine",
    "glycine",    "histidine",  "isoleucine", "lysine",     "leucine",
    "methionine", "asparagine", "proline",   "glutamine",  "arginine",
    "serine",     "threonine",  "valine",    "tryptophan", "tyrosine"};

inline std::size_t residue_class(char c) {
  for (std::size_t k = 0; k < kNumResidueClasses; ++k)
    if (std::string(kClassResidues[k]).find(c) != std::string::npos) return k;
  throw std::invalid_argument("residue_class: non-canonical residue '" + std::string(1, c) + "'");
}

inline std::array<std::size_t, kNumResidueClasses> class_counts(const std::string& seq) {
  std::array<std::size_t, kNumResidueClasses> counts{};
  for (char c : seq) counts[residue_class(c)] += 1;
  return counts;
}

// Lowest class index wins ties; generators enforce a strict margin anyway.
inline std::size_t dominant_class(const std::string& seq) {
  if (seq.empty()) throw std::invalid_argument("dominant_class: empty sequence");
  const auto counts = class_counts(seq);
  std::size_t best = 0;
  for (std::size_t k = 1; k < kNumResidueClasses; ++k)
    if (counts[k] > counts[best]) best = k;
  return best;
}

inline double hydrophobic_fraction(const std::string& seq) {
  if (seq.empty()) throw std::invalid_argument("hydrophobic_fraction: empty sequence");
  return static_cast<double>(class_counts(seq)[0]) / static_cast<double>(seq.size());
}

inline std::size_t length_bucket(std::size_t len) {
  if (len < 20) return 0;
  if (len < 30) return 1;
  if (len < 40) return 2;
  return 3;
}

inline std::string residue_name(char c) {
  const auto pos = std::string(ProteinVocab::kCanonical).find(c);
  if (pos == std::string::npos)
    throw std::invalid_argument("residue_name: non-canonical residue '" + std::string(1, c) + "'");
  return kResidueNames[pos];
}

// Every slot is recomputable from the sequence alone, so a description can be
// checked against its protein exactly.
inline std::string describe(const std::string& seq) {
  if (seq.empty()) throw std::invalid_argument("describe: empty sequence");
  return std::string("a ") + kBucketWords[length_bucket(seq.size())] + " protein rich in " +
         kClassWords[dominant_class(seq)] + " residues that starts with " +
         residue_name(seq.front()) + " and ends with " + residue_name(seq.back()) + ".";
}

inline std::vector<std::string> default_lexicon() {
  std::vector<std::string> words;
  for (const char* w : kBucketWords) words.emplace_back(w);
  for (const char* w : kClassWords) words.emplace_back(w);
  for (const char* w : kResidueNames) words.emplace_back(w);
  for (const char* w :
       {"a", "protein", "rich", "in", "residues", "that", "starts", "with", "and", "ends"})
    words.emplace_back(w);
  for (const char* w :
       {"the", "is", "of", "this", "binds", "to", "sequence", "describe", "classify", "label",
        "fold", "folds", "cell", "cells", "enzyme", "function", "structure", "model", "data",
        "describes", "activity", "site", "membrane", "domain", "signal", "stable", "soluble"})
    words.emplace_back(w);
  for (const char* w :
       {"sum", "product", "equals", "plus", "minus", "times", "zero", "one", "two", "three",
        "four", "five", "six", "seven", "eight", "nine", "ten"})
    words.emplace_back(w);
  for (const char* w :
       {"print", "return", "if", "else", "for", "while", "def", "let", "var", "loop", "index"})
    words.emplace_back(w);
  for (const char* w :
       {"energy", "mass", "light", "atom", "atoms", "gene", "genes", "force", "field", "charge",
        "wave", "orbit", "species", "sample", "theory"})
    words.emplace_back(w);
  return words;
}

inline TextVocab default_text_vocab() { return TextVocab(default_lexicon()); }

enum class TaskFamily { kRetrievalPairs, kBinaryCls, kMultiCls, kRegression };

inline const char* task_family_name(TaskFamily f) {
  switch (f) {
    case TaskFamily::kRetrievalPairs: return "retrieval_pairs";
    case TaskFamily::kBinaryCls: return "binary_cls";
    case TaskFamily::kMultiCls: return "multi_cls";
    case TaskFamily::kRegression: return "regression";
  }
  throw std::invalid_argument("task_family_name: bad enum value");
}

inline TaskFamily task_family_from_name(const std::string& name) {
  for (auto f : {TaskFamily::kRetrievalPairs, TaskFamily::kBinaryCls, TaskFamily::kMultiCls,
                 TaskFamily::kRegression})
    if (name == task_family_name(f)) return f;
  throw std::invalid_argument("task_family_from_name: unknown family '" + name + "'");
}

struct SyntheticTaskSpec {
  TaskFamily family = TaskFamily::kRetrievalPairs;
  std::uint64_t seed = 1;
  std::size_t n_train = 512;
  std::size_t n_val = 0;
  std::size_t n_test = 128;
  std::size_t min_len = 12;
  std::size_t max_len = 49;

  void validate() const {
    if (n_train == 0) throw std::invalid_argument("SyntheticTaskSpec: n_train must be positive");
    if (min_len < 2 || max_len < min_len)
      throw std::invalid_argument("SyntheticTaskSpec: bad length range [" +
                                  std::to_string(min_len) + ", " + std::to_string(max_len) + "]");
  }

  nlohmann::json to_json() const {
    return {{"family", task_family_name(family)}, {"seed", seed},       {"train", n_train},
            {"val", n_val},                       {"test", n_test},     {"min_len", min_len},
            {"max_len", max_len}};
  }

  static SyntheticTaskSpec from_json(const nlohmann::json& j) {
    SyntheticTaskSpec spec;
    spec.family = task_family_from_name(j.at("family").get<std::string>());
    spec.seed = j.value("seed", std::uint64_t{1});
    spec.n_train = j.value("train", std::size_t{512});
    spec.n_val = j.value("val", std::size_t{0});
    spec.n_test = j.value("test", std::size_t{128});
    spec.min_len = j.value("min_len", std::size_t{12});
    spec.max_len = j.value("max_len", std::size_t{49});
    spec.validate();
    return spec;
  }
};

struct SyntheticItem {
  std::string sequence;
  std::string description;
  int label = 0;
  double target = 0.0;
};

struct SyntheticDataset {
  std::vector<SyntheticItem> train;
  std::vector<SyntheticItem> val;
  std::vector<SyntheticItem> test;
};

namespace detail {

inline char draw_from(const std::string& pool, Rng& rng) { return pool[rng.below(pool.size())]; }

inline char draw_residue(Rng& rng) {
  return ProteinVocab::kCanonical[rng.below(20)];
}

inline char draw_outside_class(std::size_t cls, Rng& rng) {
  char c = draw_residue(rng);
  while (residue_class(c) == cls) c = draw_residue(rng);
  return c;
}

inline std::string sample_class_sequence(std::size_t cls, std::size_t len, Rng& rng) {
  std::string seq(len, 'A');
  for (auto& c : seq)
    c = rng.uniform(0.0, 1.0) < 0.65 ? draw_from(kClassResidues[cls], rng)
                                     : draw_outside_class(cls, rng);
  return seq;
}

}  // namespace detail

inline bool strictly_dominant(const std::string& seq, std::size_t cls) {
  const auto counts = class_counts(seq);
  for (std::size_t k = 0; k < kNumResidueClasses; ++k)
    if (k != cls && counts[k] >= counts[cls]) return false;
  return true;
}

// Retrieval pairs get mutually distinct attribute tuples, so within any subset
// a description singles out exactly one sequence.
inline SyntheticDataset generate_retrieval_pairs(const SyntheticTaskSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t total = spec.n_train + spec.n_val + spec.n_test;
  std::set<std::string> seen_tuples;
  std::set<std::string> seen_seqs;
  std::vector<SyntheticItem> items;
  while (items.size() < total) {
    const std::size_t cls = rng.below(kNumResidueClasses);
    const std::size_t len =
        static_cast<std::size_t>(rng.range(static_cast<std::int64_t>(spec.min_len),
                                           static_cast<std::int64_t>(spec.max_len)));
    std::string seq = detail::sample_class_sequence(cls, len, rng);
    if (!strictly_dominant(seq, cls)) continue;
    const std::string tuple = std::to_string(length_bucket(seq.size())) + "|" +
                              std::to_string(cls) + "|" + seq.front() + "|" + seq.back();
    if (!seen_tuples.insert(tuple).second) continue;
    if (!seen_seqs.insert(seq).second) continue;
    SyntheticItem item;
    item.sequence = seq;
    item.description = describe(seq);
    item.label = static_cast<int>(cls);
    item.target = hydrophobic_fraction(seq);
    items.push_back(std::move(item));
  }
  SyntheticDataset out;
  out.train.assign(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(spec.n_train));
  out.val.assign(items.begin() + static_cast<std::ptrdiff_t>(spec.n_train),
                 items.begin() + static_cast<std::ptrdiff_t>(spec.n_train + spec.n_val));
  out.test.assign(items.begin() + static_cast<std::ptrdiff_t>(spec.n_train + spec.n_val),
                  items.end());
  return out;
}

inline SyntheticDataset generate_classification(const SyntheticTaskSpec& spec,
                                                std::size_t num_classes) {
  spec.validate();
  if (num_classes < 2 || num_classes > kNumResidueClasses)
    throw std::invalid_argument("generate_classification: num_classes must be in [2, 4]");
  Rng rng(spec.seed);
  const std::size_t total = spec.n_train + spec.n_val + spec.n_test;
  std::set<std::string> seen_seqs;
  std::vector<SyntheticItem> items;
  std::size_t next_class = 0;
  while (items.size() < total) {
    const std::size_t cls = next_class;
    const std::size_t len =
        static_cast<std::size_t>(rng.range(static_cast<std::int64_t>(spec.min_len),
                                           static_cast<std::int64_t>(spec.max_len)));
    std::string seq = detail::sample_class_sequence(cls, len, rng);
    if (!strictly_dominant(seq, cls)) continue;
    if (!seen_seqs.insert(seq).second) continue;
    next_class = (next_class + 1) % num_classes;
    SyntheticItem item;
    item.sequence = seq;
    item.description = describe(seq);
    item.label = static_cast<int>(cls);
    item.target = hydrophobic_fraction(seq);
    items.push_back(std::move(item));
  }
  SyntheticDataset out;
  out.train.assign(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(spec.n_train));
  out.val.assign(items.begin() + static_cast<std::ptrdiff_t>(spec.n_train),
                 items.begin() + static_cast<std::ptrdiff_t>(spec.n_train + spec.n_val));
  out.test.assign(items.begin() + static_cast<std::ptrdiff_t>(spec.n_train + spec.n_val),
                  items.end());
  return out;
}

inline SyntheticDataset generate_regression(const SyntheticTaskSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t total = spec.n_train + spec.n_val + spec.n_test;
  std::set<std::string> seen_seqs;
  std::vector<SyntheticItem> items;
  while (items.size() < total) {
    const double p = rng.uniform(0.05, 0.95);
    const std::size_t len =
        static_cast<std::size_t>(rng.range(static_cast<std::int64_t>(spec.min_len),
                                           static_cast<std::int64_t>(spec.max_len)));
    std::string seq(len, 'A');
    for (auto& c : seq)
      c = rng.uniform(0.0, 1.0) < p ? detail::draw_from(kClassResidues[0], rng)
                                    : detail::draw_outside_class(0, rng);
    if (!seen_seqs.insert(seq).second) continue;
    SyntheticItem item;
    item.sequence = seq;
    item.description = describe(seq);
    item.label = static_cast<int>(dominant_class(seq));
    item.target = hydrophobic_fraction(seq);
    items.push_back(std::move(item));
  }
  SyntheticDataset out;
  out.train.assign(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(spec.n_train));
  out.val.assign(items.begin() + static_cast<std::ptrdiff_t>(spec.n_train),
                 items.begin() + static_cast<std::ptrdiff_t>(spec.n_train + spec.n_val));
  out.test.assign(items.begin() + static_cast<std::ptrdiff_t>(spec.n_train + spec.n_val),
                  items.end());
  return out;
}

inline SyntheticDataset generate_synthetic(const SyntheticTaskSpec& spec) {
  switch (spec.family) {
    case TaskFamily::kRetrievalPairs: return generate_retrieval_pairs(spec);
    case TaskFamily::kBinaryCls: return generate_classification(spec, 2);
    case TaskFamily::kMultiCls: return generate_classification(spec, 4);
    case TaskFamily::kRegression: return generate_regression(spec);
  }
  throw std::invalid_argument("generate_synthetic: bad task family");
}

inline void write_items_jsonl(const std::string& path, const std::vector<SyntheticItem>& items) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_items_jsonl: cannot open " + path);
  for (const auto& item : items) {
    nlohmann::json j = {{"sequence", item.sequence},
                        {"description", item.description},
                        {"label", item.label},
                        {"target", item.target}};
    out << j.dump() << '\n';
  }
}

inline std::vector<SyntheticItem> read_items_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_items_jsonl: cannot open " + path);
  std::vector<SyntheticItem> items;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded())
      throw std::invalid_argument("read_items_jsonl: bad JSON at line " + std::to_string(lineno));
    SyntheticItem item;
    item.sequence = j.at("sequence").get<std::string>();
    item.description = j.value("description", std::string());
    item.label = j.value("label", 0);
    item.target = j.value("target", 0.0);
    items.push_back(std::move(item));
  }
  return items;
}

inline EntityLexicon default_entity_lexicon(std::uint64_t seed = 7) {
  Rng rng(seed);
  EntityLexicon lex;
  for (const char* name : {"ubiquitin", "insulin", "kinase", "actin", "myosin", "tubulin"}) {
    const auto len = static_cast<std::size_t>(rng.range(12, 30));
    std::string seq(len, 'A');
    for (auto& c : seq) c = detail::draw_residue(rng);
    lex.add(name, seq);
  }
  return lex;
}

struct CorpusSpec {
  std::uint64_t seed = 11;
  std::size_t docs_per_source = 40;
};

// A small synthetic stand-in stream with all seven source tags. Prose sources
// reuse the description vocabulary so language pretraining sees the same words
// the downstream tasks use.
inline std::vector<CorpusDoc> generate_corpus(const CorpusSpec& spec) {
  Rng rng(spec.seed);
  const auto lex = default_entity_lexicon();
  std::vector<std::string> surfaces;
  for (const auto& [surface, seq] : lex.entries()) surfaces.push_back(surface);

  const std::vector<std::string> prose = {
      "the", "protein", "folds", "in", "the", "cell",   "this", "enzyme", "binds",
      "to",  "the",     "membrane", "a",  "stable", "domain", "is", "soluble"};
  const std::vector<std::string> science = {"energy", "mass",  "light",  "atom",  "force",
                                            "field",  "charge", "wave",  "orbit", "theory",
                                            "sample", "species", "gene", "genes"};
  const std::vector<std::string> math = {"one",  "plus",  "two",   "equals", "three", "sum",
                                         "times", "four", "minus", "five",   "product", "six"};
  const std::vector<std::string> code = {"if",  "return", "else", "for",  "while", "def",
                                         "let", "var",    "loop", "index", "print"};

  auto sentence_from = [&](const std::vector<std::string>& pool, std::size_t words) {
    std::string s;
    for (std::size_t w = 0; w < words; ++w) {
      if (!s.empty()) s += ' ';
      s += pool[rng.below(pool.size())];
    }
    return s + ". ";
  };
  auto doc_from = [&](const std::vector<std::string>& pool) {
    std::string text;
    const auto sentences = static_cast<std::size_t>(rng.range(2, 5));
    for (std::size_t s = 0; s < sentences; ++s)
      text += sentence_from(pool, static_cast<std::size_t>(rng.range(4, 9)));
    return text;
  };
  auto random_protein = [&]() {
    const auto len = static_cast<std::size_t>(rng.range(12, 49));
    std::string seq(len, 'A');
    for (auto& c : seq) c = detail::draw_residue(rng);
    return seq;
  };

  std::vector<CorpusDoc> docs;
  for (std::size_t d = 0; d < spec.docs_per_source; ++d) {
    docs.push_back(make_doc(Source::kTextbook, doc_from(prose)));

    std::string pub = doc_from(prose);
    pub += "this " + surfaces[rng.below(surfaces.size())] + " binds to the membrane. ";
    docs.push_back(make_doc(Source::kPubmed, pub));

    auto injected = inject_sequences(make_doc(Source::kPubmed, pub), lex, InjectMode::kAppend);
    docs.push_back(injected);

    const auto seq = random_protein();
    docs.push_back(make_doc(Source::kProteinPair, protein_pair_text(describe(seq), seq)));

    docs.push_back(make_doc(Source::kMath, doc_from(math)));
    docs.push_back(make_doc(Source::kCode, doc_from(code)));
    docs.push_back(make_doc(Source::kScience, doc_from(science)));
  }
  return docs;
}

}  // namespace bb
