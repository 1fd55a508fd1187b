#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "biobridge/rng.hpp"
#include "biobridge/vocab.hpp"

namespace bb {

enum class Source {
  kTextbook = 0,
  kPubmed,
  kSeqInjected,
  kProteinPair,
  kMath,
  kCode,
  kScience,
};

inline constexpr std::size_t kNumSources = 7;

inline const char* source_name(Source s) {
  switch (s) {
    case Source::kTextbook: return "textbook";
    case Source::kPubmed: return "pubmed";
    case Source::kSeqInjected: return "seq_injected";
    case Source::kProteinPair: return "protein_pair";
    case Source::kMath: return "math";
    case Source::kCode: return "code";
    case Source::kScience: return "science";
  }
  throw std::invalid_argument("source_name: bad enum value");
}

inline Source source_from_name(const std::string& name) {
  for (std::size_t i = 0; i < kNumSources; ++i) {
    auto s = static_cast<Source>(i);
    if (name == source_name(s)) return s;
  }
  throw std::invalid_argument("source_from_name: unknown source '" + name + "'");
}

// A sentence ends after its terminating punctuation run plus any trailing
// whitespace, or after a blank line. The offsets partition the text, so the
// final unterminated fragment still counts as a sentence.
inline std::vector<std::size_t> split_sentences(const std::string& text) {
  std::vector<std::size_t> ends;
  const std::size_t n = text.size();
  auto is_term = [](char c) { return c == '.' || c == '!' || c == '?'; };
  auto is_space = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
  std::size_t i = 0;
  while (i < n) {
    if (is_term(text[i])) {
      std::size_t j = i;
      while (j < n && is_term(text[j])) ++j;
      if (j == n || is_space(text[j])) {
        while (j < n && is_space(text[j])) ++j;
        ends.push_back(j);
        i = j;
        continue;
      }
      i = j;
      continue;
    }
    if (text[i] == '\n' && i + 1 < n && text[i + 1] == '\n') {
      std::size_t j = i;
      while (j < n && is_space(text[j])) ++j;
      ends.push_back(j);
      i = j;
      continue;
    }
    ++i;
  }
  if (!text.empty() && (ends.empty() || ends.back() != n)) ends.push_back(n);
  return ends;
}

struct CorpusDoc {
  Source source = Source::kTextbook;
  std::string text;
  std::vector<std::size_t> sentence_ends;

  std::string sentence(std::size_t idx) const {
    if (idx >= sentence_ends.size())
      throw std::invalid_argument("CorpusDoc::sentence: index out of range");
    const std::size_t begin = idx == 0 ? 0 : sentence_ends[idx - 1];
    return text.substr(begin, sentence_ends[idx] - begin);
  }
};

inline CorpusDoc make_doc(Source source, std::string text) {
  CorpusDoc doc;
  doc.source = source;
  doc.text = std::move(text);
  doc.sentence_ends = split_sentences(doc.text);
  return doc;
}

class EntityLexicon {
 public:
  void add(const std::string& surface, const std::string& sequence) {
    if (surface.empty()) throw std::invalid_argument("EntityLexicon: empty surface form");
    if (sequence.empty())
      throw std::invalid_argument("EntityLexicon: empty sequence for '" + surface + "'");
    for (char c : sequence)
      if (std::string(ProteinVocab::kCanonical).find(c) == std::string::npos)
        throw std::invalid_argument("EntityLexicon: non-canonical residue '" +
                                    std::string(1, c) + "' in sequence for '" + surface + "'");
    entries_[surface] = sequence;
  }

  const std::map<std::string, std::string>& entries() const { return entries_; }
  bool empty() const { return entries_.empty(); }

  static EntityLexicon from_tsv_text(const std::string& text) {
    EntityLexicon lex;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos)
        throw std::invalid_argument("EntityLexicon: line " + std::to_string(lineno) +
                                    " has no tab separator");
      lex.add(line.substr(0, tab), line.substr(tab + 1));
    }
    return lex;
  }

  static EntityLexicon load_tsv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("EntityLexicon: cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return from_tsv_text(buf.str());
  }

 private:
  std::map<std::string, std::string> entries_;
};

enum class InjectMode { kAppend, kReplace };

inline constexpr const char* kSeqMarker = "<seq>";

namespace detail {

inline bool word_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) != 0 || c == '_';
}

inline bool boundary_match(const std::string& text, std::size_t pos, const std::string& word) {
  if (text.compare(pos, word.size(), word) != 0) return false;
  if (pos > 0 && word_char(text[pos - 1])) return false;
  const std::size_t after = pos + word.size();
  if (after < text.size() && word_char(text[after])) return false;
  return true;
}

}  // namespace detail

// Exact whole-word matching over the lexicon. Append mode keeps the surface
// form and inserts " <seq>SEQ" after it; replace mode substitutes "<seq>SEQ"
// for the surface form. A surface already followed by the marker is left
// alone, which makes append idempotent.
inline CorpusDoc inject_sequences(const CorpusDoc& doc, const EntityLexicon& lex,
                                  InjectMode mode) {
  if (doc.source != Source::kPubmed && doc.source != Source::kSeqInjected)
    throw std::invalid_argument("inject_sequences: doc source must be pubmed");
  std::string out;
  out.reserve(doc.text.size());
  std::size_t injected = 0;
  std::size_t i = 0;
  const std::string& text = doc.text;
  const std::string marker(kSeqMarker);
  while (i < text.size()) {
    if (text.compare(i, marker.size(), marker) == 0) {
      const std::size_t stop = i + marker.size();
      out.append(text, i, marker.size());
      i = stop;
      while (i < text.size() &&
             std::string(ProteinVocab::kCanonical).find(text[i]) != std::string::npos) {
        out.push_back(text[i]);
        ++i;
      }
      continue;
    }
    const std::string* seq = nullptr;
    std::size_t best_len = 0;
    for (const auto& [surface, sequence] : lex.entries()) {
      if (surface.size() > best_len && detail::boundary_match(text, i, surface)) {
        best_len = surface.size();
        seq = &sequence;
      }
    }
    if (seq == nullptr) {
      out.push_back(text[i]);
      ++i;
      continue;
    }
    std::size_t after = i + best_len;
    std::size_t probe = after;
    if (probe < text.size() && text[probe] == ' ') ++probe;
    const bool already_marked = text.compare(probe, std::string(kSeqMarker).size(), kSeqMarker) == 0;
    if (already_marked) {
      out.append(text, i, best_len);
    } else if (mode == InjectMode::kAppend) {
      out.append(text, i, best_len);
      out.push_back(' ');
      out.append(kSeqMarker);
      out.append(*seq);
      ++injected;
    } else {
      out.append(kSeqMarker);
      out.append(*seq);
      ++injected;
    }
    i = after;
  }
  CorpusDoc result = make_doc(injected > 0 ? Source::kSeqInjected : doc.source, std::move(out));
  return result;
}

struct Span {
  std::size_t doc = 0;
  std::size_t start = 0;
  std::size_t end = 0;
};

struct PackedSequence {
  std::vector<int> tokens;
  std::vector<Span> spans;
  Source source = Source::kTextbook;
};

struct PackSkip {
  std::size_t doc = 0;
  std::string reason;
};

struct PackResult {
  std::vector<PackedSequence> packs;
  std::vector<PackSkip> skipped;
};

inline constexpr std::size_t kDefaultWindow = 4096;

// Packs documents into windows of at most max_seq_len tokens. A document whose
// token stream exceeds the window keeps only the longest sentence prefix that
// fits; the tail is dropped. A document whose first sentence alone exceeds the
// window is skipped and logged. Surviving streams are placed first-fit into
// open packs of the same source, so no pack mixes sources and none is padded.
inline PackResult pack_corpus(const std::vector<CorpusDoc>& docs, const TextVocab& vocab,
                              std::size_t max_seq_len = kDefaultWindow) {
  if (max_seq_len == 0) throw std::invalid_argument("pack_corpus: max_seq_len must be positive");
  PackResult result;
  std::array<std::vector<std::size_t>, kNumSources> open;
  for (std::size_t d = 0; d < docs.size(); ++d) {
    const CorpusDoc& doc = docs[d];
    std::vector<std::vector<int>> sentence_tokens;
    bool overflow = false;
    for (std::size_t s = 0; s < doc.sentence_ends.size(); ++s) {
      auto toks = vocab.encode(doc.sentence(s));
      if (toks.size() > max_seq_len) {
        result.skipped.push_back(
            {d, "sentence of " + std::to_string(toks.size()) + " tokens exceeds window of " +
                    std::to_string(max_seq_len)});
        overflow = true;
        break;
      }
      sentence_tokens.push_back(std::move(toks));
    }
    if (overflow) continue;
    std::vector<int> stream;
    for (const auto& toks : sentence_tokens) {
      if (stream.size() + toks.size() > max_seq_len) break;
      stream.insert(stream.end(), toks.begin(), toks.end());
    }
    if (stream.empty()) continue;

    const auto src = static_cast<std::size_t>(doc.source);
    std::size_t pack_idx = result.packs.size();
    for (std::size_t candidate : open[src]) {
      if (result.packs[candidate].tokens.size() + stream.size() <= max_seq_len) {
        pack_idx = candidate;
        break;
      }
    }
    if (pack_idx == result.packs.size()) {
      PackedSequence p;
      p.source = doc.source;
      result.packs.push_back(std::move(p));
      open[src].push_back(pack_idx);
    }
    PackedSequence& pack = result.packs[pack_idx];
    Span span;
    span.doc = d;
    span.start = pack.tokens.size();
    pack.tokens.insert(pack.tokens.end(), stream.begin(), stream.end());
    span.end = pack.tokens.size();
    pack.spans.push_back(span);
  }
  return result;
}

struct MixtureSpec {
  std::array<double, kNumSources> ratio{};

  void validate() const {
    double sum = 0.0;
    for (std::size_t i = 0; i < kNumSources; ++i) {
      if (ratio[i] < 0.0)
        throw std::invalid_argument(std::string("MixtureSpec: negative ratio for ") +
                                    source_name(static_cast<Source>(i)));
      sum += ratio[i];
    }
    if (std::abs(sum - 1.0) > 1e-9)
      throw std::invalid_argument("MixtureSpec: ratios sum to " + std::to_string(sum) +
                                  ", expected 1");
  }

  static MixtureSpec pretrain_defaults() {
    MixtureSpec spec;
    spec.ratio = {0.0605, 0.3216, 0.0360, 0.1995, 0.2234, 0.0777, 0.0813};
    return spec;
  }
};

enum class SampleMode { kStratified, kMultinomial };

using PackPools = std::array<std::vector<PackedSequence>, kNumSources>;

inline PackPools split_pools(const std::vector<PackedSequence>& packs) {
  PackPools pools;
  for (const auto& p : packs) pools[static_cast<std::size_t>(p.source)].push_back(p);
  return pools;
}

// Exact per-source counts by largest remainder. Ties go to the lower source
// index so the apportionment is a pure function of (spec, n).
inline std::array<std::size_t, kNumSources> apportion_counts(const MixtureSpec& spec,
                                                             std::size_t n) {
  spec.validate();
  std::array<std::size_t, kNumSources> counts{};
  std::array<double, kNumSources> frac{};
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < kNumSources; ++i) {
    const double exact = spec.ratio[i] * static_cast<double>(n);
    counts[i] = static_cast<std::size_t>(exact);
    frac[i] = exact - static_cast<double>(counts[i]);
    assigned += counts[i];
  }
  std::array<std::size_t, kNumSources> order{0, 1, 2, 3, 4, 5, 6};
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t k = 0; assigned < n; ++k) {
    counts[order[k % kNumSources]] += 1;
    ++assigned;
  }
  return counts;
}

inline std::vector<PackedSequence> sample_mixture(const MixtureSpec& spec, const PackPools& pools,
                                                  std::size_t n, Rng& rng,
                                                  SampleMode mode = SampleMode::kStratified) {
  spec.validate();
  for (std::size_t i = 0; i < kNumSources; ++i)
    if (spec.ratio[i] > 0.0 && pools[i].empty())
      throw std::invalid_argument(std::string("sample_mixture: empty pool for source ") +
                                  source_name(static_cast<Source>(i)));
  std::vector<PackedSequence> out;
  out.reserve(n);
  if (mode == SampleMode::kStratified) {
    const auto counts = apportion_counts(spec, n);
    for (std::size_t i = 0; i < kNumSources; ++i)
      for (std::size_t k = 0; k < counts[i]; ++k)
        out.push_back(pools[i][rng.below(pools[i].size())]);
    rng.shuffle(out);
  } else {
    std::vector<std::pair<double, std::size_t>> cdf;
    double acc = 0.0;
    for (std::size_t i = 0; i < kNumSources; ++i) {
      if (spec.ratio[i] == 0.0) continue;
      acc += spec.ratio[i];
      cdf.emplace_back(acc, i);
    }
    if (cdf.empty()) throw std::invalid_argument("sample_mixture: all ratios are zero");
    cdf.back().first = 1.0;
    for (std::size_t k = 0; k < n; ++k) {
      const double u = rng.uniform(0.0, 1.0);
      std::size_t src = cdf.back().second;
      for (const auto& [cum, i] : cdf) {
        if (u < cum) {
          src = i;
          break;
        }
      }
      out.push_back(pools[src][rng.below(pools[src].size())]);
    }
  }
  return out;
}

struct CorpusReport {
  std::array<std::size_t, kNumSources> token_counts{};
  std::array<std::size_t, kNumSources> pack_counts{};
  std::size_t total_tokens = 0;
  std::size_t padding_tokens = 0;
  std::map<std::size_t, std::size_t> length_histogram;

  double ratio(Source s) const {
    if (total_tokens == 0) return 0.0;
    return static_cast<double>(token_counts[static_cast<std::size_t>(s)]) /
           static_cast<double>(total_tokens);
  }
};

inline CorpusReport corpus_stats(const std::vector<PackedSequence>& packs) {
  CorpusReport report;
  for (const auto& p : packs) {
    const auto src = static_cast<std::size_t>(p.source);
    report.token_counts[src] += p.tokens.size();
    report.pack_counts[src] += 1;
    report.total_tokens += p.tokens.size();
    report.length_histogram[p.tokens.size()] += 1;
    for (int t : p.tokens)
      if (t == TextVocab::kPad) ++report.padding_tokens;
  }
  return report;
}

inline nlohmann::json pack_to_json(const PackedSequence& pack) {
  nlohmann::json spans = nlohmann::json::array();
  for (const auto& s : pack.spans)
    spans.push_back({{"doc", s.doc}, {"start", s.start}, {"end", s.end}});
  return {{"tokens", pack.tokens}, {"spans", spans}, {"source", source_name(pack.source)}};
}

inline PackedSequence pack_from_json(const nlohmann::json& j) {
  PackedSequence pack;
  if (!j.contains("tokens") || !j.contains("spans") || !j.contains("source"))
    throw std::invalid_argument("pack_from_json: missing tokens, spans, or source");
  pack.tokens = j.at("tokens").get<std::vector<int>>();
  pack.source = source_from_name(j.at("source").get<std::string>());
  for (const auto& s : j.at("spans")) {
    Span span;
    span.doc = s.at("doc").get<std::size_t>();
    span.start = s.at("start").get<std::size_t>();
    span.end = s.at("end").get<std::size_t>();
    pack.spans.push_back(span);
  }
  return pack;
}

inline void write_packs(const std::string& path, const std::vector<PackedSequence>& packs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_packs: cannot open " + path);
  for (const auto& p : packs) out << pack_to_json(p).dump() << '\n';
  if (!out) throw std::runtime_error("write_packs: write failed for " + path);
}

inline std::vector<PackedSequence> read_packs(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_packs: cannot open " + path);
  std::vector<PackedSequence> packs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded())
      throw std::invalid_argument("read_packs: bad JSON at line " + std::to_string(lineno));
    packs.push_back(pack_from_json(j));
  }
  return packs;
}

inline std::string protein_pair_text(const std::string& description, const std::string& sequence) {
  return "Description: " + description + " Sequence: " + kSeqMarker + sequence;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_text_file: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// Loads manifest.json from dir: an object mapping relative file path to source
// tag. A protein_pair entry names a FASTA file; its descriptions live beside it
// in <stem>.txt, one line per record, and each record becomes its own document.
inline std::vector<CorpusDoc> load_corpus(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  const fs::path manifest_path = root / "manifest.json";
  nlohmann::json manifest = nlohmann::json::parse(read_text_file(manifest_path.string()), nullptr,
                                                  false);
  if (manifest.is_discarded() || !manifest.is_object())
    throw std::invalid_argument("load_corpus: manifest.json must be a JSON object");
  std::vector<CorpusDoc> docs;
  for (const auto& [rel, tag] : manifest.items()) {
    const Source source = source_from_name(tag.get<std::string>());
    const fs::path path = root / rel;
    if (source == Source::kProteinPair) {
      const auto records = read_fasta(path.string());
      fs::path desc_path = path;
      desc_path.replace_extension(".txt");
      std::istringstream desc_in(read_text_file(desc_path.string()));
      std::vector<std::string> descriptions;
      std::string line;
      while (std::getline(desc_in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        descriptions.push_back(line);
      }
      if (descriptions.size() != records.size())
        throw std::invalid_argument("load_corpus: " + rel + " has " +
                                    std::to_string(records.size()) + " records but " +
                                    std::to_string(descriptions.size()) + " descriptions");
      for (std::size_t i = 0; i < records.size(); ++i)
        docs.push_back(
            make_doc(source, protein_pair_text(descriptions[i], records[i].seq)));
    } else {
      docs.push_back(make_doc(source, read_text_file(path.string())));
    }
  }
  return docs;
}

}  // namespace bb
