#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <istream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace bb {

// Residue ids for the 20 canonical amino acids, X for anything else, and
// BOS/EOS/PAD for sequence framing.
class ProteinVocab {
 public:
  static constexpr const char* kCanonical = "ACDEFGHIKLMNPQRSTVWY";

  ProteinVocab() {
    for (int i = 0; kCanonical[i]; ++i) residue_to_id_[kCanonical[i]] = i;
  }

  int id_of(char residue) const {
    auto it = residue_to_id_.find(residue);
    return it == residue_to_id_.end() ? kX : it->second;
  }

  static constexpr int kX = 20;
  static constexpr int kBos = 21;
  static constexpr int kEos = 22;
  static constexpr int kPad = 23;
  static constexpr std::size_t kSize = 24;

  std::size_t size() const { return kSize; }

  std::vector<int> encode(const std::string& seq) const {
    if (seq.empty()) throw std::invalid_argument("ProteinVocab::encode: empty sequence");
    std::vector<int> ids;
    ids.reserve(seq.size());
    for (char c : seq) ids.push_back(id_of(c));
    return ids;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
      if (id < 0 || id > kX)
        throw std::invalid_argument("ProteinVocab::decode: id " + std::to_string(id) +
                                    " is not a residue");
      out.push_back(id == kX ? 'X' : kCanonical[id]);
    }
    return out;
  }

 private:
  std::unordered_map<char, int> residue_to_id_;
};

// Word-level text vocabulary with byte fallback. Encoding is greedy
// longest-match over the lexicon plus the special marker strings; any
// unmatched byte becomes its byte token, so decode(encode(s)) == s for
// every string.
class TextVocab {
 public:
  static constexpr int kCls = 0;
  static constexpr int kPad = 1;
  static constexpr int kBos = 2;
  static constexpr int kEos = 3;
  static constexpr int kProtOpen = 4;
  static constexpr int kProtClose = 5;
  static constexpr int kSeq = 6;
  static constexpr int kByteBase = 7;
  static constexpr int kLexBase = kByteBase + 256;

  explicit TextVocab(const std::vector<std::string>& lexicon) {
    tokens_ = {"<cls>", "<pad>", "<bos>", "<eos>", "<protein>", "</protein>", "<seq>"};
    for (int b = 0; b < 256; ++b) tokens_.push_back(byte_spelling(b));
    for (int id = 0; id < kByteBase; ++id) add_matchable(tokens_[id], id);
    for (const auto& word : lexicon) {
      if (word.empty()) throw std::invalid_argument("TextVocab: empty lexicon word");
      if (word.find('\n') != std::string::npos || word.find('\r') != std::string::npos)
        throw std::invalid_argument("TextVocab: lexicon word contains a line break");
      const int id = static_cast<int>(tokens_.size());
      tokens_.push_back(word);
      add_matchable(word, id);
    }
    for (auto& bucket : by_first_) {
      std::sort(bucket.begin(), bucket.end(), [this](int a, int b) {
        if (tokens_[a].size() != tokens_[b].size()) return tokens_[a].size() > tokens_[b].size();
        return tokens_[a] < tokens_[b];
      });
    }
  }

  std::size_t size() const { return tokens_.size(); }

  const std::string& token_string(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
      throw std::invalid_argument("TextVocab: id " + std::to_string(id) + " out of range");
    return tokens_[id];
  }

  // Exact spelling lookup over matchable tokens; -1 when absent.
  int token_id(const std::string& spelling) const {
    auto it = lookup_.find(spelling);
    return it == lookup_.end() ? -1 : it->second;
  }

  std::vector<std::string> lexicon() const {
    return std::vector<std::string>(tokens_.begin() + kLexBase, tokens_.end());
  }

  std::vector<int> encode(const std::string& text) const {
    std::vector<int> ids;
    std::size_t pos = 0;
    while (pos < text.size()) {
      const auto& bucket = by_first_[static_cast<unsigned char>(text[pos])];
      int matched = -1;
      for (int cand : bucket) {
        const std::string& tok = tokens_[cand];
        if (tok.size() <= text.size() - pos && text.compare(pos, tok.size(), tok) == 0) {
          matched = cand;
          break;
        }
      }
      if (matched >= 0) {
        ids.push_back(matched);
        pos += tokens_[matched].size();
      } else {
        ids.push_back(kByteBase + static_cast<unsigned char>(text[pos]));
        ++pos;
      }
    }
    return ids;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
      if (id >= kByteBase && id < kLexBase)
        out.push_back(static_cast<char>(id - kByteBase));
      else
        out += token_string(id);
    }
    return out;
  }

  std::size_t count_tokens(const std::string& text) const { return encode(text).size(); }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("TextVocab::save: cannot open " + path);
    out << "#bb-vocab-1\n#specials " << kByteBase << "\n";
    for (const auto& tok : tokens_) out << tok << "\n";
  }

  static TextVocab load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("TextVocab::load: cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line != "#bb-vocab-1")
      throw std::invalid_argument("TextVocab::load: bad header in " + path);
    if (!std::getline(in, line) || line.rfind("#specials ", 0) != 0)
      throw std::invalid_argument("TextVocab::load: missing specials line in " + path);
    std::vector<std::string> file_tokens;
    while (std::getline(in, line)) file_tokens.push_back(line);
    if (file_tokens.size() < kLexBase)
      throw std::invalid_argument("TextVocab::load: truncated vocabulary in " + path);
    TextVocab vocab(std::vector<std::string>(file_tokens.begin() + kLexBase, file_tokens.end()));
    for (int id = 0; id < kLexBase; ++id)
      if (file_tokens[id] != vocab.tokens_[id])
        throw std::invalid_argument("TextVocab::load: token " + std::to_string(id) +
                                    " mismatch in " + path);
    return vocab;
  }

 private:
  static std::string byte_spelling(int b) {
    char buf[8];
    std::snprintf(buf, sizeof(buf), "<0x%02x>", b);
    return std::string(buf);
  }

  void add_matchable(const std::string& spelling, int id) {
    if (!lookup_.emplace(spelling, id).second)
      throw std::invalid_argument("TextVocab: duplicate token \"" + spelling + "\"");
    by_first_[static_cast<unsigned char>(spelling[0])].push_back(id);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> lookup_;
  std::array<std::vector<int>, 256> by_first_;
};

struct FastaRecord {
  std::string header;
  std::string seq;

  std::string id() const {
    const auto cut = header.find_first_of(" \t");
    return cut == std::string::npos ? header : header.substr(0, cut);
  }
};

inline std::vector<FastaRecord> parse_fasta(std::istream& in) {
  std::vector<FastaRecord> records;
  std::string line;
  bool seen_header = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '>') {
      records.push_back(FastaRecord{line.substr(1), ""});
      seen_header = true;
    } else {
      if (!seen_header)
        throw std::invalid_argument("parse_fasta: sequence data before the first header");
      records.back().seq += line;
    }
  }
  for (const auto& rec : records)
    if (rec.seq.empty())
      throw std::invalid_argument("parse_fasta: record \"" + rec.header + "\" has no sequence");
  return records;
}

inline std::vector<FastaRecord> read_fasta(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_fasta: cannot open " + path);
  return parse_fasta(in);
}

}  // namespace bb
