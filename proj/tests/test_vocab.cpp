#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <sstream>
#include <string>

#include "biobridge/rng.hpp"
#include "biobridge/vocab.hpp"

namespace {

std::string random_protein(bb::Rng& rng, std::size_t len) {
  std::string s;
  for (std::size_t i = 0; i < len; ++i)
    s.push_back(bb::ProteinVocab::kCanonical[rng.below(20)]);
  return s;
}

}  // namespace

TEST_CASE("protein encoding looks residues up directly", "[vocab]") {
  bb::ProteinVocab pv;
  auto ids = pv.encode("ACD");
  REQUIRE(ids.size() == 3);
  CHECK(ids[0] == pv.id_of('A'));
  CHECK(ids[1] == pv.id_of('C'));
  CHECK(ids[2] == pv.id_of('D'));
  CHECK(ids == std::vector<int>{0, 1, 2});
}

TEST_CASE("non-canonical residues become X", "[vocab]") {
  bb::ProteinVocab pv;
  CHECK(pv.encode("AZA") == std::vector<int>{0, bb::ProteinVocab::kX, 0});
  CHECK(pv.encode("aB*") ==
        std::vector<int>{bb::ProteinVocab::kX, bb::ProteinVocab::kX, bb::ProteinVocab::kX});
}

TEST_CASE("protein round trip and length preservation", "[vocab]") {
  bb::ProteinVocab pv;
  bb::Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    auto s = random_protein(rng, static_cast<std::size_t>(rng.range(1, 60)));
    CHECK(pv.decode(pv.encode(s)) == s);
  }
  for (int trial = 0; trial < 200; ++trial) {
    std::string dirty;
    const auto len = static_cast<std::size_t>(rng.range(1, 40));
    for (std::size_t i = 0; i < len; ++i)
      dirty.push_back(static_cast<char>(rng.range(32, 126)));
    CHECK(pv.encode(dirty).size() == dirty.size());
  }
  CHECK_THROWS_AS(pv.encode(""), std::invalid_argument);
}

TEST_CASE("protein vocab ids are dense and sized", "[vocab]") {
  bb::ProteinVocab pv;
  CHECK(pv.size() == 24);
  CHECK(bb::ProteinVocab::kX == 20);
  CHECK(bb::ProteinVocab::kPad == 23);
  CHECK_THROWS_AS(pv.decode({bb::ProteinVocab::kBos}), std::invalid_argument);
}

TEST_CASE("text encoding basics", "[vocab]") {
  bb::TextVocab tv({"protein", "binds", " "});
  CHECK(tv.encode("").empty());
  auto one = tv.encode("protein");
  REQUIRE(one.size() == 1);
  CHECK(one[0] == tv.token_id("protein"));
  CHECK(one[0] >= bb::TextVocab::kLexBase);

  auto two = tv.encode("protein binds");
  REQUIRE(two.size() == 3);
  CHECK(two[1] == tv.token_id(" "));
  CHECK(tv.decode(two) == "protein binds");
}

TEST_CASE("out-of-lexicon text falls back to byte tokens", "[vocab]") {
  bb::TextVocab tv({"protein"});
  auto ids = tv.encode("qx");
  REQUIRE(ids.size() == 2);
  CHECK(ids[0] == bb::TextVocab::kByteBase + 'q');
  CHECK(ids[1] == bb::TextVocab::kByteBase + 'x');
  CHECK(tv.decode(ids) == "qx");
}

TEST_CASE("marker tokens come only from literal marker strings", "[vocab]") {
  bb::TextVocab tv({"protein", "sequence", " ", "<pro"});
  auto plain = tv.encode("protein sequence <pro and seq words");
  for (int id : plain) {
    CHECK(id != bb::TextVocab::kProtOpen);
    CHECK(id != bb::TextVocab::kProtClose);
    CHECK(id != bb::TextVocab::kSeq);
  }
  auto marked = tv.encode("see <seq> here");
  CHECK(std::count(marked.begin(), marked.end(), bb::TextVocab::kSeq) == 1);
  auto wrapped = tv.encode("<protein>ACD</protein>");
  CHECK(wrapped.front() == bb::TextVocab::kProtOpen);
  CHECK(wrapped.back() == bb::TextVocab::kProtClose);
  CHECK(tv.decode(wrapped) == "<protein>ACD</protein>");
  CHECK(tv.decode(marked) == "see <seq> here");
}

TEST_CASE("10k random strings round trip through the text vocab", "[vocab]") {
  bb::TextVocab tv({"protein", "binds", "the", " ", "rich", "hydrophobic", "acidic"});
  bb::Rng rng(32);
  const std::vector<std::string> words = {"protein", "binds",  "the",  " ",   "zzz",
                                          "<seq>",   "<prote", "in>",  "<",   ">",
                                          "rich",    "0x41",   "<0x41>"};
  for (int trial = 0; trial < 10000; ++trial) {
    std::string s;
    const int pieces = rng.range(0, 6);
    for (int p = 0; p < pieces; ++p) {
      if (rng.uniform() < 0.5) {
        s += words[static_cast<std::size_t>(rng.below(words.size()))];
      } else {
        const int len = rng.range(1, 5);
        for (int i = 0; i < len; ++i) s.push_back(static_cast<char>(rng.range(0, 255)));
      }
    }
    CHECK(tv.decode(tv.encode(s)) == s);
  }
}

TEST_CASE("count_tokens matches encode length", "[vocab]") {
  bb::TextVocab tv({"protein", " "});
  CHECK(tv.count_tokens("") == 0);
  CHECK(tv.count_tokens("protein") == 1);
  CHECK(tv.count_tokens("protein protein") == 3);
  CHECK(tv.count_tokens("odd bytes") == tv.encode("odd bytes").size());
}

TEST_CASE("special ids stay clear of lexical ids", "[vocab]") {
  bb::TextVocab tv({"alpha", "beta"});
  CHECK(tv.token_id("<cls>") == bb::TextVocab::kCls);
  CHECK(tv.token_id("<seq>") == bb::TextVocab::kSeq);
  CHECK(tv.token_id("alpha") >= bb::TextVocab::kLexBase);
  CHECK(tv.token_id("missing") == -1);
  CHECK(tv.size() == bb::TextVocab::kLexBase + 2);
  CHECK_THROWS_AS(bb::TextVocab({"dup", "dup"}), std::invalid_argument);
  CHECK_THROWS_AS(bb::TextVocab({"<seq>"}), std::invalid_argument);
  CHECK_THROWS_AS(bb::TextVocab({""}), std::invalid_argument);
}

TEST_CASE("vocab files round trip", "[vocab]") {
  bb::TextVocab tv({"protein", "binds", " ", "acidic"});
  const std::string path = "vocab_roundtrip.txt";
  tv.save(path);
  auto loaded = bb::TextVocab::load(path);
  CHECK(loaded.size() == tv.size());
  const std::string probe = "protein binds acidic <seq> stuff";
  CHECK(loaded.encode(probe) == tv.encode(probe));
  CHECK(loaded.token_id("acidic") == tv.token_id("acidic"));
  std::remove(path.c_str());
  CHECK_THROWS_AS(bb::TextVocab::load("no_such_vocab.txt"), std::runtime_error);
}

TEST_CASE("fasta parsing", "[vocab]") {
  std::istringstream in(">sp|P1|TEST first protein\nACDE\nFGHI\n\n>p2\nMKV\n");
  auto records = bb::parse_fasta(in);
  REQUIRE(records.size() == 2);
  CHECK(records[0].header == "sp|P1|TEST first protein");
  CHECK(records[0].id() == "sp|P1|TEST");
  CHECK(records[0].seq == "ACDEFGHI");
  CHECK(records[1].seq == "MKV");

  std::istringstream crlf(">r1\r\nAC\r\nDE\r\n");
  auto rec2 = bb::parse_fasta(crlf);
  REQUIRE(rec2.size() == 1);
  CHECK(rec2[0].seq == "ACDE");

  std::istringstream bad("ACDE\n>r1\nAC\n");
  CHECK_THROWS_AS(bb::parse_fasta(bad), std::invalid_argument);
  std::istringstream empty_seq(">r1\n>r2\nAC\n");
  CHECK_THROWS_AS(bb::parse_fasta(empty_seq), std::invalid_argument);
  CHECK_THROWS_AS(bb::read_fasta("missing.fasta"), std::runtime_error);
}
