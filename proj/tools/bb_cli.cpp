#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "biobridge/train.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  auto j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw std::invalid_argument("bad JSON in " + path);
  return j;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path);
}

bb::RunConfig load_config(const std::string& path) {
  auto rc = bb::RunConfig::from_file(path);
  rc.validate();
  return rc;
}

// A checkpoint argument may name a file directly or a run directory, in which
// case the most fully trained stage wins.
std::string resolve_ckpt(const std::string& path) {
  if (fs::is_regular_file(path)) return path;
  if (fs::is_directory(path)) {
    for (const char* name : {"final.ckpt", "stage_c.ckpt", "stage_b.ckpt", "stage_a.ckpt"}) {
      const auto cand = fs::path(path) / name;
      if (fs::is_regular_file(cand)) return cand.string();
    }
    throw std::runtime_error("no checkpoint found under " + path);
  }
  throw std::runtime_error("checkpoint path does not exist: " + path);
}

void restore_into(bb::ModelBundle& bundle, const std::string& ckpt_path) {
  bb::restore_params(bundle.reg, bb::load_checkpoint(ckpt_path));
}

json retrieval_json(const bb::RetrievalResult& r) {
  json p2t = json::object(), t2p = json::object();
  for (const auto& [k, v] : r.protein_to_text) p2t[std::to_string(k)] = v;
  for (const auto& [k, v] : r.text_to_protein) t2p[std::to_string(k)] = v;
  return {{"protein_to_text", p2t}, {"text_to_protein", t2p}};
}

json stats_json(const bb::CorpusReport& rep) {
  json sources = json::object();
  for (std::size_t i = 0; i < bb::kNumSources; ++i) {
    const auto src = static_cast<bb::Source>(i);
    sources[bb::source_name(src)] = {{"tokens", rep.token_counts[i]},
                                     {"packs", rep.pack_counts[i]},
                                     {"ratio", rep.ratio(src)}};
  }
  json hist = json::object();
  for (const auto& [len, n] : rep.length_histogram) hist[std::to_string(len)] = n;
  return {{"total_tokens", rep.total_tokens},
          {"padding_tokens", rep.padding_tokens},
          {"sources", sources},
          {"length_histogram", hist}};
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine: dim mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / (std::sqrt(na) * std::sqrt(nb) + 1e-12);
}

std::vector<std::vector<double>> latent_rows(const bb::ModelBundle& bundle,
                                             const std::string& seq) {
  auto z = bundle.protein_latents(seq);
  const std::size_t k = z->shape[0], d = z->shape[1];
  std::vector<std::vector<double>> rows(k);
  for (std::size_t q = 0; q < k; ++q)
    rows[q].assign(z->values.begin() + static_cast<std::ptrdiff_t>(q * d),
                   z->values.begin() + static_cast<std::ptrdiff_t>((q + 1) * d));
  return rows;
}

double best_match(const std::vector<std::vector<double>>& entry,
                  const std::vector<std::vector<double>>& query) {
  double best = -2.0;
  for (const auto& e : entry)
    for (const auto& q : query) best = std::max(best, cosine(e, q));
  return best;
}

struct SynthArgs {
  std::string spec_file;
  std::string out_dir = "data";
};

void run_synth(const SynthArgs& a) {
  const auto spec = bb::SyntheticTaskSpec::from_json(read_json_file(a.spec_file));
  const auto data = bb::generate_synthetic(spec);
  fs::create_directories(a.out_dir);
  bb::write_items_jsonl(a.out_dir + "/train.jsonl", data.train);
  if (!data.val.empty()) bb::write_items_jsonl(a.out_dir + "/val.jsonl", data.val);
  bb::write_items_jsonl(a.out_dir + "/test.jsonl", data.test);
  std::printf("synth %s: %zu train / %zu val / %zu test -> %s\n",
              bb::task_family_name(spec.family), data.train.size(), data.val.size(),
              data.test.size(), a.out_dir.c_str());
}

struct PackArgs {
  std::string config_file;
  std::string docs_dir;
  std::string out_dir = "corpus";
};

void run_pack(const PackArgs& a) {
  const auto rc = load_config(a.config_file);
  const auto vocab = bb::default_text_vocab();
  const auto docs =
      a.docs_dir.empty() ? bb::generate_corpus(rc.corpus) : bb::load_corpus(a.docs_dir);
  const auto packed = bb::pack_corpus(docs, vocab, rc.pack_window);
  for (const auto& skip : packed.skipped)
    std::fprintf(stderr, "skip doc %zu: %s\n", skip.doc, skip.reason.c_str());
  fs::create_directories(a.out_dir);
  bb::write_packs(a.out_dir + "/packs.jsonl", packed.packs);
  const auto rep = bb::corpus_stats(packed.packs);
  write_text_file(a.out_dir + "/corpus_stats.json", stats_json(rep).dump(2) + "\n");
  std::printf("packed %zu docs into %zu packs, %zu tokens, %zu skipped -> %s\n", docs.size(),
              packed.packs.size(), rep.total_tokens, packed.skipped.size(), a.out_dir.c_str());
}

struct TrainArgs {
  std::string stage;
  std::string config_file;
  std::string run_dir;
  std::string from_ckpt;
  std::string packs_file;
  std::string data_dir;
  std::size_t sample_n = 0;
  bool fresh = false;
  bool plaintext = false;
};

bb::SyntheticDataset load_or_generate_items(const bb::RunConfig& rc, const std::string& data_dir) {
  bb::SyntheticDataset data;
  if (data_dir.empty()) return bb::generate_synthetic(rc.task);
  data.train = bb::read_items_jsonl(data_dir + "/train.jsonl");
  if (fs::is_regular_file(data_dir + "/val.jsonl"))
    data.val = bb::read_items_jsonl(data_dir + "/val.jsonl");
  return data;
}

void run_train(const TrainArgs& a) {
  auto rc = load_config(a.config_file);
  if (!a.run_dir.empty()) rc.run_dir = a.run_dir;
  bb::ModelBundle bundle(rc.model, bb::default_text_vocab());

  std::string start;
  if (!a.from_ckpt.empty()) {
    if (!fs::is_regular_file(a.from_ckpt))
      throw std::runtime_error("checkpoint not found: " + a.from_ckpt);
    start = a.from_ckpt;
  } else if (a.stage != "a" && !a.fresh) {
    const char* prev = a.stage == "b" ? "stage_a.ckpt" : "stage_b.ckpt";
    const auto cand = fs::path(rc.run_dir) / prev;
    if (!fs::is_regular_file(cand))
      throw std::runtime_error("missing prerequisite checkpoint " + cand.string() +
                               " (pass --from FILE or --fresh)");
    start = cand.string();
  }
  if (!start.empty()) restore_into(bundle, start);

  bb::TrainResult result;
  if (a.stage == "a") {
    std::vector<bb::PackedSequence> packs;
    if (!a.packs_file.empty()) {
      packs = bb::read_packs(a.packs_file);
    } else {
      const auto docs = bb::generate_corpus(rc.corpus);
      auto packed = bb::pack_corpus(docs, bundle.vocab, rc.pack_window);
      for (const auto& skip : packed.skipped)
        std::fprintf(stderr, "skip doc %zu: %s\n", skip.doc, skip.reason.c_str());
      packs = std::move(packed.packs);
    }
    if (a.sample_n > 0) {
      const auto pools = bb::split_pools(packs);
      bb::Rng rng(rc.stage_a.seed);
      packs = bb::sample_mixture(rc.mixture, pools, a.sample_n, rng);
    }
    result = bb::train_stage_a(bundle, packs, rc.stage_a, rc.run_dir);
  } else {
    const auto data = load_or_generate_items(rc, a.data_dir);
    if (a.stage == "b") {
      result = bb::train_stage_b(bundle, data.train, rc.stage_b, rc.run_dir);
    } else if (a.plaintext) {
      result = bb::train_stage_c_plaintext(bundle, data.train, rc.stage_c, rc.run_dir, data.val);
    } else if (rc.task.family == bb::TaskFamily::kBinaryCls ||
               rc.task.family == bb::TaskFamily::kMultiCls) {
      result = bb::train_stage_c_classification(bundle, data.train, rc.stage_c, {}, rc.run_dir,
                                                data.val);
    } else {
      result =
          bb::train_stage_c_generation(bundle, data.train, rc.stage_c, {}, rc.run_dir, data.val);
    }
  }

  json summary{{"stage", a.stage},
               {"steps", result.steps},
               {"first_loss", result.losses.front()},
               {"final_loss", result.losses.back()},
               {"stopped_early", result.stopped_early}};
  if (!result.val_losses.empty()) summary["val_losses"] = result.val_losses;
  write_text_file(rc.run_dir + "/stage_" + a.stage + "_metrics.json", summary.dump(2) + "\n");
  std::printf("stage %s: %zu steps, loss %.6f -> %.6f%s\n", a.stage.c_str(), result.steps,
              result.losses.front(), result.losses.back(),
              result.stopped_early ? " (early stop)" : "");
}

struct EvalArgs {
  std::string task_file;
  std::string ckpt_path;
  std::string config_file;
  std::string out_file;
  std::vector<int> ks = {1, 5, 10};
  bool plaintext = false;
};

void run_eval(const EvalArgs& a) {
  const auto rc = load_config(a.config_file);
  const auto spec = bb::SyntheticTaskSpec::from_json(read_json_file(a.task_file));
  const auto data = bb::generate_synthetic(spec);
  bb::ModelBundle bundle(rc.model, bb::default_text_vocab());
  restore_into(bundle, resolve_ckpt(a.ckpt_path));

  json out{{"task", bb::task_family_name(spec.family)}, {"n_test", data.test.size()}};
  switch (spec.family) {
    case bb::TaskFamily::kRetrievalPairs: {
      std::vector<int> ks;
      for (int k : a.ks)
        if (k >= 1 && static_cast<std::size_t>(k) <= data.test.size()) ks.push_back(k);
      if (ks.empty()) throw std::invalid_argument("no usable k for " +
                                                  std::to_string(data.test.size()) + " test pairs");
      out["retrieval"] = retrieval_json(bb::eval_retrieval_task(bundle, data.test, ks));
      break;
    }
    case bb::TaskFamily::kBinaryCls:
    case bb::TaskFamily::kMultiCls: {
      const auto res = bb::eval_classification_task(bundle, data.test, a.plaintext);
      out["accuracy"] = res.accuracy;
      out["macro_f1"] = res.macro_f1;
      break;
    }
    case bb::TaskFamily::kRegression:
      out["spearman"] = bb::eval_regression_task(bundle, data.test);
      break;
  }
  const auto text = out.dump(2);
  std::printf("%s\n", text.c_str());
  if (!a.out_file.empty()) write_text_file(a.out_file, text + "\n");
}

struct EmbedArgs {
  std::string fasta_file;
  std::string config_file;
  std::string ckpt_path;
  std::string out_dir = "embeddings";
};

void run_embed(const EmbedArgs& a) {
  const auto rc = load_config(a.config_file);
  bb::ModelBundle bundle(rc.model, bb::default_text_vocab());
  if (!a.ckpt_path.empty()) restore_into(bundle, resolve_ckpt(a.ckpt_path));
  const auto recs = bb::read_fasta(a.fasta_file);
  if (recs.empty()) throw std::runtime_error("no sequences in " + a.fasta_file);
  fs::create_directories(a.out_dir);
  const auto path = a.out_dir + "/embeddings.jsonl";
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  for (const auto& rec : recs) {
    json line{{"id", rec.id()}, {"z", latent_rows(bundle, rec.seq)}};
    out << line.dump() << "\n";
  }
  if (!out) throw std::runtime_error("write failed for " + path);
  std::printf("wrote %zu embeddings -> %s\n", recs.size(), path.c_str());
}

struct RetrieveArgs {
  std::string query_text;
  std::string fasta_file;
  std::string index_dir;
  std::string config_file;
  std::string ckpt_path;
  int k = 5;
};

void run_retrieve(const RetrieveArgs& a) {
  const auto rc = load_config(a.config_file);
  bb::ModelBundle bundle(rc.model, bb::default_text_vocab());
  if (!a.ckpt_path.empty()) restore_into(bundle, resolve_ckpt(a.ckpt_path));

  const auto index_path = a.index_dir + "/embeddings.jsonl";
  std::ifstream in(index_path);
  if (!in) throw std::runtime_error("cannot open " + index_path);
  std::vector<std::pair<std::string, std::vector<std::vector<double>>>> index;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = json::parse(line, nullptr, false);
    if (j.is_discarded())
      throw std::invalid_argument("bad JSON at line " + std::to_string(index.size() + 1) + " of " +
                                  index_path);
    index.emplace_back(j.at("id").get<std::string>(),
                       j.at("z").get<std::vector<std::vector<double>>>());
  }
  if (index.empty()) throw std::runtime_error("empty index " + index_path);
  if (a.k < 1) throw std::invalid_argument("k must be at least 1");
  const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(a.k), index.size());

  std::vector<std::pair<std::string, std::vector<std::vector<double>>>> queries;
  if (!a.query_text.empty()) {
    auto zt = bundle.text_embedding(a.query_text);
    queries.emplace_back(a.query_text, std::vector<std::vector<double>>{zt->values});
  } else {
    for (const auto& rec : bb::read_fasta(a.fasta_file))
      queries.emplace_back(rec.id(), latent_rows(bundle, rec.seq));
  }
  if (queries.empty()) throw std::runtime_error("no queries in " + a.fasta_file);

  for (const auto& [label, qrows] : queries) {
    std::vector<std::pair<double, std::size_t>> scored;
    for (std::size_t i = 0; i < index.size(); ++i)
      scored.emplace_back(best_match(index[i].second, qrows), i);
    std::stable_sort(scored.begin(), scored.end(),
                     [](const auto& x, const auto& y) { return x.first > y.first; });
    for (std::size_t r = 0; r < k; ++r) {
      json lineout{{"query", label},
                   {"rank", r + 1},
                   {"id", index[scored[r].second].first},
                   {"score", scored[r].first}};
      std::printf("%s\n", lineout.dump().c_str());
    }
  }
}

struct AblateArgs {
  std::string variant = "all";
  std::string config_file;
  std::string out_dir;
};

void run_ablate(const AblateArgs& a) {
  const auto rc = load_config(a.config_file);
  std::vector<bb::AblationOutcome> outcomes;
  if (a.variant == "all") {
    outcomes = bb::run_ablation(rc, a.out_dir);
  } else {
    const auto v = bb::ablation_from_name(a.variant);
    const std::string dir = a.out_dir.empty() ? "" : a.out_dir + "/" + a.variant;
    outcomes.push_back(bb::run_ablation_variant(v, rc, dir));
  }

  std::printf("%-16s %10s %10s %14s\n", "variant", "accuracy", "macro_f1", "recall@1(p2t)");
  json rows = json::array();
  std::string csv = "variant,accuracy,macro_f1,recall_at_1_p2t\n";
  for (const auto& o : outcomes) {
    const auto it = o.breakdown.find("recall_at_1_p2t");
    const std::string name = bb::ablation_name(o.variant);
    if (it == o.breakdown.end())
      std::printf("%-16s %10.4f %10.4f %14s\n", name.c_str(), o.accuracy, o.macro_f1, "-");
    else
      std::printf("%-16s %10.4f %10.4f %14.4f\n", name.c_str(), o.accuracy, o.macro_f1,
                  it->second);
    rows.push_back({{"variant", name},
                    {"accuracy", o.accuracy},
                    {"macro_f1", o.macro_f1},
                    {"breakdown", o.breakdown}});
    csv += name + "," + std::to_string(o.accuracy) + "," + std::to_string(o.macro_f1) + "," +
           (it == o.breakdown.end() ? std::string() : std::to_string(it->second)) + "\n";
  }
  if (!a.out_dir.empty()) {
    fs::create_directories(a.out_dir);
    write_text_file(a.out_dir + "/ablation.json", rows.dump(2) + "\n");
    write_text_file(a.out_dir + "/ablation.csv", csv);
  }
}

struct GenerateArgs {
  std::string fasta_file;
  std::string config_file;
  std::string ckpt_path;
  std::string out_file;
  int max_new = 32;
};

void run_generate(const GenerateArgs& a) {
  const auto rc = load_config(a.config_file);
  bb::ModelBundle bundle(rc.model, bb::default_text_vocab());
  restore_into(bundle, resolve_ckpt(a.ckpt_path));
  const auto recs = bb::read_fasta(a.fasta_file);
  if (recs.empty()) throw std::runtime_error("no sequences in " + a.fasta_file);
  std::string all;
  for (const auto& rec : recs) {
    json line{{"id", rec.id()},
              {"output", bb::generate_description(bundle, rec.seq, {}, a.max_new)}};
    all += line.dump(-1, ' ', false, json::error_handler_t::replace) + "\n";
  }
  std::printf("%s", all.c_str());
  if (!a.out_file.empty()) write_text_file(a.out_file, all);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"protein-text bridge: corpus packing, staged training, evaluation"};
  app.require_subcommand(1);

  PackArgs pack;
  auto* sc_pack = app.add_subcommand("pack", "tokenize and pack a document corpus");
  sc_pack->add_option("--config", pack.config_file, "run config JSON")->required();
  sc_pack->add_option("--docs", pack.docs_dir, "corpus directory with manifest.json");
  sc_pack->add_option("--out", pack.out_dir, "output directory");
  sc_pack->callback([&] { run_pack(pack); });

  TrainArgs train;
  auto* sc_train = app.add_subcommand("train", "run one training stage");
  sc_train->add_option("--stage", train.stage, "a, b, or c")
      ->required()
      ->check(CLI::IsMember({"a", "b", "c"}));
  sc_train->add_option("--config", train.config_file, "run config JSON")->required();
  sc_train->add_option("--run-dir", train.run_dir, "output directory (overrides config)");
  sc_train->add_option("--from", train.from_ckpt, "checkpoint file to start from");
  sc_train->add_option("--packs", train.packs_file, "packs.jsonl for stage a");
  sc_train->add_option("--data", train.data_dir, "item directory for stages b and c");
  sc_train->add_option("--sample", train.sample_n, "draw this many packs by mixture ratio");
  sc_train->add_flag("--fresh", train.fresh, "start from random weights");
  sc_train->add_flag("--plaintext", train.plaintext, "stage c on raw residue text");
  sc_train->callback([&] { run_train(train); });

  EvalArgs eval;
  auto* sc_eval = app.add_subcommand("eval", "evaluate a checkpoint on a task");
  sc_eval->add_option("--task", eval.task_file, "task spec JSON")->required();
  sc_eval->add_option("--ckpt", eval.ckpt_path, "checkpoint file or run directory")->required();
  sc_eval->add_option("--config", eval.config_file, "run config JSON")->required();
  sc_eval->add_option("--out", eval.out_file, "write metrics JSON here");
  sc_eval->add_option("--k", eval.ks, "recall cutoffs for retrieval");
  sc_eval->add_flag("--plaintext", eval.plaintext, "classify from raw residue text");
  sc_eval->callback([&] { run_eval(eval); });

  EmbedArgs embed;
  auto* sc_embed = app.add_subcommand("embed", "emit protein latents for a FASTA file");
  sc_embed->add_option("--fasta", embed.fasta_file, "input FASTA")->required();
  sc_embed->add_option("--config", embed.config_file, "run config JSON")->required();
  sc_embed->add_option("--ckpt", embed.ckpt_path, "checkpoint file or run directory");
  sc_embed->add_option("--out", embed.out_dir, "output directory");
  sc_embed->callback([&] { run_embed(embed); });

  RetrieveArgs retr;
  auto* sc_retr = app.add_subcommand("retrieve", "rank an embedding index against a query");
  auto* q_opt = sc_retr->add_option("--query", retr.query_text, "free-text query");
  sc_retr->add_option("--fasta", retr.fasta_file, "protein query FASTA")->excludes(q_opt);
  sc_retr->add_option("--index", retr.index_dir, "directory written by embed")->required();
  sc_retr->add_option("--k", retr.k, "results per query");
  sc_retr->add_option("--config", retr.config_file, "run config JSON")->required();
  sc_retr->add_option("--ckpt", retr.ckpt_path, "checkpoint file or run directory");
  sc_retr->callback([&] {
    if (retr.query_text.empty() && retr.fasta_file.empty())
      throw CLI::RequiredError("--query or --fasta");
    run_retrieve(retr);
  });

  AblateArgs ablate;
  auto* sc_ablate = app.add_subcommand("ablate", "train and score pipeline variants");
  sc_ablate->add_option("--variant", ablate.variant, "which variant, or all")
      ->check(CLI::IsMember({"full", "no_pretraining", "no_alignment", "all"}));
  sc_ablate->add_option("--config", ablate.config_file, "run config JSON")->required();
  sc_ablate->add_option("--out", ablate.out_dir, "output directory");
  sc_ablate->callback([&] { run_ablate(ablate); });

  SynthArgs synth;
  auto* sc_synth = app.add_subcommand("synth", "generate a labeled protein-text dataset");
  sc_synth->add_option("--spec", synth.spec_file, "task spec JSON")->required();
  sc_synth->add_option("--out", synth.out_dir, "output directory");
  sc_synth->callback([&] { run_synth(synth); });

  GenerateArgs gen;
  auto* sc_gen = app.add_subcommand("generate", "describe proteins with a trained checkpoint");
  sc_gen->add_option("--fasta", gen.fasta_file, "input FASTA")->required();
  sc_gen->add_option("--config", gen.config_file, "run config JSON")->required();
  sc_gen->add_option("--ckpt", gen.ckpt_path, "checkpoint file or run directory")->required();
  sc_gen->add_option("--max-new", gen.max_new, "token budget per description");
  sc_gen->add_option("--out", gen.out_file, "write JSON lines here");
  sc_gen->callback([&] { run_generate(gen); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "bb: %s\n", e.what());
    return 1;
  }
  return 0;
}
