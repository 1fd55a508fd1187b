#include <catch2/catch_amalgamated.hpp>

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "biobridge/train.hpp"

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("bbtrain_" + std::to_string(getpid()) + "_" +
            std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

bb::ModelConfig tiny_model() {
  bb::ModelConfig c;
  c.prot_enc = {1, 2, 16, 32, 64};
  c.text_enc = {1, 2, 16, 32, 64};
  c.qformer.num_queries = 2;
  c.qformer.depth = 1;
  c.qformer.num_heads = 2;
  c.qformer.model_dim = 16;
  c.qformer.ff_dim = 32;
  c.lm = {1, 2, 16, 32, 160};
  c.num_classes = 2;
  return c;
}

std::vector<bb::SyntheticItem> tiny_pairs(std::size_t n, std::uint64_t seed = 31) {
  bb::SyntheticTaskSpec spec;
  spec.family = bb::TaskFamily::kBinaryCls;
  spec.seed = seed;
  spec.n_train = n;
  spec.n_test = 1;
  spec.min_len = 12;
  spec.max_len = 24;
  return bb::generate_synthetic(spec).train;
}

std::vector<bb::PackedSequence> tiny_packs(const bb::TextVocab& vocab) {
  bb::CorpusSpec spec;
  spec.docs_per_source = 2;
  auto docs = bb::generate_corpus(spec);
  auto packed = bb::pack_corpus(docs, vocab, 128);
  REQUIRE(packed.skipped.empty());
  REQUIRE_FALSE(packed.packs.empty());
  return packed.packs;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bb::StageConfig stage_cfg(bb::Stage stage, double lr, int epochs, int batch, std::uint64_t seed) {
  bb::StageConfig cfg;
  cfg.stage = stage;
  cfg.learning_rate = lr;
  cfg.epochs = epochs;
  cfg.batch_size = batch;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("sgd and adam follow hand-computed update rules", "[train]") {
  SECTION("sgd with momentum") {
    bb::ParamRegistry reg;
    auto p = reg.create("w", {2});
    p->values = {1.0, 2.0};
    bb::OptimConfig oc;
    oc.momentum = 0.5;
    bb::Optimizer opt(reg.with_prefix(""), oc, 0.1);

    double v0 = 0.0, v1 = 0.0, x0 = 1.0, x1 = 2.0;
    for (int step = 0; step < 3; ++step) {
      p->grad = {0.5, -1.0};
      opt.step();
      v0 = 0.5 * v0 + 0.5;
      v1 = 0.5 * v1 - 1.0;
      x0 -= 0.1 * v0;
      x1 -= 0.1 * v1;
      REQUIRE(p->values[0] == Catch::Approx(x0).margin(1e-15));
      REQUIRE(p->values[1] == Catch::Approx(x1).margin(1e-15));
    }
  }
  SECTION("adam with bias correction") {
    bb::ParamRegistry reg;
    auto p = reg.create("w", {1});
    p->values = {0.3};
    bb::OptimConfig oc;
    oc.kind = bb::OptKind::kAdam;
    bb::Optimizer opt(reg.with_prefix(""), oc, 0.01);

    double m = 0.0, v = 0.0, x = 0.3;
    const double g = 0.7;
    for (int step = 1; step <= 4; ++step) {
      p->grad = {g};
      opt.step();
      m = 0.9 * m + 0.1 * g;
      v = 0.999 * v + 0.001 * g * g;
      const double mhat = m / (1.0 - std::pow(0.9, step));
      const double vhat = v / (1.0 - std::pow(0.999, step));
      x -= 0.01 * mhat / (std::sqrt(vhat) + 1e-8);
      REQUIRE(p->values[0] == Catch::Approx(x).margin(1e-15));
    }
  }
  SECTION("negative learning rate is rejected") {
    bb::ParamRegistry reg;
    reg.create("w", {1});
    REQUIRE_THROWS_AS(bb::Optimizer(reg.with_prefix(""), bb::OptimConfig{}, -0.1),
                      std::invalid_argument);
  }
}

TEST_CASE("trainable parameter selection respects prefixes and freezes", "[train]") {
  bb::ModelBundle bundle(tiny_model(), bb::default_text_vocab());

  auto picked = bb::trainable_params(bundle.reg, {"lm.", "qformer."}, {});
  REQUIRE_FALSE(picked.empty());
  std::set<std::string> names;
  for (const auto& [name, p] : picked) {
    names.insert(name);
    REQUIRE((name.rfind("lm.", 0) == 0 || name.rfind("qformer.", 0) == 0));
    REQUIRE(p->requires_grad);
  }
  REQUIRE(names.count("lm.embedding") == 1);
  REQUIRE(names.count("qformer.query_bank") == 1);

  // The frozen protein encoder never yields trainables.
  REQUIRE(bb::trainable_params(bundle.reg, {"prot_enc."}, {}).empty());

  auto without = bb::trainable_params(bundle.reg, {"lm.", "qformer."}, {"lm.embedding"});
  std::set<std::string> reduced;
  for (const auto& [name, p] : without) reduced.insert(name);
  REQUIRE(reduced.count("lm.embedding") == 0);
  REQUIRE(reduced.size() == names.size() - 1);

  REQUIRE_THROWS_AS(bb::trainable_params(bundle.reg, {"lm."}, {"nonexistent."}),
                    std::invalid_argument);
}

TEST_CASE("batching partitions the data and merges lone tails", "[train]") {
  bb::Rng rng(77);
  for (auto [n, bs] : std::vector<std::pair<std::size_t, std::size_t>>{
           {9, 4}, {8, 8}, {7, 2}, {5, 5}, {12, 5}, {2, 1}}) {
    auto batches = bb::detail::make_batches(n, bs, rng, true);
    std::set<std::size_t> seen;
    for (const auto& batch : batches) {
      REQUIRE(batch.size() >= 2);
      for (auto idx : batch) REQUIRE(seen.insert(idx).second);
    }
    REQUIRE(seen.size() == n);
  }
  auto plain = bb::detail::make_batches(9, 4, rng, false);
  REQUIRE(plain.size() == 3);
  REQUIRE(plain.back().size() == 1);
  auto merged = bb::detail::make_batches(9, 4, rng, true);
  REQUIRE(merged.size() == 2);
  REQUIRE(merged.back().size() == 5);
}

TEST_CASE("zero learning rate leaves every parameter untouched", "[train]") {
  bb::ModelBundle bundle(tiny_model(), bb::default_text_vocab());
  auto pairs = tiny_pairs(6);
  const auto before = bb::fingerprint(bundle.reg);

  auto cfg_b = stage_cfg(bb::Stage::kB, 0.0, 2, 4, 5);
  bb::train_stage_b(bundle, pairs, cfg_b);
  REQUIRE(bb::fingerprint(bundle.reg) == before);

  auto cfg_c = stage_cfg(bb::Stage::kC, 0.0, 1, 4, 5);
  bb::train_stage_c_classification(bundle, pairs, cfg_c);
  REQUIRE(bb::fingerprint(bundle.reg) == before);

  auto packs = tiny_packs(bundle.vocab);
  auto cfg_a = stage_cfg(bb::Stage::kA, 0.0, 1, 4, 5);
  bb::train_stage_a(bundle, packs, cfg_a);
  REQUIRE(bb::fingerprint(bundle.reg) == before);
}

TEST_CASE("alignment training drives the loss down on a small set", "[train]") {
  bb::ModelBundle bundle(tiny_model(), bb::default_text_vocab());
  auto pairs = tiny_pairs(8);
  auto cfg = stage_cfg(bb::Stage::kB, 0.02, 30, 8, 6);
  auto result = bb::train_stage_b(bundle, pairs, cfg);
  REQUIRE(result.steps == 30);
  REQUIRE(result.losses.size() == 30);
  for (double l : result.losses) REQUIRE(std::isfinite(l));
  REQUIRE(result.losses.back() < result.losses.front());
}

TEST_CASE("each stage touches only its own parameters", "[train]") {
  bb::ModelBundle bundle(tiny_model(), bb::default_text_vocab());
  auto pairs = tiny_pairs(6);
  auto packs = tiny_packs(bundle.vocab);

  const auto fp = [&](const char* prefix) { return bb::fingerprint(bundle.reg, prefix); };
  const auto prot0 = fp("prot_enc.");
  const auto lm0 = fp("lm.");
  const auto qf0 = fp("qformer.");
  const auto text0 = fp("text_enc.");
  const auto proj0 = fp("projector.");
  const auto cls0 = fp("cls_head.");

  bb::train_stage_b(bundle, pairs, stage_cfg(bb::Stage::kB, 0.05, 3, 6, 7));
  REQUIRE(fp("prot_enc.") == prot0);
  REQUIRE(fp("lm.") == lm0);
  REQUIRE(fp("projector.") == proj0);
  REQUIRE(fp("cls_head.") == cls0);
  REQUIRE(fp("qformer.") != qf0);
  REQUIRE(fp("text_enc.") != text0);

  const auto qf1 = fp("qformer.");
  const auto text1 = fp("text_enc.");
  bb::train_stage_a(bundle, packs, stage_cfg(bb::Stage::kA, 0.05, 1, 8, 7));
  REQUIRE(fp("prot_enc.") == prot0);
  REQUIRE(fp("qformer.") == qf1);
  REQUIRE(fp("text_enc.") == text1);
  REQUIRE(fp("projector.") == proj0);
  REQUIRE(fp("cls_head.") == cls0);
  REQUIRE(fp("lm.") != lm0);

  const auto lm1 = fp("lm.");
  bb::train_stage_c_classification(bundle, pairs, stage_cfg(bb::Stage::kC, 0.05, 2, 6, 7));
  REQUIRE(fp("prot_enc.") == prot0);
  REQUIRE(fp("qformer.") == qf1);
  REQUIRE(fp("text_enc.") == text1);
  REQUIRE(fp("lm.") != lm1);
  REQUIRE(fp("projector.") != proj0);
  REQUIRE(fp("cls_head.") != cls0);

  const auto qf2 = fp("qformer.");
  const auto proj2 = fp("projector.");
  bb::train_stage_c_plaintext(bundle, pairs, stage_cfg(bb::Stage::kC, 0.05, 1, 6, 7));
  REQUIRE(fp("prot_enc.") == prot0);
  REQUIRE(fp("qformer.") == qf2);
  REQUIRE(fp("projector.") == proj2);
  REQUIRE(fp("text_enc.") == text1);
}

TEST_CASE("generation stage memorizes and the loss falls", "[train]") {
  bb::ModelBundle bundle(tiny_model(), bb::default_text_vocab());
  auto items = tiny_pairs(2, 41);
  auto cfg = stage_cfg(bb::Stage::kC, 0.05, 20, 2, 8);
  auto result = bb::train_stage_c_generation(bundle, items, cfg);
  REQUIRE(result.losses.back() < result.losses.front());

  const double exact = bb::eval_generation_exact(bundle, items, {}, 48);
  REQUIRE(exact >= 0.0);
  REQUIRE(exact <= 1.0);
  auto text = bb::generate_description(bundle, items[0].sequence, {}, 8);
  REQUIRE(text.size() < 400);
}

TEST_CASE("evaluation helpers run on an untrained bundle", "[train]") {
  bb::ModelBundle bundle(tiny_model(), bb::default_text_vocab());
  auto items = tiny_pairs(5, 43);

  auto latents = bundle.protein_latents(items[0].sequence);
  REQUIRE(latents->shape == bb::Shape{2, 16});
  auto zt = bundle.text_embedding(items[0].description);
  REQUIRE(zt->numel() == 16);

  auto retrieval = bb::eval_retrieval_task(bundle, items, {1, 5});
  REQUIRE(retrieval.protein_to_text.at(5) == 1.0);
  REQUIRE(retrieval.protein_to_text.at(1) >= 0.0);

  for (const auto& item : items) {
    const int pred = bb::classify_item(bundle, item.sequence);
    REQUIRE(pred >= 0);
    REQUIRE(pred < 2);
  }
  auto cls = bb::eval_classification_task(bundle, items);
  REQUIRE(cls.accuracy >= 0.0);
  REQUIRE(cls.accuracy <= 1.0);
  auto plain = bb::eval_classification_task(bundle, items, true);
  REQUIRE(plain.accuracy >= 0.0);

  REQUIRE_THROWS_AS(bb::eval_retrieval_task(bundle, {items[0]}, {1}), std::invalid_argument);
}

TEST_CASE("non-finite losses abort with the failing step", "[train]") {
  bb::ModelBundle bundle(tiny_model(), bb::default_text_vocab());
  for (auto& v : bundle.reg.at("lm.embedding")->values) v = std::nan("");
  auto packs = tiny_packs(bundle.vocab);
  REQUIRE_THROWS_WITH(bb::train_stage_a(bundle, packs, stage_cfg(bb::Stage::kA, 0.01, 1, 4, 9)),
                      Catch::Matchers::ContainsSubstring("non-finite loss at step 0"));

  bb::ModelBundle bundle2(tiny_model(), bb::default_text_vocab());
  bundle2.reg.at("qformer.query_bank")->values[3] = std::nan("");
  REQUIRE_THROWS_WITH(
      bb::train_stage_b(bundle2, tiny_pairs(4), stage_cfg(bb::Stage::kB, 0.01, 1, 4, 9)),
      Catch::Matchers::ContainsSubstring("non-finite loss at step 0"));
}

TEST_CASE("identical seeds reproduce checkpoints bit for bit", "[train]") {
  TempDir tmp;
  auto run = [&](const std::string& sub) {
    bb::ModelBundle bundle(tiny_model(), bb::default_text_vocab());
    auto pairs = tiny_pairs(6);
    const auto dir = tmp.file(sub);
    auto rb = bb::train_stage_b(bundle, pairs, stage_cfg(bb::Stage::kB, 0.02, 3, 6, 17), dir);
    auto rc = bb::train_stage_c_classification(bundle, pairs,
                                               stage_cfg(bb::Stage::kC, 0.02, 2, 6, 18), {}, dir);
    return std::tuple{bb::fingerprint(bundle.reg), rb.losses, rc.losses};
  };
  auto [fp1, lb1, lc1] = run("one");
  auto [fp2, lb2, lc2] = run("two");
  REQUIRE(fp1 == fp2);
  REQUIRE(lb1 == lb2);
  REQUIRE(lc1 == lc2);
  REQUIRE(slurp(tmp.file("one/stage_b.ckpt")) == slurp(tmp.file("two/stage_b.ckpt")));
  REQUIRE(slurp(tmp.file("one/stage_c.ckpt")) == slurp(tmp.file("two/stage_c.ckpt")));
  REQUIRE(slurp(tmp.file("one/stage_b_loss.csv")) == slurp(tmp.file("two/stage_b_loss.csv")));

  const auto csv = slurp(tmp.file("one/stage_b_loss.csv"));
  REQUIRE(csv.rfind("step,loss\n", 0) == 0);
  REQUIRE(std::count(csv.begin(), csv.end(), '\n') == 4);

  auto loaded = bb::load_checkpoint(tmp.file("one/stage_c.ckpt"));
  bb::ModelBundle probe(tiny_model(), bb::default_text_vocab());
  REQUIRE(loaded.size() == probe.reg.params.size());
}

TEST_CASE("pretraining and alignment leave disjoint footprints", "[train]") {
  auto pairs = tiny_pairs(6);

  bb::ModelBundle with_a(tiny_model(), bb::default_text_vocab());
  auto packs = tiny_packs(with_a.vocab);
  bb::train_stage_a(with_a, packs, stage_cfg(bb::Stage::kA, 0.05, 1, 8, 21));
  bb::train_stage_b(with_a, pairs, stage_cfg(bb::Stage::kB, 0.02, 2, 6, 22));

  bb::ModelBundle without_a(tiny_model(), bb::default_text_vocab());
  bb::train_stage_b(without_a, pairs, stage_cfg(bb::Stage::kB, 0.02, 2, 6, 22));

  auto diff = bb::checkpoint_diff(with_a.reg, without_a.reg);
  REQUIRE_FALSE(diff.empty());
  for (const auto& name : diff) REQUIRE(name.rfind("lm.", 0) == 0);
}

TEST_CASE("run config survives a file round trip", "[train]") {
  TempDir tmp;
  bb::RunConfig rc;
  rc.model = tiny_model();
  rc.stage_b.learning_rate = 0.02;
  rc.stage_b.epochs = 7;
  rc.stage_b.loss_weights = {{"ptc", 1.0}, {"ptm", 0.5}};
  rc.stage_c.optim.kind = bb::OptKind::kAdam;
  rc.task.family = bb::TaskFamily::kBinaryCls;
  rc.task.n_train = 24;
  rc.pack_window = 128;
  rc.run_dir = "runs/tiny";
  rc.validate();

  const auto path = tmp.file("run.json");
  rc.save(path);
  auto back = bb::RunConfig::from_file(path);
  REQUIRE(back.model.lm.model_dim == 16);
  REQUIRE(back.model.qformer.num_queries == 2);
  REQUIRE(back.stage_b.learning_rate == 0.02);
  REQUIRE(back.stage_b.epochs == 7);
  REQUIRE(back.stage_b.loss_weights.at("ptm") == 0.5);
  REQUIRE(back.stage_c.optim.kind == bb::OptKind::kAdam);
  REQUIRE(back.task.family == bb::TaskFamily::kBinaryCls);
  REQUIRE(back.task.n_train == 24);
  REQUIRE(back.pack_window == 128);
  REQUIRE(back.run_dir == "runs/tiny");
  REQUIRE(back.stage_a.stage == bb::Stage::kA);
  REQUIRE(back.stage_c.stage == bb::Stage::kC);

  std::ofstream bad(tmp.file("bad.json"));
  bad << "{ not json";
  bad.close();
  REQUIRE_THROWS_AS(bb::RunConfig::from_file(tmp.file("bad.json")), std::invalid_argument);
  REQUIRE_THROWS_AS(bb::RunConfig::from_file(tmp.file("missing.json")), std::runtime_error);

  bb::RunConfig bad_window = rc;
  bad_window.pack_window = 10000;
  REQUIRE_THROWS_AS(bad_window.validate(), std::invalid_argument);
}

TEST_CASE("ablation variants share data and produce comparable outcomes", "[train]") {
  bb::RunConfig rc;
  rc.model = tiny_model();
  rc.task.family = bb::TaskFamily::kBinaryCls;
  rc.task.seed = 51;
  rc.task.n_train = 8;
  rc.task.n_val = 0;
  rc.task.n_test = 4;
  rc.task.min_len = 12;
  rc.task.max_len = 24;
  rc.corpus.docs_per_source = 2;
  rc.pack_window = 128;
  rc.stage_a = stage_cfg(bb::Stage::kA, 0.02, 1, 8, 61);
  rc.stage_b = stage_cfg(bb::Stage::kB, 0.02, 2, 8, 62);
  rc.stage_c = stage_cfg(bb::Stage::kC, 0.02, 2, 8, 63);

  auto outcomes = bb::run_ablation(rc);
  REQUIRE(outcomes.size() == 3);
  REQUIRE(outcomes[0].variant == bb::AblationVariant::kFull);
  REQUIRE(outcomes[1].variant == bb::AblationVariant::kNoPretraining);
  REQUIRE(outcomes[2].variant == bb::AblationVariant::kNoAlignment);
  for (const auto& out : outcomes) {
    REQUIRE(out.accuracy >= 0.0);
    REQUIRE(out.accuracy <= 1.0);
    REQUIRE(out.macro_f1 >= 0.0);
    REQUIRE(out.macro_f1 <= 1.0);
  }
  REQUIRE(outcomes[0].breakdown.count("recall_at_1_p2t") == 1);
  REQUIRE(outcomes[1].breakdown.count("recall_at_1_p2t") == 1);
  REQUIRE(outcomes[2].breakdown.empty());

  REQUIRE(bb::ablation_from_name("no_alignment") == bb::AblationVariant::kNoAlignment);
  REQUIRE(std::string(bb::ablation_name(bb::AblationVariant::kNoPretraining)) ==
          "no_pretraining");
  REQUIRE_THROWS_AS(bb::ablation_from_name("sideways"), std::invalid_argument);
}

TEST_CASE("model bundle validates cross-component dimensions", "[train]") {
  auto cfg = tiny_model();
  cfg.qformer.model_dim = 8;
  REQUIRE_THROWS_AS(bb::ModelBundle(cfg, bb::default_text_vocab()), std::invalid_argument);
  auto cfg2 = tiny_model();
  cfg2.num_classes = 1;
  REQUIRE_THROWS_AS(bb::ModelBundle(cfg2, bb::default_text_vocab()), std::invalid_argument);
}
