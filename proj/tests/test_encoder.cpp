#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <vector>

#include "biobridge/encoder.hpp"

namespace {

bb::EncoderConfig tiny_config() {
  bb::EncoderConfig cfg;
  cfg.num_layers = 2;
  cfg.num_heads = 2;
  cfg.model_dim = 16;
  cfg.ff_dim = 32;
  cfg.max_len = 64;
  return cfg;
}

bool same_values(const bb::TensorPtr& a, const bb::TensorPtr& b) {
  if (a->shape != b->shape) return false;
  for (std::size_t i = 0; i < a->numel(); ++i)
    if (a->values[i] != b->values[i]) return false;
  return true;
}

}  // namespace

TEST_CASE("encoder config validation", "[encoder]") {
  bb::EncoderConfig cfg;
  CHECK(cfg.num_layers == 2);
  CHECK(cfg.num_heads == 4);
  CHECK(cfg.model_dim == 64);
  CHECK(cfg.ff_dim == 128);
  CHECK(cfg.max_len == 512);
  CHECK_NOTHROW(cfg.validate());
  cfg.model_dim = 65;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.model_dim = 64;
  cfg.num_layers = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("protein encoder shape and determinism", "[encoder]") {
  bb::Rng rng(41);
  bb::ParamRegistry reg;
  bb::ProteinEncoder enc(reg, "prot_enc", tiny_config(), rng);
  bb::ProteinVocab pv;
  bb::Tape tape;
  auto single = enc.forward(tape, pv.encode("M"));
  CHECK(single->shape == bb::Shape{1, 16});

  auto ids = pv.encode("ACDEFGHIK");
  auto h1 = enc.forward(tape, ids);
  auto h2 = enc.forward(tape, ids);
  CHECK(h1->shape == bb::Shape{9, 16});
  CHECK(same_values(h1, h2));
}

TEST_CASE("protein encoder is position sensitive", "[encoder]") {
  bb::Rng rng(42);
  bb::ParamRegistry reg;
  bb::ProteinEncoder enc(reg, "prot_enc", tiny_config(), rng);
  bb::ProteinVocab pv;
  auto ids = pv.encode("ACDEFGHIKLMN");
  auto swapped = ids;
  std::swap(swapped[2], swapped[7]);
  bb::Tape tape;
  auto h = enc.forward(tape, ids);
  auto hs = enc.forward(tape, swapped);
  CHECK_FALSE(same_values(h, hs));
}

TEST_CASE("protein encoder rejects bad lengths", "[encoder]") {
  bb::Rng rng(43);
  bb::ParamRegistry reg;
  auto cfg = tiny_config();
  cfg.max_len = 8;
  bb::ProteinEncoder enc(reg, "prot_enc", cfg, rng);
  bb::Tape tape;
  CHECK_THROWS_AS(enc.forward(tape, {}), std::invalid_argument);
  std::vector<int> long_ids(9, 0);
  try {
    enc.forward(tape, long_ids);
    FAIL("expected a length error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("8") != std::string::npos);
  }
}

TEST_CASE("text encoder emits a d-dimensional CLS vector", "[encoder]") {
  bb::Rng rng(44);
  bb::ParamRegistry reg;
  bb::TextEncoder enc(reg, "text_enc", tiny_config(), 300, rng);
  bb::Tape tape;
  for (std::size_t len : {1, 3, 10}) {
    std::vector<int> ids(len, 270);
    for (std::size_t i = 0; i < len; ++i) ids[i] = 263 + static_cast<int>(i);
    auto z = enc.forward(tape, ids);
    CHECK(z->shape == bb::Shape{16});
  }
  CHECK_THROWS_AS(enc.forward(tape, {}), std::invalid_argument);
}

TEST_CASE("text encoder separates random texts", "[encoder]") {
  bb::Rng rng(45);
  bb::ParamRegistry reg;
  bb::TextEncoder enc(reg, "text_enc", tiny_config(), 300, rng);
  bb::Tape tape;
  for (int pair = 0; pair < 100; ++pair) {
    std::vector<int> a(static_cast<std::size_t>(rng.range(1, 12)));
    std::vector<int> b(static_cast<std::size_t>(rng.range(1, 12)));
    for (auto& id : a) id = rng.range(7, 299);
    for (auto& id : b) id = rng.range(7, 299);
    if (a == b) continue;
    CHECK_FALSE(same_values(enc.forward(tape, a), enc.forward(tape, b)));
  }
  std::vector<int> same = {270, 271, 272};
  CHECK(same_values(enc.forward(tape, same), enc.forward(tape, same)));
}

TEST_CASE("text encoder is order sensitive", "[encoder]") {
  bb::Rng rng(46);
  bb::ParamRegistry reg;
  bb::TextEncoder enc(reg, "text_enc", tiny_config(), 300, rng);
  bb::Tape tape;
  std::vector<int> ids = {263, 264, 265, 266, 267};
  std::vector<int> shuffled = {265, 263, 267, 266, 264};
  CHECK_FALSE(same_values(enc.forward(tape, ids), enc.forward(tape, shuffled)));
}

TEST_CASE("freezing pins the fingerprint while training moves an unfrozen copy", "[encoder]") {
  bb::ProteinVocab pv;
  auto ids = pv.encode("ACDEFGHIKL");
  auto run_steps = [&](bool freeze_first, int steps) {
    bb::Rng rng(47);
    bb::ParamRegistry reg;
    bb::ProteinEncoder enc(reg, "prot_enc", tiny_config(), rng);
    if (freeze_first) enc.freeze();
    const auto before = bb::fingerprint(reg, "prot_enc.");
    for (int s = 0; s < steps; ++s) {
      reg.zero_grads();
      bb::Tape tape;
      auto h = enc.forward(tape, ids);
      auto loss = bb::mean_all(tape, bb::mul(tape, h, h));
      if (loss->requires_grad) tape.backward(loss);
      for (auto& [name, p] : reg.with_prefix("prot_enc.")) {
        if (!p->requires_grad) continue;
        for (std::size_t i = 0; i < p->numel(); ++i) p->values[i] -= 0.05 * p->grad[i];
      }
    }
    return std::make_pair(before, bb::fingerprint(reg, "prot_enc."));
  };
  auto [frozen_before, frozen_after] = run_steps(true, 10);
  CHECK(frozen_before == frozen_after);
  auto [live_before, live_after] = run_steps(false, 10);
  CHECK(live_before != live_after);
  CHECK(frozen_before == live_before);
}

TEST_CASE("frozen encoder still feeds values downstream", "[encoder]") {
  bb::Rng rng(48);
  bb::ParamRegistry reg;
  bb::ProteinEncoder enc(reg, "prot_enc", tiny_config(), rng);
  enc.freeze();
  bb::ProteinVocab pv;
  bb::Tape tape;
  auto h = enc.forward(tape, pv.encode("ACDE"));
  CHECK_FALSE(h->requires_grad);
  auto probe = bb::make_tensor({4, 16}, true);
  for (auto& v : probe->values) v = 0.1;
  auto loss = bb::mean_all(tape, bb::mul(tape, h, probe));
  tape.backward(loss);
  double total = 0.0;
  for (double g : probe->grad) total += std::abs(g);
  CHECK(total > 0.0);
}

TEST_CASE("checkpoints round trip bitwise", "[encoder]") {
  bb::Rng rng(49);
  bb::ParamRegistry reg;
  bb::ProteinEncoder enc(reg, "prot_enc", tiny_config(), rng);
  bb::TextEncoder text(reg, "text_enc", tiny_config(), 300, rng);
  const std::string path = "encoder_roundtrip.ckpt";
  bb::save_checkpoint(path, reg);

  auto loaded = bb::load_checkpoint(path);
  CHECK(loaded.size() == reg.params.size());

  bb::Rng rng2(999);
  bb::ParamRegistry reg2;
  bb::ProteinEncoder enc2(reg2, "prot_enc", tiny_config(), rng2);
  bb::TextEncoder text2(reg2, "text_enc", tiny_config(), 300, rng2);
  CHECK(bb::fingerprint(reg2) != bb::fingerprint(reg));
  bb::restore_params(reg2, loaded);
  CHECK(bb::fingerprint(reg2) == bb::fingerprint(reg));

  bb::ProteinVocab pv;
  bb::Tape tape;
  auto ids = pv.encode("MKVACD");
  CHECK(same_values(enc.forward(tape, ids), enc2.forward(tape, ids)));
  std::remove(path.c_str());
}

TEST_CASE("checkpoint loading rejects damage", "[encoder]") {
  CHECK_THROWS_AS(bb::load_checkpoint("missing.ckpt"), std::runtime_error);
  {
    std::ofstream bad("bad_magic.ckpt", std::ios::binary);
    bad << "not-a-checkpoint\n";
  }
  CHECK_THROWS_AS(bb::load_checkpoint("bad_magic.ckpt"), std::invalid_argument);
  std::remove("bad_magic.ckpt");

  bb::ParamRegistry reg;
  auto p = reg.create("layer.w", {2, 2});
  p->values = {1, 2, 3, 4};
  bb::save_checkpoint("small.ckpt", reg);
  auto loaded = bb::load_checkpoint("small.ckpt");

  bb::ParamRegistry wrong_shape;
  wrong_shape.create("layer.w", {4, 1});
  CHECK_THROWS_AS(bb::restore_params(wrong_shape, loaded), std::invalid_argument);
  bb::ParamRegistry extra;
  extra.create("layer.w", {2, 2});
  extra.create("layer.b", {2});
  CHECK_THROWS_AS(bb::restore_params(extra, loaded), std::invalid_argument);
  std::remove("small.ckpt");
}

TEST_CASE("fingerprint reacts to any value change", "[encoder]") {
  bb::ParamRegistry reg;
  auto p = reg.create("m.w", {3});
  p->values = {1.0, 2.0, 3.0};
  const auto base = bb::fingerprint(reg);
  p->values[1] = 2.0000000001;
  CHECK(bb::fingerprint(reg) != base);
  p->values[1] = 2.0;
  CHECK(bb::fingerprint(reg) == base);
  CHECK(bb::fingerprint(reg, "other.") != bb::fingerprint(reg, "m."));
}
