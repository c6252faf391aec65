#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>

#include "doctest.h"
#include "fmkit/checkpoint.hpp"
#include "fmkit/config.hpp"
#include "fmkit/io_util.hpp"
#include "fmkit/model.hpp"
#include "testutil.hpp"

using namespace fmkit;
using testutil::fd_check;
using testutil::max_abs_diff;

static ModelConfig tiny_cfg(Variant v = Variant::PN_BiMamba) {
  ModelConfig cfg;
  cfg.C_in = 8;
  cfg.D = 8;
  cfg.head_hidden = 6;
  cfg.seed = 42;
  cfg.block.variant = v;
  cfg.block.n_blocks = 1;
  cfg.block.expand = 2;   // E = 16
  cfg.block.n_state = 4;
  cfg.block.conformer_conv_k = 5;
  cfg.block.mhsa_heads = 2;
  cfg.block.dropout = 0.0;
  return cfg;
}

TEST_CASE("crc32 known vector") {
  const char* s = "123456789";
  CHECK_EQ(crc32(s, 9), 0xCBF43926u);
  CHECK_EQ(crc32(s, 0), 0x00000000u);
}

TEST_CASE("byte writer/reader round-trip and truncation") {
  ByteWriter w;
  w.u16(0xBEEF);
  w.u32(0xDEADBEEFu);
  w.u64(0x0123456789ABCDEFull);
  w.f64(-1.5e-300);
  w.str("hello");
  ByteReader r(w.buf.data(), w.buf.size());
  CHECK_EQ(r.u16(), 0xBEEF);
  CHECK_EQ(r.u32(), 0xDEADBEEFu);
  CHECK_EQ(r.u64(), 0x0123456789ABCDEFull);
  CHECK_EQ(r.f64(), -1.5e-300);
  CHECK_EQ(r.str(), "hello");
  CHECK_EQ(r.remaining(), 0u);

  ByteReader shortr(w.buf.data(), 3);
  shortr.u16();
  CHECK_THROWS_AS(shortr.u32(), std::runtime_error);
}

TEST_CASE("project: identity and zero weights") {
  ModelConfig cfg = tiny_cfg();
  Model m = make_model(cfg);
  // identity W, zero b, C == D
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) m.proj_w.value.at(i, j) = i == j ? 1.0 : 0.0;
  for (double& v : m.proj_b.value.data) v = 0.0;
  Rng rng(7);
  Tensor x = randn({5, 8}, rng);
  Tape t(false);
  Var y = project(m, t.constant(x));
  CHECK_LT(max_abs_diff(t.val(y), x), 1e-15);

  for (double& v : m.proj_w.value.data) v = 0.0;
  Tape t2(false);
  Var y2 = project(m, t2.constant(x));
  for (double v : t2.val(y2).data) CHECK_EQ(v, 0.0);
}

TEST_CASE("project: random case against plain matmul oracle") {
  ModelConfig cfg = tiny_cfg();
  cfg.C_in = 5;
  cfg.D = 8;
  Model m = make_model(cfg);
  Rng rng(11);
  Tensor x = randn({9, 5}, rng);
  Tensor want({9, 8});
  for (int i = 0; i < 9; ++i)
    for (int j = 0; j < 8; ++j) {
      double acc = m.proj_b.value.at(j);
      for (int k = 0; k < 5; ++k) acc += x.at(i, k) * m.proj_w.value.at(k, j);
      want.at(i, j) = acc;
    }
  Tape t(false);
  Tensor got = t.val(project(m, t.constant(x)));
  CHECK_LT(max_abs_diff(got, want), 1e-12);
}

TEST_CASE("project: channel mismatch throws") {
  Model m = make_model(tiny_cfg());
  Tape t(false);
  Tensor x({3, 5});
  CHECK_THROWS_AS(project(m, t.constant(x)), std::invalid_argument);
}

TEST_CASE("attention_pool: zero w gives the temporal mean") {
  Model m = make_model(tiny_cfg());
  for (double& v : m.pool_w.value.data) v = 0.0;
  m.pool_b.value.at(0) = 0.3;  // constant bias must not matter
  Rng rng(3);
  Tensor h = randn({7, 8}, rng);
  Tape t(false);
  Tensor su = t.val(attention_pool(m, t.constant(h)));
  for (int d = 0; d < 8; ++d) {
    double mean = 0.0;
    for (int i = 0; i < 7; ++i) mean += h.at(i, d);
    mean /= 7.0;
    CHECK_LT(std::fabs(su.at(0, d) - mean), 1e-12);
  }
}

TEST_CASE("attention_pool: T=1 returns the single frame for any w") {
  Model m = make_model(tiny_cfg());
  Rng rng(5);
  m.pool_w.value = randn({8, 1}, rng, 3.0);
  m.pool_b.value.at(0) = -2.0;
  Tensor h = randn({1, 8}, rng);
  Tape t(false);
  Tensor su = t.val(attention_pool(m, t.constant(h)));
  CHECK_LT(max_abs_diff(su, h), 1e-15);
}

TEST_CASE("attention_pool: +50 score offset saturates onto that frame") {
  Model m = make_model(tiny_cfg());
  // w picks channel 0, so a +50 bump in h[tau][0] lifts that frame's score by 50
  for (double& v : m.pool_w.value.data) v = 0.0;
  m.pool_w.value.at(0, 0) = 1.0;
  m.pool_b.value.at(0) = 0.0;
  Rng rng(9);
  Tensor h = randn({6, 8}, rng);
  for (int i = 0; i < 6; ++i) h.at(i, 0) = 0.0;
  const int tau = 2;
  h.at(tau, 0) = 50.0;
  Tape t(false);
  Tensor su = t.val(attention_pool(m, t.constant(h)));
  for (int d = 0; d < 8; ++d) CHECK_LT(std::fabs(su.at(0, d) - h.at(tau, d)), 1e-12);
}

TEST_CASE("attention_pool: convexity, coordinates inside [min, max] over time") {
  Model m = make_model(tiny_cfg());
  Rng rng(13);
  for (int rep = 0; rep < 20; ++rep) {
    m.pool_w.value = randn({8, 1}, rng, 2.0);
    Tensor h = randn({11, 8}, rng);
    Tape t(false);
    Tensor su = t.val(attention_pool(m, t.constant(h)));
    for (int d = 0; d < 8; ++d) {
      double lo = h.at(0, d), hi = h.at(0, d);
      for (int i = 1; i < 11; ++i) {
        lo = std::min(lo, h.at(i, d));
        hi = std::max(hi, h.at(i, d));
      }
      CHECK_GE(su.at(0, d), lo - 1e-12);
      CHECK_LE(su.at(0, d), hi + 1e-12);
    }
  }
}

TEST_CASE("classify: zero weights give the output bias as logits") {
  Model m = make_model(tiny_cfg());
  for (double& v : m.head_w1.value.data) v = 0.0;
  for (double& v : m.head_w2.value.data) v = 0.0;
  m.head_b2.value.at(0) = 0.25;
  m.head_b2.value.at(1) = -1.75;
  Rng rng(17);
  Tensor su = randn({1, 8}, rng);
  Tape t(false);
  Tensor logits = t.val(classify(m, t.constant(su)));
  CHECK_EQ(logits.at(0, 0), 0.25);
  CHECK_EQ(logits.at(0, 1), -1.75);
}

TEST_CASE("classify: score strictly monotone in the fake-unit bias") {
  Model m = make_model(tiny_cfg());
  Rng rng(19);
  Tensor x = randn({4, 8}, rng);
  double prev = -1e300;
  for (double b = -2.0; b <= 2.0; b += 0.5) {
    m.head_b2.value.at(1) = b;
    Prediction p = model_forward(m, x);
    CHECK_GT(p.score, prev);
    prev = p.score;
  }
}

TEST_CASE("model_forward: shape contract holds for T in {1, 9, 208}") {
  for (Variant v : {Variant::PN_BiMamba, Variant::TransBiMamba, Variant::ConBiMamba}) {
    Model m = make_model(tiny_cfg(v));
    Rng rng(23);
    for (int T : {1, 9, 208}) {
      Tensor x = randn({T, 8}, rng);
      Prediction p = model_forward(m, x);
      CHECK_EQ(p.logits.shape, std::vector<int>{2});
      CHECK(std::isfinite(p.score));
      CHECK_EQ(p.score, p.logits.at(1) - p.logits.at(0));
    }
  }
}

TEST_CASE("model_forward: deterministic under a fixed seed") {
  ModelConfig cfg = tiny_cfg();
  Model a = make_model(cfg);
  Model b = make_model(cfg);
  Rng rng(29);
  Tensor x = randn({12, 8}, rng);
  Prediction pa = model_forward(a, x);
  Prediction pb = model_forward(b, x);
  CHECK_EQ(pa.score, pb.score);
  CHECK_EQ(pa.logits.at(0), pb.logits.at(0));
  CHECK_EQ(pa.logits.at(1), pb.logits.at(1));
}

TEST_CASE("disable_pooling equals attention pooling with w = 0") {
  ModelConfig cfg = tiny_cfg();
  Model m = make_model(cfg);
  for (double& v : m.pool_w.value.data) v = 0.0;
  m.pool_b.value.at(0) = 0.0;
  Rng rng(31);
  Tensor x = randn({10, 8}, rng);
  Prediction attn = model_forward(m, x);
  m.cfg.block.ablation.disable_pooling = true;
  Prediction mean = model_forward(m, x);
  CHECK_LT(std::fabs(attn.score - mean.score), 1e-12);
  CHECK_LT(std::fabs(attn.logits.at(0) - mean.logits.at(0)), 1e-12);
}

TEST_CASE("model gradcheck on the tiny config") {
  // T=6, C=8, D=8, E=16, N_M=4, one PN-BiMamba block; checks a cross-section
  // of parameters from every stage.
  ModelConfig cfg = tiny_cfg();
  Model m = make_model(cfg);
  Rng rng(37);
  Tensor x = randn({6, 8}, rng);
  auto build = [&](Tape& t) {
    Var logits = model_logits(m, t.constant(x), nullptr, false);
    return cross_entropy(reshape(logits, {2}), 1);
  };
  std::vector<Param*> all;
  m.collect_params(all);
  std::vector<Param*> sample = {&m.proj_w, &m.proj_b, &m.pool_w, &m.pool_b,
                                &m.head_w1, &m.head_b2};
  for (Param* p : all) {
    auto& n = p->name;
    if (n.find("A_log") != std::string::npos || n.find("conv_b") != std::string::npos ||
        n.find("b_delta") != std::string::npos || n.find("ln1.gamma") != std::string::npos ||
        n.find("w_out") != std::string::npos)
      sample.push_back(p);
  }
  CHECK_GT(sample.size(), 10u);
  fd_check(sample, build, 1e-5, 1e-6);
}

TEST_CASE("checkpoint: save/load round-trip is bit-exact") {
  ModelConfig cfg = tiny_cfg(Variant::ConBiMamba);
  cfg.block.dropout = 0.1;
  cfg.block.ablation.disable_ffn = true;
  Model m = make_model(cfg);
  const char* p1 = "ckpt_a.bin";
  const char* p2 = "ckpt_b.bin";
  save_checkpoint(m, p1);
  Model n = load_checkpoint(p1);

  CHECK_EQ(n.cfg.C_in, cfg.C_in);
  CHECK_EQ(n.cfg.D, cfg.D);
  CHECK_EQ(n.cfg.head_hidden, cfg.head_hidden);
  CHECK_EQ(n.cfg.seed, cfg.seed);
  CHECK(n.cfg.block.variant == cfg.block.variant);
  CHECK_EQ(n.cfg.block.dropout, cfg.block.dropout);
  CHECK(n.cfg.block.ablation.disable_ffn);

  std::vector<Param*> pm, pn;
  m.collect_params(pm);
  n.collect_params(pn);
  REQUIRE_EQ(pm.size(), pn.size());
  for (size_t i = 0; i < pm.size(); ++i) {
    CHECK_EQ(pm[i]->name, pn[i]->name);
    REQUIRE(pm[i]->value.shape == pn[i]->value.shape);
    CHECK_EQ(max_abs_diff(pm[i]->value, pn[i]->value), 0.0);
  }

  save_checkpoint(n, p2);
  auto b1 = read_file_bytes(p1);
  auto b2 = read_file_bytes(p2);
  CHECK(b1 == b2);

  Rng rng(41);
  Tensor x = randn({9, 8}, rng);
  CHECK_EQ(model_forward(m, x).score, model_forward(n, x).score);
  std::remove(p1);
  std::remove(p2);
}

TEST_CASE("checkpoint: corruption and truncation are distinct errors") {
  Model m = make_model(tiny_cfg());
  const char* path = "ckpt_c.bin";
  save_checkpoint(m, path);
  auto raw = read_file_bytes(path);

  auto bad = raw;
  bad[bad.size() / 2] ^= 0x01;  // flip one payload bit
  write_file_bytes(path, bad.data(), bad.size());
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("checksum"), std::runtime_error);

  write_file_bytes(path, raw.data(), raw.size() / 2);
  CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);

  auto magic = raw;
  magic[0] = 'X';
  write_file_bytes(path, magic.data(), magic.size());
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("magic"), std::runtime_error);
  std::remove(path);
}

TEST_CASE("model config kv round-trip") {
  ModelConfig cfg = tiny_cfg(Variant::Transformer);
  cfg.block.dropout = 0.05;
  cfg.block.strict_eq16 = false;
  cfg.block.ablation.disable_bidirectional = true;
  KvMap kv = parse_kv_text(kv_text(model_config_kv(cfg)));
  ModelConfig back = model_config_from_kv(kv);
  CHECK(back.block.variant == cfg.block.variant);
  CHECK_EQ(back.block.dropout, cfg.block.dropout);
  CHECK_EQ(back.block.strict_eq16, false);
  CHECK(back.block.ablation.disable_bidirectional);
  CHECK_EQ(back.C_in, cfg.C_in);
  CHECK_EQ(back.D, cfg.D);

  KvMap unknown = kv;
  unknown["model.bogus"] = "1";
  CHECK_THROWS_AS(model_config_from_kv(unknown), std::invalid_argument);
}

TEST_CASE("kv parser: comments, whitespace and malformed lines") {
  KvMap kv = parse_kv_text("# header\n a.b = 3 # trailing\n\n c = hi \n");
  CHECK_EQ(kv.at("a.b"), "3");
  CHECK_EQ(kv.at("c"), "hi");
  CHECK_THROWS_AS(parse_kv_text("no equals sign\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_kv_text("= value\n"), std::invalid_argument);
}

TEST_CASE("score is invariant to unrelated batch members") {
  // per-utterance tapes: evaluating other inputs in between must not change a score
  Model m = make_model(tiny_cfg());
  Rng rng(43);
  Tensor x = randn({8, 8}, rng);
  double alone = model_forward(m, x).score;
  for (int i = 0; i < 3; ++i) model_forward(m, randn({5 + i, 8}, rng));
  CHECK_EQ(model_forward(m, x).score, alone);
}
