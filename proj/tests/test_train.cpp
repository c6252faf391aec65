#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "fmkit/data.hpp"
#include "fmkit/metrics.hpp"
#include "fmkit/model.hpp"
#include "fmkit/train.hpp"
#include "testutil.hpp"

using namespace fmkit;
using testutil::max_abs_diff;

namespace fs = std::filesystem;

static Prediction pred_from(double logit_real, double logit_fake) {
  Prediction p;
  p.logits = Tensor::vec({logit_real, logit_fake});
  p.score = logit_fake - logit_real;
  return p;
}

TEST_CASE("wce: perfect confident predictions drive the loss to zero") {
  std::vector<Prediction> preds = {pred_from(30.0, -30.0), pred_from(-30.0, 30.0)};
  std::vector<Label> labels = {Label::Real, Label::Fake};
  CHECK_LT(wce_loss(preds, labels, 0.5, 0.5), 1e-12);
}

TEST_CASE("wce: uniform logits with equal weights give ln 2") {
  std::vector<Prediction> preds = {pred_from(0.0, 0.0), pred_from(1.3, 1.3)};
  std::vector<Label> labels = {Label::Real, Label::Fake};
  CHECK_LT(std::fabs(wce_loss(preds, labels, 1.0, 1.0) - std::log(2.0)), 1e-12);
}

TEST_CASE("wce: doubling both class weights cancels out") {
  Rng rng(3);
  std::vector<Prediction> preds;
  std::vector<Label> labels;
  for (int i = 0; i < 9; ++i) {
    preds.push_back(pred_from(rng.normal(), rng.normal()));
    labels.push_back(i % 3 == 0 ? Label::Real : Label::Fake);
  }
  double a = wce_loss(preds, labels, 0.3, 0.7);
  double b = wce_loss(preds, labels, 0.6, 1.4);
  CHECK_LT(std::fabs(a - b), 1e-12);
}

TEST_CASE("wce: equal weights on a balanced batch equal plain cross-entropy") {
  Rng rng(5);
  std::vector<Prediction> preds;
  std::vector<Label> labels;
  double plain = 0.0;
  for (int i = 0; i < 8; ++i) {
    double lr = rng.normal(), lf = rng.normal();
    preds.push_back(pred_from(lr, lf));
    labels.push_back(i < 4 ? Label::Real : Label::Fake);
    double mx = std::max(lr, lf);
    double lse = mx + std::log(std::exp(lr - mx) + std::exp(lf - mx));
    plain += -((i < 4 ? lr : lf) - lse);
  }
  plain /= 8.0;
  CHECK_LT(std::fabs(wce_loss(preds, labels, 0.5, 0.5) - plain), 1e-12);
  CHECK_THROWS_AS(wce_loss({}, {}, 0.5, 0.5), std::invalid_argument);
}

TEST_CASE("class weights derived from label frequencies") {
  auto [wr, wf] = derive_class_weights(100, 900);
  CHECK_LT(std::fabs(wr - 0.9), 1e-15);
  CHECK_LT(std::fabs(wf - 0.1), 1e-15);
  auto [br, bf] = derive_class_weights(50, 50);
  CHECK_EQ(br, 0.5);
  CHECK_EQ(bf, 0.5);
}

TEST_CASE("adam: zero gradient and zero decay change nothing") {
  Param p{"p", Tensor::vec({1.0, -2.0, 3.0})};
  std::vector<Param*> ps = {&p};
  std::vector<Tensor> gs = {Tensor({3})};
  AdamState st;
  for (int i = 0; i < 5; ++i) adam_step(ps, gs, st, 1e-3, 0.0);
  CHECK_EQ(p.value.at(0), 1.0);
  CHECK_EQ(p.value.at(1), -2.0);
  CHECK_EQ(p.value.at(2), 3.0);
}

TEST_CASE("adam: hand-computed first and second scalar steps") {
  const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  Param p{"p", Tensor::vec({2.0})};
  std::vector<Param*> ps = {&p};
  AdamState st;

  double g1 = 0.5;
  adam_step(ps, {Tensor::vec({g1})}, st, lr, 0.0);
  // after bias correction the first step is -lr * g/(|g| + eps)
  double m = (1 - b1) * g1, v = (1 - b2) * g1 * g1;
  double want = 2.0 - lr * (m / (1 - b1)) / (std::sqrt(v / (1 - b2)) + eps);
  CHECK_LT(std::fabs(p.value.at(0) - want), 1e-15);
  CHECK_LT(std::fabs((2.0 - p.value.at(0)) - lr * g1 / (std::fabs(g1) + eps)), 1e-9);

  double g2 = -0.25;
  adam_step(ps, {Tensor::vec({g2})}, st, lr, 0.0);
  m = b1 * m + (1 - b1) * g2;
  v = b2 * v + (1 - b2) * g2 * g2;
  double mh = m / (1 - b1 * b1), vh = v / (1 - b2 * b2);
  want -= lr * mh / (std::sqrt(vh) + eps);
  CHECK_LT(std::fabs(p.value.at(0) - want), 1e-15);
}

TEST_CASE("adam: batched scalars match independent single updates") {
  Param both{"both", Tensor::vec({1.0, -1.0})};
  Param lone_a{"a", Tensor::vec({1.0})};
  Param lone_b{"b", Tensor::vec({-1.0})};
  AdamState st_both, st_a, st_b;
  std::vector<Param*> pb = {&both}, pa = {&lone_a}, pbb = {&lone_b};
  Rng rng(11);
  for (int i = 0; i < 7; ++i) {
    double ga = rng.normal(), gb = rng.normal();
    adam_step(pb, {Tensor::vec({ga, gb})}, st_both, 0.01, 0.02);
    adam_step(pa, {Tensor::vec({ga})}, st_a, 0.01, 0.02);
    adam_step(pbb, {Tensor::vec({gb})}, st_b, 0.01, 0.02);
  }
  CHECK_EQ(both.value.at(0), lone_a.value.at(0));
  CHECK_EQ(both.value.at(1), lone_b.value.at(0));
}

TEST_CASE("adam: decoupled weight decay shrinks params with zero gradient") {
  Param p{"p", Tensor::vec({4.0})};
  std::vector<Param*> ps = {&p};
  AdamState st;
  adam_step(ps, {Tensor::vec({0.0})}, st, 0.5, 0.1);
  CHECK_LT(std::fabs(p.value.at(0) - 4.0 * (1.0 - 0.5 * 0.1)), 1e-15);
  CHECK_THROWS_AS(adam_step(ps, {Tensor::vec({0.0, 0.0})}, st, 0.5, 0.1), std::invalid_argument);
}

TEST_CASE("average_top_k: selection, ties and the mean oracle") {
  auto snap = [](int epoch, double eer, std::vector<double> v) {
    return ParamSnapshot{epoch, eer, {Tensor::vec(std::move(v))}};
  };
  std::vector<ParamSnapshot> snaps = {snap(1, 0.30, {1, 2}), snap(2, 0.10, {3, 4}),
                                      snap(3, 0.20, {5, 6}), snap(4, 0.10, {7, 8})};
  // k=1: best EER 0.10 appears twice; epoch 2 wins the tie
  auto best = average_top_k(snaps, 1);
  CHECK_EQ(best[0].at(0), 3.0);
  CHECK_EQ(best[0].at(1), 4.0);
  // k=3 over epochs {2,4,3}: mean of {3,4},{7,8},{5,6}
  auto mean3 = average_top_k(snaps, 3);
  CHECK_LT(std::fabs(mean3[0].at(0) - 5.0), 1e-15);
  CHECK_LT(std::fabs(mean3[0].at(1) - 6.0), 1e-15);
  // theta and -theta wipe to zero
  std::vector<ParamSnapshot> pm = {snap(1, 0.1, {2.5, -1.5}), snap(2, 0.2, {-2.5, 1.5})};
  auto zero = average_top_k(pm, 2);
  CHECK_EQ(zero[0].at(0), 0.0);
  CHECK_EQ(zero[0].at(1), 0.0);
  CHECK_THROWS_AS(average_top_k(snaps, 0), std::invalid_argument);
  CHECK_THROWS_AS(average_top_k(snaps, 5), std::invalid_argument);
}

// small helper: synthesize a dataset and manifests for trainer tests
static Manifest make_tiny_set(const std::string& dir, int n_real, int n_fake, uint64_t seed,
                              double amp = 0.6) {
  SynthSpec spec;
  spec.n_real = n_real;
  spec.n_fake = n_fake;
  spec.C = 6;
  spec.dur_lo = 0.16;  // T = 8..16 at 50 fps
  spec.dur_hi = 0.32;
  spec.artifact_amp = amp;
  spec.seed = seed;
  return synth_dataset(spec, dir);
}

static ModelConfig trainer_cfg() {
  ModelConfig cfg;
  cfg.C_in = 6;
  cfg.D = 8;
  cfg.head_hidden = 8;
  cfg.seed = 5;
  cfg.block.n_blocks = 1;
  cfg.block.expand = 2;
  cfg.block.n_state = 2;
  cfg.block.dropout = 0.0;
  return cfg;
}

TEST_CASE("train: lr = 0 leaves parameters untouched and history flat") {
  fs::path dir = fs::temp_directory_path() / "fmkit_train_lr0";
  fs::remove_all(dir);
  Manifest mf = make_tiny_set(dir.string(), 8, 8, 21);
  Model m = make_model(trainer_cfg());
  std::vector<Tensor> before = copy_params(m);
  TrainConfig tc;
  tc.lr = 0.0;
  tc.batch_size = 4;
  tc.max_epochs = 12;
  tc.patience = 7;
  tc.seed = 3;
  TrainResult r = train(m, mf, mf, tc);
  std::vector<Tensor> after = copy_params(m);
  for (size_t i = 0; i < before.size(); ++i) CHECK_EQ(max_abs_diff(before[i], after[i]), 0.0);
  // constant dev loss: first epoch sets the best, patience runs out after 7 more
  CHECK_EQ(r.history.size(), 8u);
  CHECK(r.early_stopped);
  for (const EpochStats& e : r.history) CHECK_EQ(e.dev_loss, r.history[0].dev_loss);
  fs::remove_all(dir);
}

TEST_CASE("train: loss strictly decreases on an easy separable task") {
  fs::path dir = fs::temp_directory_path() / "fmkit_train_sep";
  fs::remove_all(dir);
  // large-amplitude artifacts make the task close to linearly separable
  Manifest mf = make_tiny_set(dir.string(), 16, 16, 33, 3.0);
  Model m = make_model(trainer_cfg());
  TrainConfig tc;
  tc.lr = 1e-3;
  tc.batch_size = 8;
  tc.max_epochs = 3;
  tc.seed = 4;
  TrainResult r = train(m, mf, mf, tc);
  REQUIRE_EQ(r.history.size(), 3u);
  CHECK_GT(r.history[0].train_loss, r.history[1].train_loss);
  CHECK_GT(r.history[1].train_loss, r.history[2].train_loss);
  fs::remove_all(dir);
}

TEST_CASE("train: run dir gets metrics lines and retained checkpoints") {
  fs::path dir = fs::temp_directory_path() / "fmkit_train_rundir";
  fs::path run = fs::temp_directory_path() / "fmkit_train_run";
  fs::remove_all(dir);
  fs::remove_all(run);
  Manifest mf = make_tiny_set(dir.string(), 6, 6, 55);
  Model m = make_model(trainer_cfg());
  TrainConfig tc;
  tc.lr = 1e-3;
  tc.batch_size = 4;
  tc.max_epochs = 4;
  tc.avg_top_k = 2;
  TrainResult r = train(m, mf, mf, tc, run.string());
  CHECK(fs::exists(run / "metrics.jsonl"));
  // exactly the retained top-k checkpoints remain on disk
  int ckpts = 0;
  for (const auto& e : fs::directory_iterator(run))
    if (e.path().filename().string().rfind("ckpt_epoch_", 0) == 0) ++ckpts;
  CHECK_EQ(ckpts, static_cast<int>(r.top.size()));
  CHECK_LE(r.top.size(), 2u);

  // top snapshots are sorted by EER and applying one reproduces its dev EER
  REQUIRE_GE(r.top.size(), 1u);
  assign_params(m, r.top[0].params);
  ScoreSet s;
  for (int i = 0; i < static_cast<int>(mf.entries.size()); ++i) {
    FeatureRecord rec = load_record(mf, i);
    double sc = model_forward(m, rec.features).score;
    (rec.label == Label::Real ? s.real_scores : s.fake_scores).push_back(sc);
  }
  CHECK_LT(std::fabs(compute_eer(s).eer - r.top[0].dev_eer), 1e-12);
  fs::remove_all(dir);
  fs::remove_all(run);
}

TEST_CASE("train: identical seeds give identical results, different seeds differ") {
  fs::path dir = fs::temp_directory_path() / "fmkit_train_det";
  fs::remove_all(dir);
  Manifest mf = make_tiny_set(dir.string(), 6, 6, 77);
  TrainConfig tc;
  tc.lr = 1e-3;
  tc.batch_size = 4;
  tc.max_epochs = 2;
  tc.seed = 9;

  Model a = make_model(trainer_cfg());
  Model b = make_model(trainer_cfg());
  TrainResult ra = train(a, mf, mf, tc);
  TrainResult rb = train(b, mf, mf, tc);
  std::vector<Tensor> pa = copy_params(a), pb = copy_params(b);
  for (size_t i = 0; i < pa.size(); ++i) CHECK_EQ(max_abs_diff(pa[i], pb[i]), 0.0);
  CHECK_EQ(ra.history.back().dev_loss, rb.history.back().dev_loss);

  tc.seed = 10;  // different shuffle/dropout stream
  Model c = make_model(trainer_cfg());
  train(c, mf, mf, tc);
  std::vector<Tensor> pc = copy_params(c);
  double dev = 0.0;
  for (size_t i = 0; i < pa.size(); ++i) dev = std::max(dev, max_abs_diff(pa[i], pc[i]));
  CHECK_GT(dev, 0.0);
  fs::remove_all(dir);
}

TEST_CASE("gradcheck: all three BiMamba variants pass at 1e-4 on the tiny config") {
  for (Variant v : {Variant::PN_BiMamba, Variant::TransBiMamba, Variant::ConBiMamba}) {
    ModelConfig cfg;
    cfg.C_in = 8;
    cfg.D = 8;
    cfg.head_hidden = 6;
    cfg.seed = 31;
    cfg.block.variant = v;
    cfg.block.n_blocks = 1;
    cfg.block.n_state = 4;
    cfg.block.conformer_conv_k = 5;
    cfg.block.dropout = 0.0;
    GradcheckReport rep = gradcheck(cfg, 1e-4, 50, 7);
    INFO(variant_to_string(v), " worst: ", rep.worst_param, " rel ", rep.max_rel_err);
    CHECK(rep.pass);
    CHECK_GE(rep.n_coords, 50);
    CHECK_LT(rep.max_rel_err, 1e-4);
  }
}

TEST_CASE("gradcheck: tolerance zero fails on a nontrivial model") {
  ModelConfig cfg;
  cfg.C_in = 4;
  cfg.D = 4;
  cfg.head_hidden = 4;
  cfg.block.n_blocks = 1;
  cfg.block.n_state = 2;
  cfg.block.dropout = 0.0;
  GradcheckReport rep = gradcheck(cfg, 0.0, 50, 7);
  CHECK_FALSE(rep.pass);
  CHECK_FALSE(rep.failures.empty());
}

TEST_CASE("fd_compare: a corrupted backward rule is caught and named") {
  Param w{"w.bad", Tensor::vec({0.7, -0.4})};
  auto build = [&w](Tape& t) {
    Var x = t.use(w);
    // y = sum(x^2) with a deliberately wrong pullback (3x instead of 2x)
    const Tensor& xv = t.val(x);
    Tensor y = Tensor::scalar(xv.at(0) * xv.at(0) + xv.at(1) * xv.at(1));
    Var out = t.make_node(std::move(y), {x}, [x](Tape& tp, int self) {
      const Tensor& g = tp.grad_at(self);
      const Tensor& xv2 = tp.val(x);
      Tensor& gx = tp.grad_buf(x.id);
      for (int i = 0; i < 2; ++i) gx.at(i) += g.at(0) * 3.0 * xv2.at(i);
    });
    return out;
  };
  GradcheckReport rep = fd_compare({&w}, build, 1e-4, 2, 1e-5, 3);
  CHECK_FALSE(rep.pass);
  CHECK_EQ(rep.worst_param, "w.bad");
  REQUIRE_FALSE(rep.failures.empty());
  CHECK(rep.failures[0].find("w.bad") != std::string::npos);
}

TEST_CASE("train: patience trigger on a crafted non-improving series") {
  // dev loss cannot improve when lr is zero after a first epoch; covered by the
  // lr=0 case above. Here: patience 2 stops at epoch 3.
  fs::path dir = fs::temp_directory_path() / "fmkit_train_pat";
  fs::remove_all(dir);
  Manifest mf = make_tiny_set(dir.string(), 6, 6, 99);
  Model m = make_model(trainer_cfg());
  TrainConfig tc;
  tc.lr = 0.0;
  tc.batch_size = 6;
  tc.max_epochs = 50;
  tc.patience = 2;
  TrainResult r = train(m, mf, mf, tc);
  CHECK_EQ(r.history.size(), 3u);
  CHECK(r.early_stopped);
  CHECK_EQ(r.best_epoch, 1);
  fs::remove_all(dir);
}
