#include "fmkit/model.hpp"

#include <cmath>
#include <stdexcept>

namespace fmkit {

void Model::collect_params(std::vector<Param*>& out) {
  out.push_back(&proj_w);
  out.push_back(&proj_b);
  enc.collect_params(out);
  if (!cfg.block.ablation.disable_pooling) {
    out.push_back(&pool_w);
    out.push_back(&pool_b);
  }
  out.push_back(&head_w1);
  out.push_back(&head_b1);
  out.push_back(&head_w2);
  out.push_back(&head_b2);
}

int64_t Model::total_params() {
  std::vector<Param*> ps;
  collect_params(ps);
  int64_t n = 0;
  for (Param* p : ps) n += p->value.numel();
  return n;
}

Model make_model(const ModelConfig& cfg, Rng& rng) {
  if (cfg.C_in < 1 || cfg.D < 1 || cfg.head_hidden < 1)
    throw std::invalid_argument("make_model: C_in, D and head_hidden must be positive");
  Model m;
  m.cfg = cfg;
  m.cfg.block.D = cfg.D;
  const int C = cfg.C_in, D = cfg.D, H = cfg.head_hidden;
  m.proj_w = {"proj.w", randn({C, D}, rng, 1.0 / std::sqrt(double(C)))};
  m.proj_b = {"proj.b", Tensor({D})};
  m.enc = make_encoder(m.cfg.block, rng, "enc");
  // pooling starts near uniform and the last layer near zero: initial scores
  // stay calibrated (loss ~ ln 2 from step one) and no early updates are
  // spent rescaling random logits
  m.pool_w = {"pool.w", randn({D, 1}, rng, 0.1 / std::sqrt(double(D)))};
  m.pool_b = {"pool.b", Tensor({1})};
  m.head_w1 = {"head.w1", randn({D, H}, rng, 1.0 / std::sqrt(double(D)))};
  m.head_b1 = {"head.b1", Tensor({H})};
  m.head_w2 = {"head.w2", randn({H, 2}, rng, 0.01 / std::sqrt(double(H)))};
  m.head_b2 = {"head.b2", Tensor({2})};
  return m;
}

Model make_model(const ModelConfig& cfg) {
  Rng rng(mix64(cfg.seed ^ 0x6d6f64656cULL));  // "model"
  return make_model(cfg, rng);
}

Var project(Model& m, Var s_f) {
  Tape& t = *s_f.tape;
  int c = t.val(s_f).cols();
  if (c != m.cfg.C_in)
    throw std::invalid_argument("project: expected " + std::to_string(m.cfg.C_in) +
                                " channels, got " + std::to_string(c));
  return linear(s_f, t.use(m.proj_w), t.use(m.proj_b));
}

Var attention_pool(Model& m, Var h) {
  Tape& t = *h.tape;
  Var w = t.use(m.pool_w);
  Var b = t.use(m.pool_b);
  Var scores = add_bias(matmul(h, w), b);       // [T,1]
  Var alpha = softmax_rows(transpose(scores));  // [1,T], sums to 1
  return matmul(alpha, h);                      // [1,D]
}

Var mean_pool(Var h) {
  Tape& t = *h.tape;
  int T = t.val(h).rows();
  Tensor ones({1, T}, 1.0 / double(T));
  return matmul(t.constant(std::move(ones)), h);
}

Var classify(Model& m, Var s_u) {
  Tape& t = *s_u.tape;
  Var hid = silu(linear(s_u, t.use(m.head_w1), t.use(m.head_b1)));
  return linear(hid, t.use(m.head_w2), t.use(m.head_b2));  // [1,2]
}

Var model_logits(Model& m, Var s_f, Rng* drop_rng, bool training) {
  Var h = project(m, s_f);
  h = encoder_forward(m.enc, h, drop_rng, training);
  Var s_u = m.cfg.block.ablation.disable_pooling ? mean_pool(h) : attention_pool(m, h);
  return classify(m, s_u);
}

Prediction model_forward(Model& m, const Tensor& s_f) {
  Tape t(false);
  Var logits = model_logits(m, t.constant(s_f), nullptr, false);
  Tensor lv = t.val(logits);
  Prediction p;
  p.logits = Tensor::vec({lv.at(0, 0), lv.at(0, 1)});
  p.score = lv.at(0, 1) - lv.at(0, 0);
  if (!std::isfinite(p.score))
    throw std::runtime_error("model_forward: non-finite logits");
  return p;
}

}  // namespace fmkit
