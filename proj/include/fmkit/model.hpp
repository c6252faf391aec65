#pragma once

#include <cstdint>
#include <vector>

#include "fmkit/encoder.hpp"
#include "fmkit/ops.hpp"

namespace fmkit {

struct ModelConfig {
  int C_in = 32;
  int D = 144;          // overrides block.D in make_model
  BlockConfig block;
  int head_hidden = 80;
  uint64_t seed = 1;
};

struct Prediction {
  Tensor logits;       // [2] = (real, fake)
  double score = 0.0;  // logit_fake - logit_real
};

// Projection -> encoder -> pooling -> MLP head.
struct Model {
  ModelConfig cfg;
  Param proj_w, proj_b;
  Encoder enc;
  Param pool_w, pool_b;  // pool_w [D,1], pool_b [1]
  Param head_w1, head_b1, head_w2, head_b2;
  void collect_params(std::vector<Param*>& out);
  int64_t total_params();
};

Model make_model(const ModelConfig& cfg, Rng& rng);
Model make_model(const ModelConfig& cfg);  // fresh rng from cfg.seed

Var project(Model& m, Var s_f);          // [T,C_in] -> [T,D]
Var attention_pool(Model& m, Var h);     // [T,D] -> [1,D]
Var mean_pool(Var h);                    // [T,D] -> [1,D]
Var classify(Model& m, Var s_u);         // [1,D] -> [1,2]

// Full graph on the Var's tape; picks mean pooling under the disable_pooling
// ablation. drop_rng may be null when training is false.
Var model_logits(Model& m, Var s_f, Rng* drop_rng, bool training);

// Inference convenience: evaluates on a non-recording tape.
Prediction model_forward(Model& m, const Tensor& s_f);

}  // namespace fmkit
