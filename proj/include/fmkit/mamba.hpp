#pragma once

#include <string>
#include <vector>

#include "fmkit/ssm.hpp"
#include "fmkit/tape.hpp"

namespace fmkit {

// One direction of the Mamba block: two input projections, a causal
// depthwise convolution, the selective SSM and the gated output projection.
struct MambaUnit {
  int D = 0, E = 0, conv_k = 4;
  Param w_in_x;  // [D,E], no bias
  Param w_in_z;  // [D,E], no bias
  Param conv_w;  // [E,k]
  Param conv_b;  // [E]
  Param w_out;   // [E,D], no bias
  SelectiveParams ssm;

  void collect_params(std::vector<Param*>& out);
};

MambaUnit make_mamba_unit(int D, int expand, int N, int conv_k, Rng& rng, bool use_skip,
                          const std::string& prefix);

// x = hW_x; z = hW_z; x' = SiLU(causal Conv1d(x)); y = SSM(x') * SiLU(z);
// returns yW_y. Throws on non-finite intermediates, naming the stage.
Var mamba_forward(MambaUnit& u, Var h);

// Forward unit consumes the block's pre-normed stream; backward unit sees
// the raw stream through a flip, its own LayerNorm, and a flip back.
struct BiMambaUnit {
  MambaUnit fwd;
  MambaUnit bwd;
  Param bwd_ln_gamma;  // [D]
  Param bwd_ln_beta;   // [D]
  bool tie_weights = false;

  void collect_params(std::vector<Param*>& out);
};

BiMambaUnit make_bimamba_unit(int D, int expand, int N, int conv_k, Rng& rng, bool use_skip,
                              const std::string& prefix);

// h_fwd + Flip(Mamba(LN(Flip(h_raw)))). use_backward_ln = false drops the
// backward branch's LayerNorm (the disable_pre_ln ablation).
Var bimamba_forward(BiMambaUnit& b, Var h_raw, Var h_pre_normed, bool use_backward_ln = true);

int64_t total_params(const std::vector<Param*>& ps);

}  // namespace fmkit
