#pragma once

#include <memory>
#include <string>
#include <vector>

#include "fmkit/mamba.hpp"
#include "fmkit/tape.hpp"

namespace fmkit {

enum class Variant { TransBiMamba, ConBiMamba, PN_BiMamba, Transformer, Conformer };

Variant variant_from_string(const std::string& s);
std::string variant_to_string(Variant v);

struct Ablation {
  bool disable_pre_ln = false;
  bool disable_ffn = false;
  bool disable_bidirectional = false;
  bool disable_pooling = false;  // consumed by the pipeline, not the encoder
};

struct BlockConfig {
  Variant variant = Variant::PN_BiMamba;
  int D = 144;
  int n_blocks = 4;
  int ffn_mult = 4;
  int expand = 2;            // E = expand * D
  int n_state = 16;          // N_M
  int conv_k = 4;            // Mamba depthwise kernel
  int conformer_conv_k = 31; // ConvModule depthwise kernel
  int mhsa_heads = 4;
  bool strict_eq16 = true;   // keep the printed double residual of Eq. (16)
  bool ssm_skip = true;
  double dropout = 0.1;
  Ablation ablation;
};

struct LnParams {
  Param gamma;
  Param beta;
};
LnParams make_ln(int D, const std::string& prefix);
Var ln_forward(LnParams& p, Var x);

struct Ffn {
  Param w1, b1, w2, b2;  // D -> mult*D -> D with SiLU between
  void collect_params(std::vector<Param*>& out);
};
Ffn make_ffn(int D, int mult, Rng& rng, const std::string& prefix);
Var ffn_forward(Ffn& f, Var x);

struct Mhsa {
  int heads = 4;
  Param wq, bq, wk, bk, wv, bv, wo, bo;
  void collect_params(std::vector<Param*>& out);
};
Mhsa make_mhsa(int D, int heads, Rng& rng, const std::string& prefix);
Var mhsa_forward(Mhsa& m, Var x);

// Conformer convolution module, returned without the residual: the caller
// adds it, so the add happens exactly once.
struct ConvModule {
  int k = 31;
  LnParams ln_in;
  Param pw1_w, pw1_b;  // [D,2D] pointwise, GLU halves
  Param dw_w, dw_b;    // [D,k] depthwise, centered
  LnParams ln_mid;
  Param pw2_w, pw2_b;  // [D,D]
  void collect_params(std::vector<Param*>& out);
};
ConvModule make_conv_module(int D, int k, Rng& rng, const std::string& prefix);
Var conv_module_forward(ConvModule& c, Var x);

struct EncoderBlock {
  Variant variant;
  Ablation ab;
  bool strict_eq16 = true;
  double dropout = 0.1;
  std::unique_ptr<BiMambaUnit> bimamba;  // BiMamba variants, bidirectional
  std::unique_ptr<MambaUnit> mono;       // BiMamba variants with disable_bidirectional
  std::unique_ptr<Mhsa> mhsa;            // attention baselines
  std::unique_ptr<ConvModule> conv;      // Conformer-style variants
  std::unique_ptr<Ffn> ffn1;
  std::unique_ptr<Ffn> ffn2;             // macaron second half
  std::unique_ptr<LnParams> ln1;
  std::unique_ptr<LnParams> ln2;
  void collect_params(std::vector<Param*>& out);
};

struct Encoder {
  BlockConfig cfg;
  std::vector<EncoderBlock> blocks;
  void collect_params(std::vector<Param*>& out);
};

Encoder make_encoder(const BlockConfig& cfg, Rng& rng, const std::string& prefix);

// Applies the blocks in order. drop_rng may be null when training is false.
Var encoder_forward(Encoder& enc, Var h, Rng* drop_rng, bool training);

Var block_forward(EncoderBlock& blk, Var h, Rng* drop_rng, bool training);

}  // namespace fmkit
