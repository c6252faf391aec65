#include "fmkit/encoder.hpp"

#include <cmath>
#include <stdexcept>

#include "fmkit/ops.hpp"

namespace fmkit {

Variant variant_from_string(const std::string& s) {
  std::string t = s;
  for (char& c : t)
    if (c == '-') c = '_';  // accept CLI-style dashed spellings
  if (t == "trans_bimamba") return Variant::TransBiMamba;
  if (t == "con_bimamba") return Variant::ConBiMamba;
  if (t == "pn_bimamba") return Variant::PN_BiMamba;
  if (t == "transformer") return Variant::Transformer;
  if (t == "conformer") return Variant::Conformer;
  throw std::invalid_argument("unknown encoder variant: " + s);
}

std::string variant_to_string(Variant v) {
  switch (v) {
    case Variant::TransBiMamba: return "trans_bimamba";
    case Variant::ConBiMamba: return "con_bimamba";
    case Variant::PN_BiMamba: return "pn_bimamba";
    case Variant::Transformer: return "transformer";
    case Variant::Conformer: return "conformer";
  }
  return "?";
}

LnParams make_ln(int D, const std::string& prefix) {
  return LnParams{Param{prefix + ".gamma", Tensor({D}, 1.0)}, Param{prefix + ".beta", Tensor({D})}};
}

Var ln_forward(LnParams& p, Var x) {
  Tape& t = *x.tape;
  return layer_norm(x, t.use(p.gamma), t.use(p.beta));
}

void Ffn::collect_params(std::vector<Param*>& out) {
  out.push_back(&w1);
  out.push_back(&b1);
  out.push_back(&w2);
  out.push_back(&b2);
}

Ffn make_ffn(int D, int mult, Rng& rng, const std::string& prefix) {
  int H = mult * D;
  Ffn f;
  f.w1 = Param{prefix + ".w1", randn({D, H}, rng, 1.0 / std::sqrt(double(D)))};
  f.b1 = Param{prefix + ".b1", Tensor({H})};
  f.w2 = Param{prefix + ".w2", randn({H, D}, rng, 1.0 / std::sqrt(double(H)))};
  f.b2 = Param{prefix + ".b2", Tensor({D})};
  return f;
}

Var ffn_forward(Ffn& f, Var x) {
  Tape& t = *x.tape;
  return linear(silu(linear(x, t.use(f.w1), t.use(f.b1))), t.use(f.w2), t.use(f.b2));
}

void Mhsa::collect_params(std::vector<Param*>& out) {
  for (Param* p : {&wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo}) out.push_back(p);
}

Mhsa make_mhsa(int D, int heads, Rng& rng, const std::string& prefix) {
  if (heads < 1 || D % heads != 0)
    throw std::invalid_argument("mhsa: D must be divisible by the head count");
  Mhsa m;
  m.heads = heads;
  double s = 1.0 / std::sqrt(double(D));
  m.wq = Param{prefix + ".wq", randn({D, D}, rng, s)};
  m.bq = Param{prefix + ".bq", Tensor({D})};
  m.wk = Param{prefix + ".wk", randn({D, D}, rng, s)};
  m.bk = Param{prefix + ".bk", Tensor({D})};
  m.wv = Param{prefix + ".wv", randn({D, D}, rng, s)};
  m.bv = Param{prefix + ".bv", Tensor({D})};
  m.wo = Param{prefix + ".wo", randn({D, D}, rng, s)};
  m.bo = Param{prefix + ".bo", Tensor({D})};
  return m;
}

Var mhsa_forward(Mhsa& m, Var x) {
  Tape& t = *x.tape;
  int D = t.val(x).shape[1];
  int dh = D / m.heads;
  Var q = linear(x, t.use(m.wq), t.use(m.bq));
  Var k = linear(x, t.use(m.wk), t.use(m.bk));
  Var v = linear(x, t.use(m.wv), t.use(m.bv));
  std::vector<Var> heads;
  heads.reserve(m.heads);
  for (int h = 0; h < m.heads; ++h) {
    int c0 = h * dh, c1 = (h + 1) * dh;
    heads.push_back(attention(slice_cols(q, c0, c1), slice_cols(k, c0, c1), slice_cols(v, c0, c1)));
  }
  return linear(concat_cols(heads), t.use(m.wo), t.use(m.bo));
}

void ConvModule::collect_params(std::vector<Param*>& out) {
  out.push_back(&ln_in.gamma);
  out.push_back(&ln_in.beta);
  out.push_back(&pw1_w);
  out.push_back(&pw1_b);
  out.push_back(&dw_w);
  out.push_back(&dw_b);
  out.push_back(&ln_mid.gamma);
  out.push_back(&ln_mid.beta);
  out.push_back(&pw2_w);
  out.push_back(&pw2_b);
}

ConvModule make_conv_module(int D, int k, Rng& rng, const std::string& prefix) {
  if (k % 2 == 0) throw std::invalid_argument("conv module kernel must be odd for centered padding");
  ConvModule c;
  c.k = k;
  c.ln_in = make_ln(D, prefix + ".ln_in");
  c.pw1_w = Param{prefix + ".pw1_w", randn({D, 2 * D}, rng, 1.0 / std::sqrt(double(D)))};
  c.pw1_b = Param{prefix + ".pw1_b", Tensor({2 * D})};
  c.dw_w = Param{prefix + ".dw_w", randn({D, k}, rng, 1.0 / std::sqrt(double(k)))};
  c.dw_b = Param{prefix + ".dw_b", Tensor({D})};
  c.ln_mid = make_ln(D, prefix + ".ln_mid");
  c.pw2_w = Param{prefix + ".pw2_w", randn({D, D}, rng, 1.0 / std::sqrt(double(D)))};
  c.pw2_b = Param{prefix + ".pw2_b", Tensor({D})};
  return c;
}

Var conv_module_forward(ConvModule& c, Var x) {
  Tape& t = *x.tape;
  int D = t.val(x).shape[1];
  Var h = ln_forward(c.ln_in, x);
  h = linear(h, t.use(c.pw1_w), t.use(c.pw1_b));
  h = mul(slice_cols(h, 0, D), sigmoid(slice_cols(h, D, 2 * D)));  // GLU
  int pad = (c.k - 1) / 2;
  h = conv1d_depthwise(h, t.use(c.dw_w), t.use(c.dw_b), pad, pad);
  h = silu(ln_forward(c.ln_mid, h));
  return linear(h, t.use(c.pw2_w), t.use(c.pw2_b));
}

void EncoderBlock::collect_params(std::vector<Param*>& out) {
  if (bimamba) {
    bimamba->fwd.collect_params(out);
    if (!bimamba->tie_weights) bimamba->bwd.collect_params(out);
    if (!ab.disable_pre_ln) {
      out.push_back(&bimamba->bwd_ln_gamma);
      out.push_back(&bimamba->bwd_ln_beta);
    }
  }
  if (mono) mono->collect_params(out);
  if (mhsa) mhsa->collect_params(out);
  if (conv) conv->collect_params(out);
  if (ffn1) ffn1->collect_params(out);
  if (ffn2) ffn2->collect_params(out);
  for (auto* ln : {ln1.get(), ln2.get()})
    if (ln) {
      out.push_back(&ln->gamma);
      out.push_back(&ln->beta);
    }
}

void Encoder::collect_params(std::vector<Param*>& out) {
  for (EncoderBlock& b : blocks) b.collect_params(out);
}

static EncoderBlock make_block(const BlockConfig& cfg, Rng& rng, const std::string& prefix) {
  EncoderBlock b;
  b.variant = cfg.variant;
  b.ab = cfg.ablation;
  b.strict_eq16 = cfg.strict_eq16;
  b.dropout = cfg.dropout;
  bool mamba_variant = cfg.variant == Variant::TransBiMamba || cfg.variant == Variant::ConBiMamba ||
                       cfg.variant == Variant::PN_BiMamba;
  if (mamba_variant) {
    if (cfg.ablation.disable_bidirectional)
      b.mono = std::make_unique<MambaUnit>(
          make_mamba_unit(cfg.D, cfg.expand, cfg.n_state, cfg.conv_k, rng, cfg.ssm_skip, prefix + ".mamba"));
    else
      b.bimamba = std::make_unique<BiMambaUnit>(
          make_bimamba_unit(cfg.D, cfg.expand, cfg.n_state, cfg.conv_k, rng, cfg.ssm_skip, prefix + ".bimamba"));
  } else {
    b.mhsa = std::make_unique<Mhsa>(make_mhsa(cfg.D, cfg.mhsa_heads, rng, prefix + ".mhsa"));
  }
  bool macaron = cfg.variant == Variant::ConBiMamba || cfg.variant == Variant::Conformer;
  if (macaron) {
    b.conv = std::make_unique<ConvModule>(make_conv_module(cfg.D, cfg.conformer_conv_k, rng, prefix + ".conv"));
    if (!cfg.ablation.disable_ffn) {
      b.ffn1 = std::make_unique<Ffn>(make_ffn(cfg.D, cfg.ffn_mult, rng, prefix + ".ffn1"));
      b.ffn2 = std::make_unique<Ffn>(make_ffn(cfg.D, cfg.ffn_mult, rng, prefix + ".ffn2"));
    }
  } else if (!cfg.ablation.disable_ffn) {
    b.ffn1 = std::make_unique<Ffn>(make_ffn(cfg.D, cfg.ffn_mult, rng, prefix + ".ffn"));
  }
  switch (cfg.variant) {
    case Variant::PN_BiMamba:
      if (!cfg.ablation.disable_pre_ln) {
        b.ln1 = std::make_unique<LnParams>(make_ln(cfg.D, prefix + ".ln1"));
        b.ln2 = std::make_unique<LnParams>(make_ln(cfg.D, prefix + ".ln2"));
      }
      break;
    case Variant::TransBiMamba:
    case Variant::Transformer:
      b.ln1 = std::make_unique<LnParams>(make_ln(cfg.D, prefix + ".ln1"));
      if (!cfg.ablation.disable_ffn) b.ln2 = std::make_unique<LnParams>(make_ln(cfg.D, prefix + ".ln2"));
      break;
    case Variant::ConBiMamba:
    case Variant::Conformer:
      if (!cfg.ablation.disable_pre_ln) b.ln1 = std::make_unique<LnParams>(make_ln(cfg.D, prefix + ".ln1"));
      b.ln2 = std::make_unique<LnParams>(make_ln(cfg.D, prefix + ".ln2"));
      break;
  }
  return b;
}

Encoder make_encoder(const BlockConfig& cfg, Rng& rng, const std::string& prefix) {
  if (cfg.n_blocks < 0) throw std::invalid_argument("n_blocks must be >= 0");
  Encoder e;
  e.cfg = cfg;
  e.blocks.reserve(cfg.n_blocks);
  for (int i = 0; i < cfg.n_blocks; ++i)
    e.blocks.push_back(make_block(cfg, rng, prefix + ".b" + std::to_string(i)));
  return e;
}

namespace {

Var drop(Var v, const EncoderBlock& blk, Rng* rng, bool training) {
  return dropout(v, blk.dropout, rng, training);
}

// The core sequence unit: BiMamba, unidirectional Mamba under the ablation,
// or MHSA for the attention baselines.
Var mixer_forward(EncoderBlock& blk, Var raw, Var pre) {
  if (blk.mhsa) return mhsa_forward(*blk.mhsa, pre);
  if (blk.mono) return mamba_forward(*blk.mono, pre);
  return bimamba_forward(*blk.bimamba, raw, pre, !blk.ab.disable_pre_ln);
}

Var pn_block(EncoderBlock& blk, Var h_prev, Rng* rng, bool training) {
  Var htilde = blk.ln1 ? ln_forward(*blk.ln1, h_prev) : h_prev;
  Var hp = drop(mixer_forward(blk, h_prev, htilde), blk, rng, training);
  Var hpp = add(hp, h_prev);
  Var hppp = blk.ln2 ? ln_forward(*blk.ln2, hpp) : hpp;
  Var h4 = blk.strict_eq16 ? add(hppp, hpp) : hppp;
  if (!blk.ffn1) return h4;
  return add(drop(ffn_forward(*blk.ffn1, h4), blk, rng, training), hppp);
}

Var postnorm_block(EncoderBlock& blk, Var h_prev, Rng* rng, bool training) {
  Var mixed = drop(mixer_forward(blk, h_prev, h_prev), blk, rng, training);
  Var hp = ln_forward(*blk.ln1, add(mixed, h_prev));
  if (!blk.ffn1) return hp;
  Var f = drop(ffn_forward(*blk.ffn1, hp), blk, rng, training);
  return ln_forward(*blk.ln2, add(f, hp));
}

Var macaron_block(EncoderBlock& blk, Var h_prev, Rng* rng, bool training) {
  Var h = h_prev;
  if (blk.ffn1) h = add(h, scale(drop(ffn_forward(*blk.ffn1, h), blk, rng, training), 0.5));
  Var pre = blk.ln1 ? ln_forward(*blk.ln1, h) : h;
  h = add(h, drop(mixer_forward(blk, h, pre), blk, rng, training));
  h = add(h, drop(conv_module_forward(*blk.conv, h), blk, rng, training));
  if (blk.ffn2) h = add(h, scale(drop(ffn_forward(*blk.ffn2, h), blk, rng, training), 0.5));
  return ln_forward(*blk.ln2, h);
}

}  // namespace

Var block_forward(EncoderBlock& blk, Var h, Rng* drop_rng, bool training) {
  switch (blk.variant) {
    case Variant::PN_BiMamba: return pn_block(blk, h, drop_rng, training);
    case Variant::TransBiMamba:
    case Variant::Transformer: return postnorm_block(blk, h, drop_rng, training);
    case Variant::ConBiMamba:
    case Variant::Conformer: return macaron_block(blk, h, drop_rng, training);
  }
  throw std::logic_error("unreachable");
}

Var encoder_forward(Encoder& enc, Var h, Rng* drop_rng, bool training) {
  for (EncoderBlock& b : enc.blocks) h = block_forward(b, h, drop_rng, training);
  return h;
}

}  // namespace fmkit
