#include "fmkit/mamba.hpp"

#include <cmath>
#include <stdexcept>

#include "fmkit/ops.hpp"

namespace fmkit {

namespace {

void check_finite(Tape& t, const Var& v, const char* stage) {
  if (!t.val(v).all_finite())
    throw std::runtime_error(std::string("mamba_forward: non-finite values after ") + stage);
}

}  // namespace

void MambaUnit::collect_params(std::vector<Param*>& out) {
  out.push_back(&w_in_x);
  out.push_back(&w_in_z);
  out.push_back(&conv_w);
  out.push_back(&conv_b);
  out.push_back(&w_out);
  out.push_back(&ssm.A_log);
  out.push_back(&ssm.W_delta);
  out.push_back(&ssm.b_delta);
  out.push_back(&ssm.W_B);
  out.push_back(&ssm.W_C);
  if (ssm.use_skip) out.push_back(&ssm.D_skip);
}

MambaUnit make_mamba_unit(int D, int expand, int N, int conv_k, Rng& rng, bool use_skip,
                          const std::string& prefix) {
  if (expand < 1) throw std::invalid_argument("make_mamba_unit: expand must be >= 1");
  MambaUnit u;
  u.D = D;
  u.E = expand * D;
  u.conv_k = conv_k;
  u.w_in_x = Param{prefix + ".w_in_x", randn({D, u.E}, rng, 1.0 / std::sqrt(double(D)))};
  u.w_in_z = Param{prefix + ".w_in_z", randn({D, u.E}, rng, 1.0 / std::sqrt(double(D)))};
  u.conv_w = Param{prefix + ".conv_w", randn({u.E, conv_k}, rng, 1.0 / std::sqrt(double(conv_k)))};
  // center each channel's taps: zero DC gain at init, so the conv starts as a
  // high-pass and slow per-utterance level drift cancels before the scan.
  for (int e = 0; e < u.E; ++e) {
    double mean = 0.0;
    for (int k = 0; k < conv_k; ++k) mean += u.conv_w.value.at(e, k);
    mean /= conv_k;
    for (int k = 0; k < conv_k; ++k) u.conv_w.value.at(e, k) -= mean;
  }
  u.conv_b = Param{prefix + ".conv_b", Tensor({u.E})};
  u.w_out = Param{prefix + ".w_out", randn({u.E, D}, rng, 1.0 / std::sqrt(double(u.E)))};
  u.ssm = make_selective_params(u.E, N, rng, use_skip, prefix + ".ssm");
  return u;
}

Var mamba_forward(MambaUnit& u, Var h) {
  Tape& t = *h.tape;
  if (t.val(h).rank() != 2 || t.val(h).shape[1] != u.D)
    throw std::invalid_argument("mamba_forward: expected [T," + std::to_string(u.D) + "] input, got " +
                                t.val(h).shape_str());
  Var x = matmul(h, t.use(u.w_in_x));
  Var z = matmul(h, t.use(u.w_in_z));
  check_finite(t, x, "in_proj");
  Var xa = silu(conv1d_depthwise(x, t.use(u.conv_w), t.use(u.conv_b), u.conv_k - 1, 0));
  check_finite(t, xa, "conv");
  Var y = mul(selective_scan(xa, u.ssm), silu(z));
  check_finite(t, y, "ssm_gate");
  Var out = matmul(y, t.use(u.w_out));
  check_finite(t, out, "out_proj");
  return out;
}

void BiMambaUnit::collect_params(std::vector<Param*>& out) {
  fwd.collect_params(out);
  if (!tie_weights) bwd.collect_params(out);
  out.push_back(&bwd_ln_gamma);
  out.push_back(&bwd_ln_beta);
}

BiMambaUnit make_bimamba_unit(int D, int expand, int N, int conv_k, Rng& rng, bool use_skip,
                              const std::string& prefix) {
  BiMambaUnit b;
  b.fwd = make_mamba_unit(D, expand, N, conv_k, rng, use_skip, prefix + ".fwd");
  b.bwd = make_mamba_unit(D, expand, N, conv_k, rng, use_skip, prefix + ".bwd");
  b.bwd_ln_gamma = Param{prefix + ".bwd_ln.gamma", Tensor({D}, 1.0)};
  b.bwd_ln_beta = Param{prefix + ".bwd_ln.beta", Tensor({D})};
  return b;
}

Var bimamba_forward(BiMambaUnit& b, Var h_raw, Var h_pre_normed, bool use_backward_ln) {
  Tape& t = *h_raw.tape;
  Var h_fwd = mamba_forward(b.fwd, h_pre_normed);
  Var rev = flip(h_raw);
  if (use_backward_ln) rev = layer_norm(rev, t.use(b.bwd_ln_gamma), t.use(b.bwd_ln_beta));
  Var h_bwd = flip(mamba_forward(b.tie_weights ? b.fwd : b.bwd, rev));
  return add(h_fwd, h_bwd);
}

int64_t total_params(const std::vector<Param*>& ps) {
  int64_t n = 0;
  for (const Param* p : ps) n += p->value.numel();
  return n;
}

}  // namespace fmkit
