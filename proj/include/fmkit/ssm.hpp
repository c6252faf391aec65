#pragma once

#include <string>

#include "fmkit/tape.hpp"
#include "fmkit/tensor.hpp"

namespace fmkit {

// Continuous-time LTI system x' = Ax + Bu, y = Cx with step size delta.
// A is either dense [N,N] or diagonal, stored as a rank-1 [N] tensor.
// B and C are length-N vectors.
struct LtiParams {
  Tensor A;
  Tensor B;
  Tensor C;
  double delta = 0.0;
};

// Discretized system. A_d keeps A's storage class.
struct LtiDiscrete {
  Tensor A_d;
  Tensor B_d;
  Tensor C;
};

// Dense matrix exponential by scaling-and-squaring with a Taylor tail.
Tensor matrix_exp(const Tensor& m);

// Zero-order hold: A_d = exp(dA), B_d = (dA)^{-1}(exp(dA) - I) dB.
// Diagonal systems go through the scalar formula with the a -> 0 limit;
// a singular dense dA throws.
LtiDiscrete discretize_zoh(const LtiParams& p);

// y_t = C g_t with g_t = A_d g_{t-1} + B_d x_t, g_0 = 0. x is rank-1 [T].
Tensor scan_recurrent(const LtiDiscrete& p, const Tensor& x);

// K_d[i] = C A_d^i B_d for i = 0..len-1.
Tensor lti_kernel(const LtiDiscrete& p, int len);

// Causal convolution of x with the length-T kernel; equals scan_recurrent
// for any time-invariant system.
Tensor kernel_convolution(const LtiDiscrete& p, const Tensor& x);

// Parameters of the input-selective scan over a [T,E] activation:
//   delta_t = softplus(x_t W_delta + b_delta)   [T,E]
//   B_t = x_t W_B, C_t = x_t W_C                [T,N]
//   A = -exp(A_log)                             [E,N], diagonal per channel
//   s_t = exp(delta_t A) s_{t-1} + delta_t B_t x_t;  y_t = C_t s_t (+ D x_t)
// The B discretization is the Euler form delta*B, not full ZOH.
struct SelectiveParams {
  Param A_log;    // [E,N]
  Param W_delta;  // [E,E]
  Param b_delta;  // [E]
  Param W_B;      // [E,N]
  Param W_C;      // [E,N]
  Param D_skip;   // [E]
  bool use_skip = true;
};

// A_log[e,n] = log(n+1); softplus(b_delta) log-uniform in [1e-3, 0.1];
// projections scaled by 1/sqrt(E); D_skip = 1.
SelectiveParams make_selective_params(int E, int N, Rng& rng, bool use_skip,
                                      const std::string& prefix);

// Fused scan primitive: one tape node covering the projections, the
// discretization and the recurrence, with a hand-derived backward.
Var selective_scan(Var x, SelectiveParams& sp);

}  // namespace fmkit
