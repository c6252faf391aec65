#pragma once

#include <vector>

#include "fmkit/tape.hpp"

namespace fmkit {

// Binary elementwise ops accept equal shapes, a scalar on either side, or a
// trailing singleton axis ([R,1] against [R,C]). Anything else throws.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);

// y[t,:] = x[t,:] + b for a [T,D] input and [D] bias.
Var add_bias(Var x, Var b);
Var scale(Var x, double c);

Var silu(Var x);
Var sigmoid(Var x);
Var softplus(Var x);
Var exp_of(Var x);
Var tanh_of(Var x);

Var sum_all(Var x);                 // -> [1]
Var col_sum(Var x);                 // [T,D] -> [D]

Var matmul(Var a, Var b);           // [M,K]x[K,P]
Var transpose(Var a);
Var linear(Var x, Var w);           // x[T,D] * w[D,P]
Var linear(Var x, Var w, Var b);

Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

// Depthwise 1-D convolution over time. x[T,E], w[E,k], optional b[E].
// pad_left + pad_right must equal k-1 so the length is preserved.
Var conv1d_depthwise(Var x, Var w, Var b, int pad_left, int pad_right);

Var softmax_rows(Var x);

// Scaled dot-product attention for one head: softmax(q k^T / sqrt(dh)) v.
// The non-recording path streams over query blocks and never materializes
// the T x T probability matrix.
Var attention(Var q, Var k, Var v);

// -log softmax(logits)[label] for a rank-1 logits vector.
Var cross_entropy(Var logits, int label);

Var slice_cols(Var x, int c0, int c1);
Var concat_cols(const std::vector<Var>& parts);

// Reverses the time axis of [T,D] (channels untouched).
Var flip(Var x);

Var reshape(Var x, std::vector<int> shape);

// Inverted dropout; identity when active is false (eval, gradcheck).
Var dropout(Var x, double p, Rng* rng, bool active);

}  // namespace fmkit
