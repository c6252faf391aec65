#include "fmkit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

#include "fmkit/kernels.hpp"

namespace fmkit {

namespace {

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); }

enum class Bcast { same, b_scalar, a_scalar, b_col, a_col };

Bcast plan_bcast(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape == b.shape) return Bcast::same;
  if (b.numel() == 1) return Bcast::b_scalar;
  if (a.numel() == 1) return Bcast::a_scalar;
  if (a.rank() == 2 && b.rank() == 2 && b.shape[0] == a.shape[0] && b.shape[1] == 1) return Bcast::b_col;
  if (a.rank() == 2 && b.rank() == 2 && a.shape[0] == b.shape[0] && a.shape[1] == 1) return Bcast::a_col;
  shape_error(op, a, b);
}

inline bool a_is_full(Bcast p) { return p != Bcast::a_scalar && p != Bcast::a_col; }

inline int64_t side_index(Bcast plan, bool is_a, int64_t i, int cols) {
  switch (plan) {
    case Bcast::same: return i;
    case Bcast::b_scalar: return is_a ? i : 0;
    case Bcast::a_scalar: return is_a ? 0 : i;
    case Bcast::b_col: return is_a ? i : i / cols;
    case Bcast::a_col: return is_a ? i / cols : i;
  }
  return i;
}

struct BinPrep {
  Tape* t;
  Bcast plan;
  int cols;
  int64_t n;
  Tensor out;
};

BinPrep bin_prep(const char* op, Var a, Var b) {
  Tape& t = *a.tape;
  const Tensor& av = t.val(a);
  const Tensor& bv = t.val(b);
  Bcast plan = plan_bcast(op, av, bv);
  const Tensor& full = a_is_full(plan) ? av : bv;
  int cols = full.rank() == 2 ? full.shape[1] : 1;
  return BinPrep{&t, plan, cols, full.numel(), Tensor(full.shape)};
}

template <typename Fn>
Var unary_ew(Var x, Fn fn, Tape::BackFn back) {
  Tape& t = *x.tape;
  const Tensor& xv = t.val(x);
  Tensor out(xv.shape);
  for (int64_t i = 0; i < out.numel(); ++i) out.data[i] = fn(xv.data[i]);
  return t.make_node(std::move(out), {x}, std::move(back));
}

void require_rank2(const char* op, const Tensor& t) {
  if (t.rank() != 2) throw std::invalid_argument(std::string(op) + ": expected rank-2 tensor, got " + t.shape_str());
}

}  // namespace

Var add(Var a, Var b) {
  BinPrep p = bin_prep("add", a, b);
  const Tensor& av = p.t->val(a);
  const Tensor& bv = p.t->val(b);
  for (int64_t i = 0; i < p.n; ++i)
    p.out.data[i] = av.data[side_index(p.plan, true, i, p.cols)] + bv.data[side_index(p.plan, false, i, p.cols)];
  auto plan = p.plan;
  auto cols = p.cols;
  auto n = p.n;
  return p.t->make_node(std::move(p.out), {a, b}, [=](Tape& tp, int self) {
    const Tensor& g = tp.grad_at(self);
    if (tp.id_wants_grad(a.id)) {
      Tensor& da = tp.grad_buf(a.id);
      for (int64_t i = 0; i < n; ++i) da.data[side_index(plan, true, i, cols)] += g.data[i];
    }
    if (tp.id_wants_grad(b.id)) {
      Tensor& db = tp.grad_buf(b.id);
      for (int64_t i = 0; i < n; ++i) db.data[side_index(plan, false, i, cols)] += g.data[i];
    }
  });
}

Var sub(Var a, Var b) {
  BinPrep p = bin_prep("sub", a, b);
  const Tensor& av = p.t->val(a);
  const Tensor& bv = p.t->val(b);
  for (int64_t i = 0; i < p.n; ++i)
    p.out.data[i] = av.data[side_index(p.plan, true, i, p.cols)] - bv.data[side_index(p.plan, false, i, p.cols)];
  auto plan = p.plan;
  auto cols = p.cols;
  auto n = p.n;
  return p.t->make_node(std::move(p.out), {a, b}, [=](Tape& tp, int self) {
    const Tensor& g = tp.grad_at(self);
    if (tp.id_wants_grad(a.id)) {
      Tensor& da = tp.grad_buf(a.id);
      for (int64_t i = 0; i < n; ++i) da.data[side_index(plan, true, i, cols)] += g.data[i];
    }
    if (tp.id_wants_grad(b.id)) {
      Tensor& db = tp.grad_buf(b.id);
      for (int64_t i = 0; i < n; ++i) db.data[side_index(plan, false, i, cols)] -= g.data[i];
    }
  });
}

Var mul(Var a, Var b) {
  BinPrep p = bin_prep("mul", a, b);
  const Tensor& av = p.t->val(a);
  const Tensor& bv = p.t->val(b);
  for (int64_t i = 0; i < p.n; ++i)
    p.out.data[i] = av.data[side_index(p.plan, true, i, p.cols)] * bv.data[side_index(p.plan, false, i, p.cols)];
  auto plan = p.plan;
  auto cols = p.cols;
  auto n = p.n;
  return p.t->make_node(std::move(p.out), {a, b}, [=](Tape& tp, int self) {
    const Tensor& g = tp.grad_at(self);
    const Tensor& av2 = tp.val(a);
    const Tensor& bv2 = tp.val(b);
    if (tp.id_wants_grad(a.id)) {
      Tensor& da = tp.grad_buf(a.id);
      for (int64_t i = 0; i < n; ++i)
        da.data[side_index(plan, true, i, cols)] += g.data[i] * bv2.data[side_index(plan, false, i, cols)];
    }
    if (tp.id_wants_grad(b.id)) {
      Tensor& db = tp.grad_buf(b.id);
      for (int64_t i = 0; i < n; ++i)
        db.data[side_index(plan, false, i, cols)] += g.data[i] * av2.data[side_index(plan, true, i, cols)];
    }
  });
}

Var add_bias(Var x, Var b) {
  Tape& t = *x.tape;
  const Tensor& xv = t.val(x);
  const Tensor& bv = t.val(b);
  require_rank2("add_bias", xv);
  if (bv.rank() != 1 || bv.shape[0] != xv.shape[1]) shape_error("add_bias", xv, bv);
  int rows = xv.shape[0], cols = xv.shape[1];
  Tensor out(xv.shape);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) out.at(i, j) = xv.at(i, j) + bv.at(j);
  return t.make_node(std::move(out), {x, b}, [=](Tape& tp, int self) {
    const Tensor& g = tp.grad_at(self);
    if (tp.id_wants_grad(x.id)) {
      Tensor& dx = tp.grad_buf(x.id);
      for (int64_t i = 0; i < g.numel(); ++i) dx.data[i] += g.data[i];
    }
    if (tp.id_wants_grad(b.id)) {
      Tensor& db = tp.grad_buf(b.id);
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) db.at(j) += g.at(i, j);
    }
  });
}

Var scale(Var x, double c) {
  return unary_ew(
      x, [c](double v) { return c * v; },
      [x, c](Tape& tp, int self) {
        if (!tp.id_wants_grad(x.id)) return;
        const Tensor& g = tp.grad_at(self);
        Tensor& dx = tp.grad_buf(x.id);
        for (int64_t i = 0; i < g.numel(); ++i) dx.data[i] += c * g.data[i];
      });
}

Var silu(Var x) {
  return unary_ew(
      x, [](double v) { return v * stable_sigmoid(v); },
      [x](Tape& tp, int self) {
        if (!tp.id_wants_grad(x.id)) return;
        const Tensor& g = tp.grad_at(self);
        const Tensor& xv = tp.val(x);
        Tensor& dx = tp.grad_buf(x.id);
        for (int64_t i = 0; i < g.numel(); ++i) {
          double s = stable_sigmoid(xv.data[i]);
          dx.data[i] += g.data[i] * (s + xv.data[i] * s * (1.0 - s));
        }
      });
}

Var sigmoid(Var x) {
  return unary_ew(
      x, [](double v) { return stable_sigmoid(v); },
      [x](Tape& tp, int self) {
        if (!tp.id_wants_grad(x.id)) return;
        const Tensor& g = tp.grad_at(self);
        const Tensor& y = tp.val_at(self);
        Tensor& dx = tp.grad_buf(x.id);
        for (int64_t i = 0; i < g.numel(); ++i) dx.data[i] += g.data[i] * y.data[i] * (1.0 - y.data[i]);
      });
}

Var softplus(Var x) {
  return unary_ew(
      x, [](double v) { return stable_softplus(v); },
      [x](Tape& tp, int self) {
        if (!tp.id_wants_grad(x.id)) return;
        const Tensor& g = tp.grad_at(self);
        const Tensor& xv = tp.val(x);
        Tensor& dx = tp.grad_buf(x.id);
        for (int64_t i = 0; i < g.numel(); ++i) dx.data[i] += g.data[i] * stable_sigmoid(xv.data[i]);
      });
}

Var exp_of(Var x) {
  return unary_ew(
      x, [](double v) { return std::exp(v); },
      [x](Tape& tp, int self) {
        if (!tp.id_wants_grad(x.id)) return;
        const Tensor& g = tp.grad_at(self);
        const Tensor& y = tp.val_at(self);
        Tensor& dx = tp.grad_buf(x.id);
        for (int64_t i = 0; i < g.numel(); ++i) dx.data[i] += g.data[i] * y.data[i];
      });
}

Var tanh_of(Var x) {
  return unary_ew(
      x, [](double v) { return std::tanh(v); },
      [x](Tape& tp, int self) {
        if (!tp.id_wants_grad(x.id)) return;
        const Tensor& g = tp.grad_at(self);
        const Tensor& y = tp.val_at(self);
        Tensor& dx = tp.grad_buf(x.id);
        for (int64_t i = 0; i < g.numel(); ++i) dx.data[i] += g.data[i] * (1.0 - y.data[i] * y.data[i]);
      });
}

Var sum_all(Var x) {
  Tape& t = *x.tape;
  const Tensor& xv = t.val(x);
  double s = 0.0;
  for (double v : xv.data) s += v;
  return t.make_node(Tensor::scalar(s), {x}, [x](Tape& tp, int self) {
    if (!tp.id_wants_grad(x.id)) return;
    double g = tp.grad_at(self).data[0];
    Tensor& dx = tp.grad_buf(x.id);
    for (double& v : dx.data) v += g;
  });
}

Var col_sum(Var x) {
  Tape& t = *x.tape;
  const Tensor& xv = t.val(x);
  require_rank2("col_sum", xv);
  int rows = xv.shape[0], cols = xv.shape[1];
  Tensor out({cols});
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) out.at(j) += xv.at(i, j);
  return t.make_node(std::move(out), {x}, [x, rows, cols](Tape& tp, int self) {
    if (!tp.id_wants_grad(x.id)) return;
    const Tensor& g = tp.grad_at(self);
    Tensor& dx = tp.grad_buf(x.id);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) dx.at(i, j) += g.at(j);
  });
}

Var matmul(Var a, Var b) {
  Tape& t = *a.tape;
  const Tensor& av = t.val(a);
  const Tensor& bv = t.val(b);
  require_rank2("matmul", av);
  require_rank2("matmul", bv);
  if (av.shape[1] != bv.shape[0]) shape_error("matmul", av, bv);
  int m = av.shape[0], k = av.shape[1], p = bv.shape[1];
  Tensor out({m, p});
  kern::matmul(av.data.data(), bv.data.data(), out.data.data(), m, k, p);
  return t.make_node(std::move(out), {a, b}, [a, b, m, k, p](Tape& tp, int self) {
    const Tensor& g = tp.grad_at(self);
    if (tp.id_wants_grad(a.id)) {
      Tensor& da = tp.grad_buf(a.id);
      kern::matmul_nt_acc(g.data.data(), tp.val(b).data.data(), da.data.data(), m, p, k);
    }
    if (tp.id_wants_grad(b.id)) {
      Tensor& db = tp.grad_buf(b.id);
      kern::matmul_tn_acc(tp.val(a).data.data(), g.data.data(), db.data.data(), m, k, p);
    }
  });
}

Var transpose(Var a) {
  Tape& t = *a.tape;
  const Tensor& av = t.val(a);
  require_rank2("transpose", av);
  int r = av.shape[0], c = av.shape[1];
  Tensor out({c, r});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.at(j, i) = av.at(i, j);
  return t.make_node(std::move(out), {a}, [a, r, c](Tape& tp, int self) {
    if (!tp.id_wants_grad(a.id)) return;
    const Tensor& g = tp.grad_at(self);
    Tensor& da = tp.grad_buf(a.id);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) da.at(i, j) += g.at(j, i);
  });
}

Var linear(Var x, Var w) { return matmul(x, w); }

Var linear(Var x, Var w, Var b) { return add_bias(matmul(x, w), b); }

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Tape& t = *x.tape;
  const Tensor& xv = t.val(x);
  const Tensor& gv = t.val(gamma);
  const Tensor& bv = t.val(beta);
  require_rank2("layer_norm", xv);
  int rows = xv.shape[0], cols = xv.shape[1];
  if (gv.rank() != 1 || gv.shape[0] != cols) shape_error("layer_norm(gamma)", xv, gv);
  if (bv.rank() != 1 || bv.shape[0] != cols) shape_error("layer_norm(beta)", xv, bv);

  auto xhat = std::make_shared<std::vector<double>>(static_cast<size_t>(rows) * cols);
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  Tensor out(xv.shape);
  for (int i = 0; i < rows; ++i) {
    double mean = 0.0;
    for (int j = 0; j < cols; ++j) mean += xv.at(i, j);
    mean /= cols;
    double var = 0.0;
    for (int j = 0; j < cols; ++j) {
      double d = xv.at(i, j) - mean;
      var += d * d;
    }
    var /= cols;
    double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (int j = 0; j < cols; ++j) {
      double xh = (xv.at(i, j) - mean) * is;
      (*xhat)[static_cast<size_t>(i) * cols + j] = xh;
      out.at(i, j) = gv.at(j) * xh + bv.at(j);
    }
  }
  if (!t.recording()) return t.make_node(std::move(out), {x, gamma, beta}, nullptr);
  return t.make_node(std::move(out), {x, gamma, beta}, [=](Tape& tp, int self) {
    const Tensor& g = tp.grad_at(self);
    const Tensor& gv2 = tp.val(gamma);
    if (tp.id_wants_grad(gamma.id)) {
      Tensor& dg = tp.grad_buf(gamma.id);
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) dg.at(j) += g.at(i, j) * (*xhat)[static_cast<size_t>(i) * cols + j];
    }
    if (tp.id_wants_grad(beta.id)) {
      Tensor& db = tp.grad_buf(beta.id);
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) db.at(j) += g.at(i, j);
    }
    if (tp.id_wants_grad(x.id)) {
      Tensor& dx = tp.grad_buf(x.id);
      for (int i = 0; i < rows; ++i) {
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (int j = 0; j < cols; ++j) {
          double dxh = g.at(i, j) * gv2.at(j);
          double xh = (*xhat)[static_cast<size_t>(i) * cols + j];
          sum_dxhat += dxh;
          sum_dxhat_xhat += dxh * xh;
        }
        double is = (*inv_std)[i];
        for (int j = 0; j < cols; ++j) {
          double dxh = g.at(i, j) * gv2.at(j);
          double xh = (*xhat)[static_cast<size_t>(i) * cols + j];
          dx.at(i, j) += is * (dxh - (sum_dxhat + xh * sum_dxhat_xhat) / cols);
        }
      }
    }
  });
}

Var conv1d_depthwise(Var x, Var w, Var b, int pad_left, int pad_right) {
  Tape& t = *x.tape;
  const Tensor& xv = t.val(x);
  const Tensor& wv = t.val(w);
  require_rank2("conv1d_depthwise", xv);
  require_rank2("conv1d_depthwise", wv);
  int T = xv.shape[0], E = xv.shape[1], k = wv.shape[1];
  if (wv.shape[0] != E) shape_error("conv1d_depthwise", xv, wv);
  if (pad_left + pad_right != k - 1)
    throw std::invalid_argument("conv1d_depthwise: pads must sum to kernel-1 to preserve length");
  bool has_bias = b.valid();
  Tensor out({T, E});
  if (has_bias) {
    const Tensor& bv = t.val(b);
    if (bv.rank() != 1 || bv.shape[0] != E) shape_error("conv1d_depthwise(bias)", xv, bv);
    for (int i = 0; i < T; ++i)
      for (int e = 0; e < E; ++e) out.at(i, e) = bv.at(e);
  }
  for (int j = 0; j < k; ++j) {
    for (int i = 0; i < T; ++i) {
      int s = i + j - pad_left;
      if (s < 0 || s >= T) continue;
      const double* xr = &xv.data[static_cast<size_t>(s) * E];
      double* orow = &out.data[static_cast<size_t>(i) * E];
      for (int e = 0; e < E; ++e) orow[e] += wv.at(e, j) * xr[e];
    }
  }
  std::vector<Var> parents = has_bias ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
  return t.make_node(std::move(out), parents, [=](Tape& tp, int self) {
    const Tensor& g = tp.grad_at(self);
    const Tensor& xv2 = tp.val(x);
    const Tensor& wv2 = tp.val(w);
    if (tp.id_wants_grad(x.id)) {
      Tensor& dx = tp.grad_buf(x.id);
      for (int j = 0; j < k; ++j)
        for (int i = 0; i < T; ++i) {
          int s = i + j - pad_left;
          if (s < 0 || s >= T) continue;
          double* dxr = &dx.data[static_cast<size_t>(s) * E];
          const double* gr = &g.data[static_cast<size_t>(i) * E];
          for (int e = 0; e < E; ++e) dxr[e] += wv2.at(e, j) * gr[e];
        }
    }
    if (tp.id_wants_grad(w.id)) {
      Tensor& dw = tp.grad_buf(w.id);
      for (int j = 0; j < k; ++j)
        for (int i = 0; i < T; ++i) {
          int s = i + j - pad_left;
          if (s < 0 || s >= T) continue;
          const double* xr = &xv2.data[static_cast<size_t>(s) * E];
          const double* gr = &g.data[static_cast<size_t>(i) * E];
          for (int e = 0; e < E; ++e) dw.at(e, j) += xr[e] * gr[e];
        }
    }
    if (has_bias && tp.id_wants_grad(b.id)) {
      Tensor& db = tp.grad_buf(b.id);
      for (int i = 0; i < T; ++i)
        for (int e = 0; e < E; ++e) db.at(e) += g.at(i, e);
    }
  });
}

Var softmax_rows(Var x) {
  Tape& t = *x.tape;
  const Tensor& xv = t.val(x);
  require_rank2("softmax_rows", xv);
  int rows = xv.shape[0], cols = xv.shape[1];
  Tensor out(xv.shape);
  for (int i = 0; i < rows; ++i) {
    double m = xv.at(i, 0);
    for (int j = 1; j < cols; ++j) m = std::max(m, xv.at(i, j));
    double z = 0.0;
    for (int j = 0; j < cols; ++j) {
      double e = std::exp(xv.at(i, j) - m);
      out.at(i, j) = e;
      z += e;
    }
    for (int j = 0; j < cols; ++j) out.at(i, j) /= z;
  }
  return t.make_node(std::move(out), {x}, [x, rows, cols](Tape& tp, int self) {
    if (!tp.id_wants_grad(x.id)) return;
    const Tensor& g = tp.grad_at(self);
    const Tensor& p = tp.val_at(self);
    Tensor& dx = tp.grad_buf(x.id);
    for (int i = 0; i < rows; ++i) {
      double dot = 0.0;
      for (int j = 0; j < cols; ++j) dot += g.at(i, j) * p.at(i, j);
      for (int j = 0; j < cols; ++j) dx.at(i, j) += p.at(i, j) * (g.at(i, j) - dot);
    }
  });
}

Var attention(Var q, Var k, Var v) {
  Tape& t = *q.tape;
  const Tensor& qv = t.val(q);
  const Tensor& kv = t.val(k);
  const Tensor& vv = t.val(v);
  require_rank2("attention", qv);
  if (!qv.same_shape(kv) || !qv.same_shape(vv)) shape_error("attention", qv, kv);
  int T = qv.shape[0], dh = qv.shape[1];
  double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor out({T, dh});

  if (!t.recording()) {
    // Streaming softmax over query blocks; probabilities are never kept.
    constexpr int kBlock = 128;
    std::vector<double> srow(static_cast<size_t>(kBlock) * T);
    for (int i0 = 0; i0 < T; i0 += kBlock) {
      int bi = std::min(kBlock, T - i0);
      std::fill(srow.begin(), srow.begin() + static_cast<size_t>(bi) * T, 0.0);
      kern::matmul_nt_acc(&qv.data[static_cast<size_t>(i0) * dh], kv.data.data(), srow.data(), bi, dh, T);
      for (int r = 0; r < bi; ++r) {
        double* s = &srow[static_cast<size_t>(r) * T];
        double m = -1e300;
        for (int j = 0; j < T; ++j) {
          s[j] *= sc;
          m = std::max(m, s[j]);
        }
        double z = 0.0;
        for (int j = 0; j < T; ++j) {
          s[j] = std::exp(s[j] - m);
          z += s[j];
        }
        double inv = 1.0 / z;
        for (int j = 0; j < T; ++j) s[j] *= inv;
      }
      kern::matmul_acc(srow.data(), vv.data.data(), &out.data[static_cast<size_t>(i0) * dh], bi, T, dh);
    }
    return t.make_node(std::move(out), {q, k, v}, nullptr);
  }

  auto probs = std::make_shared<Tensor>(std::vector<int>{T, T});
  kern::matmul_nt_acc(qv.data.data(), kv.data.data(), probs->data.data(), T, dh, T);
  for (int i = 0; i < T; ++i) {
    double m = -1e300;
    for (int j = 0; j < T; ++j) {
      probs->at(i, j) *= sc;
      m = std::max(m, probs->at(i, j));
    }
    double z = 0.0;
    for (int j = 0; j < T; ++j) {
      double e = std::exp(probs->at(i, j) - m);
      probs->at(i, j) = e;
      z += e;
    }
    for (int j = 0; j < T; ++j) probs->at(i, j) /= z;
  }
  kern::matmul(probs->data.data(), vv.data.data(), out.data.data(), T, T, dh);
  return t.make_node(std::move(out), {q, k, v}, [=](Tape& tp, int self) {
    const Tensor& g = tp.grad_at(self);
    const Tensor& qv2 = tp.val(q);
    const Tensor& kv2 = tp.val(k);
    const Tensor& vv2 = tp.val(v);
    if (tp.id_wants_grad(v.id)) {
      kern::matmul_tn_acc(probs->data.data(), g.data.data(), tp.grad_buf(v.id).data.data(), T, T, dh);
    }
    if (tp.id_wants_grad(q.id) || tp.id_wants_grad(k.id)) {
      Tensor dS({T, T});
      kern::matmul_nt_acc(g.data.data(), vv2.data.data(), dS.data.data(), T, dh, T);
      for (int i = 0; i < T; ++i) {
        double dot = 0.0;
        for (int j = 0; j < T; ++j) dot += dS.at(i, j) * probs->at(i, j);
        for (int j = 0; j < T; ++j) dS.at(i, j) = probs->at(i, j) * (dS.at(i, j) - dot) * sc;
      }
      if (tp.id_wants_grad(q.id)) kern::matmul_acc(dS.data.data(), kv2.data.data(), tp.grad_buf(q.id).data.data(), T, T, dh);
      if (tp.id_wants_grad(k.id)) kern::matmul_tn_acc(dS.data.data(), qv2.data.data(), tp.grad_buf(k.id).data.data(), T, T, dh);
    }
  });
}

Var cross_entropy(Var logits, int label) {
  Tape& t = *logits.tape;
  const Tensor& z = t.val(logits);
  if (z.rank() != 1) throw std::invalid_argument("cross_entropy: logits must be rank-1, got " + z.shape_str());
  int n = z.shape[0];
  if (label < 0 || label >= n) throw std::invalid_argument("cross_entropy: label out of range");
  double m = z.at(0);
  for (int i = 1; i < n; ++i) m = std::max(m, z.at(i));
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += std::exp(z.at(i) - m);
  double loss = m + std::log(s) - z.at(label);
  return t.make_node(Tensor::scalar(loss), {logits}, [logits, label, n](Tape& tp, int self) {
    if (!tp.id_wants_grad(logits.id)) return;
    double g = tp.grad_at(self).data[0];
    const Tensor& z2 = tp.val(logits);
    Tensor& dz = tp.grad_buf(logits.id);
    double m2 = z2.at(0);
    for (int i = 1; i < n; ++i) m2 = std::max(m2, z2.at(i));
    double s2 = 0.0;
    for (int i = 0; i < n; ++i) s2 += std::exp(z2.at(i) - m2);
    for (int i = 0; i < n; ++i) {
      double p = std::exp(z2.at(i) - m2) / s2;
      dz.at(i) += g * (p - (i == label ? 1.0 : 0.0));
    }
  });
}

Var slice_cols(Var x, int c0, int c1) {
  Tape& t = *x.tape;
  const Tensor& xv = t.val(x);
  require_rank2("slice_cols", xv);
  int T = xv.shape[0], D = xv.shape[1];
  if (c0 < 0 || c1 > D || c0 >= c1) throw std::invalid_argument("slice_cols: bad range");
  int w = c1 - c0;
  Tensor out({T, w});
  for (int i = 0; i < T; ++i)
    for (int j = 0; j < w; ++j) out.at(i, j) = xv.at(i, c0 + j);
  return t.make_node(std::move(out), {x}, [x, c0, w, T](Tape& tp, int self) {
    if (!tp.id_wants_grad(x.id)) return;
    const Tensor& g = tp.grad_at(self);
    Tensor& dx = tp.grad_buf(x.id);
    for (int i = 0; i < T; ++i)
      for (int j = 0; j < w; ++j) dx.at(i, c0 + j) += g.at(i, j);
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  Tape& t = *parts[0].tape;
  int T = t.val(parts[0]).shape[0];
  int total = 0;
  for (const Var& p : parts) {
    const Tensor& pv = t.val(p);
    require_rank2("concat_cols", pv);
    if (pv.shape[0] != T) throw std::invalid_argument("concat_cols: row mismatch");
    total += pv.shape[1];
  }
  Tensor out({T, total});
  int off = 0;
  std::vector<int> offsets;
  for (const Var& p : parts) {
    const Tensor& pv = t.val(p);
    offsets.push_back(off);
    for (int i = 0; i < T; ++i)
      for (int j = 0; j < pv.shape[1]; ++j) out.at(i, off + j) = pv.at(i, j);
    off += pv.shape[1];
  }
  return t.make_node(std::move(out), parts, [parts, offsets, T](Tape& tp, int self) {
    const Tensor& g = tp.grad_at(self);
    for (size_t pi = 0; pi < parts.size(); ++pi) {
      if (!tp.id_wants_grad(parts[pi].id)) continue;
      Tensor& dp = tp.grad_buf(parts[pi].id);
      int w = dp.shape[1];
      for (int i = 0; i < T; ++i)
        for (int j = 0; j < w; ++j) dp.at(i, j) += g.at(i, offsets[pi] + j);
    }
  });
}

Var flip(Var x) {
  Tape& t = *x.tape;
  const Tensor& xv = t.val(x);
  require_rank2("flip", xv);
  int T = xv.shape[0], D = xv.shape[1];
  Tensor out({T, D});
  for (int i = 0; i < T; ++i)
    for (int j = 0; j < D; ++j) out.at(i, j) = xv.at(T - 1 - i, j);
  return t.make_node(std::move(out), {x}, [x, T, D](Tape& tp, int self) {
    if (!tp.id_wants_grad(x.id)) return;
    const Tensor& g = tp.grad_at(self);
    Tensor& dx = tp.grad_buf(x.id);
    for (int i = 0; i < T; ++i)
      for (int j = 0; j < D; ++j) dx.at(T - 1 - i, j) += g.at(i, j);
  });
}

Var reshape(Var x, std::vector<int> shape) {
  Tape& t = *x.tape;
  const Tensor& xv = t.val(x);
  if (numel_of(shape) != xv.numel())
    throw std::invalid_argument("reshape: element count mismatch for " + xv.shape_str());
  Tensor out = xv;
  out.shape = shape;
  return t.make_node(std::move(out), {x}, [x](Tape& tp, int self) {
    if (!tp.id_wants_grad(x.id)) return;
    const Tensor& g = tp.grad_at(self);
    Tensor& dx = tp.grad_buf(x.id);
    for (int64_t i = 0; i < g.numel(); ++i) dx.data[i] += g.data[i];
  });
}

Var dropout(Var x, double p, Rng* rng, bool active) {
  if (!active || p <= 0.0) return x;
  if (p >= 1.0) throw std::invalid_argument("dropout: p must be < 1");
  Tape& t = *x.tape;
  const Tensor& xv = t.val(x);
  double keep = 1.0 - p;
  auto mask = std::make_shared<std::vector<double>>(xv.numel());
  Tensor out(xv.shape);
  for (int64_t i = 0; i < xv.numel(); ++i) {
    double m = (rng->uniform(0.0, 1.0) < keep) ? 1.0 / keep : 0.0;
    (*mask)[i] = m;
    out.data[i] = xv.data[i] * m;
  }
  return t.make_node(std::move(out), {x}, [x, mask](Tape& tp, int self) {
    if (!tp.id_wants_grad(x.id)) return;
    const Tensor& g = tp.grad_at(self);
    Tensor& dx = tp.grad_buf(x.id);
    for (int64_t i = 0; i < g.numel(); ++i) dx.data[i] += g.data[i] * (*mask)[i];
  });
}

}  // namespace fmkit
