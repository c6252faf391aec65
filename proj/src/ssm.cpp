#include "fmkit/ssm.hpp"

#include <cmath>
#include <cstring>
#include <memory>
#include <stdexcept>
#include <vector>

#include "fmkit/kernels.hpp"

namespace fmkit {

namespace {

double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); }

// (e^x - 1)/x with the removable singularity at 0.
double phi1(double x) { return x == 0.0 ? 1.0 : std::expm1(x) / x; }

double inf_norm(const Tensor& m) {
  int n = m.shape[0];
  double best = 0.0;
  for (int i = 0; i < n; ++i) {
    double row = 0.0;
    for (int j = 0; j < n; ++j) row += std::fabs(m.at(i, j));
    best = std::max(best, row);
  }
  return best;
}

// Solves m v = r with partial pivoting; m and r are consumed.
std::vector<double> gauss_solve(Tensor m, std::vector<double> r) {
  int n = m.shape[0];
  double scale = 0.0;
  for (double v : m.data) scale = std::max(scale, std::fabs(v));
  for (int c = 0; c < n; ++c) {
    int piv = c;
    for (int i = c + 1; i < n; ++i)
      if (std::fabs(m.at(i, c)) > std::fabs(m.at(piv, c))) piv = i;
    if (std::fabs(m.at(piv, c)) <= 1e-13 * std::max(scale, 1.0))
      throw std::domain_error("discretize_zoh: dA is singular; use diagonal storage for systems with zero modes");
    if (piv != c) {
      for (int j = 0; j < n; ++j) std::swap(m.at(c, j), m.at(piv, j));
      std::swap(r[c], r[piv]);
    }
    for (int i = c + 1; i < n; ++i) {
      double f = m.at(i, c) / m.at(c, c);
      if (f == 0.0) continue;
      for (int j = c; j < n; ++j) m.at(i, j) -= f * m.at(c, j);
      r[i] -= f * r[c];
    }
  }
  for (int i = n - 1; i >= 0; --i) {
    double s = r[i];
    for (int j = i + 1; j < n; ++j) s -= m.at(i, j) * r[j];
    r[i] = s / m.at(i, i);
  }
  return r;
}

void check_lti(const LtiDiscrete& p, const Tensor& x) {
  if (x.rank() != 1 || x.numel() == 0) throw std::invalid_argument("lti scan: x must be rank-1 and non-empty");
  int n = p.B_d.numel();
  if (p.C.numel() != n) throw std::invalid_argument("lti scan: B_d/C length mismatch");
  bool diag = p.A_d.rank() == 1;
  if (diag ? p.A_d.numel() != n : (p.A_d.rank() != 2 || p.A_d.shape[0] != n || p.A_d.shape[1] != n))
    throw std::invalid_argument("lti scan: A_d shape mismatch");
}

}  // namespace

Tensor matrix_exp(const Tensor& m) {
  if (m.rank() != 2 || m.shape[0] != m.shape[1])
    throw std::invalid_argument("matrix_exp: expected square matrix, got " + m.shape_str());
  int n = m.shape[0];
  int squarings = 0;
  double nrm = inf_norm(m);
  while (nrm > 0.5) {
    nrm *= 0.5;
    ++squarings;
  }
  double inv = std::ldexp(1.0, -squarings);
  Tensor t = m;
  for (double& v : t.data) v *= inv;

  Tensor e({n, n});
  Tensor term({n, n});
  for (int i = 0; i < n; ++i) e.at(i, i) = term.at(i, i) = 1.0;
  for (int k = 1; k <= 40; ++k) {
    Tensor next({n, n});
    kern::matmul(term.data.data(), t.data.data(), next.data.data(), n, n, n);
    double f = 1.0 / k;
    for (double& v : next.data) v *= f;
    term = std::move(next);
    double tn = 0.0;
    for (int64_t i = 0; i < term.numel(); ++i) {
      e.data[i] += term.data[i];
      tn = std::max(tn, std::fabs(term.data[i]));
    }
    if (tn < 1e-18) break;
  }
  for (int s = 0; s < squarings; ++s) {
    Tensor sq({n, n});
    kern::matmul(e.data.data(), e.data.data(), sq.data.data(), n, n, n);
    e = std::move(sq);
  }
  return e;
}

LtiDiscrete discretize_zoh(const LtiParams& p) {
  if (p.delta <= 0.0) throw std::invalid_argument("discretize_zoh: delta must be positive");
  int n = p.B.numel();
  LtiDiscrete out;
  out.C = p.C;
  out.C.shape = {n};
  if (p.A.rank() == 1) {
    if (p.A.numel() != n) throw std::invalid_argument("discretize_zoh: diagonal A length mismatch");
    out.A_d = Tensor({n});
    out.B_d = Tensor({n});
    for (int i = 0; i < n; ++i) {
      double da = p.delta * p.A.at(i);
      out.A_d.at(i) = std::exp(da);
      out.B_d.at(i) = phi1(da) * p.delta * p.B.data[i];
    }
    return out;
  }
  if (p.A.rank() != 2 || p.A.shape[0] != n || p.A.shape[1] != n)
    throw std::invalid_argument("discretize_zoh: A shape mismatch");
  Tensor da = p.A;
  for (double& v : da.data) v *= p.delta;
  out.A_d = matrix_exp(da);
  // (dA) B_d = (A_d - I) dB
  std::vector<double> rhs(n);
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += (out.A_d.at(i, j) - (i == j ? 1.0 : 0.0)) * p.delta * p.B.data[j];
    rhs[i] = s;
  }
  out.B_d = Tensor({n});
  out.B_d.data = gauss_solve(da, std::move(rhs));
  return out;
}

Tensor scan_recurrent(const LtiDiscrete& p, const Tensor& x) {
  check_lti(p, x);
  int T = static_cast<int>(x.numel());
  int n = p.B_d.numel();
  bool diag = p.A_d.rank() == 1;
  Tensor y({T});
  std::vector<double> g(n, 0.0), tmp(n);
  for (int t = 0; t < T; ++t) {
    if (diag) {
      for (int i = 0; i < n; ++i) g[i] = p.A_d.at(i) * g[i] + p.B_d.at(i) * x.at(t);
    } else {
      for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = 0; j < n; ++j) s += p.A_d.at(i, j) * g[j];
        tmp[i] = s + p.B_d.at(i) * x.at(t);
      }
      g = tmp;
    }
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += p.C.data[i] * g[i];
    y.at(t) = s;
  }
  return y;
}

Tensor lti_kernel(const LtiDiscrete& p, int len) {
  if (len <= 0) throw std::invalid_argument("lti_kernel: len must be positive");
  int n = p.B_d.numel();
  bool diag = p.A_d.rank() == 1;
  Tensor k({len});
  std::vector<double> v(p.B_d.data.begin(), p.B_d.data.end()), tmp(n);
  for (int i = 0; i < len; ++i) {
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += p.C.data[j] * v[j];
    k.at(i) = s;
    if (i + 1 == len) break;
    if (diag) {
      for (int j = 0; j < n; ++j) v[j] *= p.A_d.at(j);
    } else {
      for (int r = 0; r < n; ++r) {
        double s2 = 0.0;
        for (int c = 0; c < n; ++c) s2 += p.A_d.at(r, c) * v[c];
        tmp[r] = s2;
      }
      v = tmp;
    }
  }
  return k;
}

Tensor kernel_convolution(const LtiDiscrete& p, const Tensor& x) {
  check_lti(p, x);
  int T = static_cast<int>(x.numel());
  Tensor k = lti_kernel(p, T);
  Tensor y({T});
  for (int t = 0; t < T; ++t) {
    double s = 0.0;
    for (int i = 0; i <= t; ++i) s += k.at(i) * x.at(t - i);
    y.at(t) = s;
  }
  return y;
}

SelectiveParams make_selective_params(int E, int N, Rng& rng, bool use_skip,
                                      const std::string& prefix) {
  SelectiveParams sp;
  sp.use_skip = use_skip;
  sp.A_log = Param{prefix + ".A_log", Tensor({E, N})};
  for (int e = 0; e < E; ++e)
    for (int n = 0; n < N; ++n) sp.A_log.value.at(e, n) = std::log(static_cast<double>(n + 1));
  double s = 1.0 / std::sqrt(static_cast<double>(E));
  sp.W_delta = Param{prefix + ".W_delta", randn({E, E}, rng, s)};
  sp.b_delta = Param{prefix + ".b_delta", Tensor({E})};
  for (int e = 0; e < E; ++e) {
    double dt = std::exp(rng.uniform(std::log(1e-3), std::log(0.1)));
    sp.b_delta.value.at(e) = std::log(std::expm1(dt));  // softplus inverse
  }
  sp.W_B = Param{prefix + ".W_B", randn({E, N}, rng, s)};
  sp.W_C = Param{prefix + ".W_C", randn({E, N}, rng, s)};
  sp.D_skip = Param{prefix + ".D_skip", Tensor({E}, 1.0)};
  return sp;
}

Var selective_scan(Var x, SelectiveParams& sp) {
  Tape& t = *x.tape;
  const bool use_skip = sp.use_skip;
  Var va = t.use(sp.A_log);
  Var vwd = t.use(sp.W_delta);
  Var vbd = t.use(sp.b_delta);
  Var vwb = t.use(sp.W_B);
  Var vwc = t.use(sp.W_C);
  Var vd = use_skip ? t.use(sp.D_skip) : Var{};

  const Tensor& xv = t.val(x);
  const Tensor& alog = t.val(va);
  const Tensor& wd = t.val(vwd);
  const Tensor& bd = t.val(vbd);
  const Tensor& wb = t.val(vwb);
  const Tensor& wc = t.val(vwc);
  if (xv.rank() != 2) throw std::invalid_argument("selective_scan: x must be [T,E], got " + xv.shape_str());
  const int T = xv.shape[0], E = xv.shape[1];
  if (alog.rank() != 2 || alog.shape[0] != E) throw std::invalid_argument("selective_scan: A_log must be [E,N]");
  const int N = alog.shape[1];
  if (wd.shape != std::vector<int>{E, E} || bd.numel() != E ||
      wb.shape != std::vector<int>{E, N} || wc.shape != std::vector<int>{E, N})
    throw std::invalid_argument("selective_scan: projection shape mismatch");
  if (use_skip && t.val(vd).numel() != E) throw std::invalid_argument("selective_scan: D_skip must be [E]");

  const bool rec = t.recording();
  auto delta = std::make_shared<std::vector<double>>(static_cast<size_t>(T) * E);
  auto bt = std::make_shared<std::vector<double>>(static_cast<size_t>(T) * N);
  auto ct = std::make_shared<std::vector<double>>(static_cast<size_t>(T) * N);
  kern::matmul(xv.data.data(), wd.data.data(), delta->data(), T, E, E);
  for (int tt = 0; tt < T; ++tt)
    for (int e = 0; e < E; ++e) {
      double& v = (*delta)[static_cast<size_t>(tt) * E + e];
      v = stable_softplus(v + bd.data[e]);
    }
  kern::matmul(xv.data.data(), wb.data.data(), bt->data(), T, E, N);
  kern::matmul(xv.data.data(), wc.data.data(), ct->data(), T, E, N);

  std::vector<double> A(static_cast<size_t>(E) * N);
  for (size_t i = 0; i < A.size(); ++i) A[i] = -std::exp(alog.data[i]);

  auto states = rec ? std::make_shared<std::vector<double>>(static_cast<size_t>(T) * E * N) : nullptr;
  std::vector<double> g(static_cast<size_t>(E) * N, 0.0);
  const double* dskip = use_skip ? t.val(vd).data.data() : nullptr;
  Tensor y({T, E});
  for (int tt = 0; tt < T; ++tt) {
    const double* de = &(*delta)[static_cast<size_t>(tt) * E];
    const double* bRow = &(*bt)[static_cast<size_t>(tt) * N];
    const double* cRow = &(*ct)[static_cast<size_t>(tt) * N];
    const double* xRow = &xv.data[static_cast<size_t>(tt) * E];
    double* yRow = &y.data[static_cast<size_t>(tt) * E];
    bool finite = true;
    for (int e = 0; e < E; ++e) {
      double* ge = &g[static_cast<size_t>(e) * N];
      const double* Ae = &A[static_cast<size_t>(e) * N];
      const double d_te = de[e], x_te = xRow[e];
      double acc = 0.0;
      for (int n = 0; n < N; ++n) {
        double s = std::exp(d_te * Ae[n]) * ge[n] + d_te * bRow[n] * x_te;
        ge[n] = s;
        acc += cRow[n] * s;
      }
      finite = finite && std::isfinite(acc);
      yRow[e] = acc + (use_skip ? dskip[e] * x_te : 0.0);
    }
    if (!finite) {
      for (double v : g)
        if (!std::isfinite(v))
          throw std::runtime_error("selective_scan: non-finite state at timestep " + std::to_string(tt));
      throw std::runtime_error("selective_scan: non-finite output at timestep " + std::to_string(tt));
    }
    if (rec) std::memcpy(&(*states)[static_cast<size_t>(tt) * E * N], g.data(), g.size() * sizeof(double));
  }

  std::vector<Var> parents = {x, va, vwd, vbd, vwb, vwc};
  if (use_skip) parents.push_back(vd);
  if (!rec) return t.make_node(std::move(y), parents, nullptr);

  return t.make_node(std::move(y), parents, [=](Tape& tp, int self) {
    const Tensor& gy = tp.grad_at(self);
    const Tensor& xv2 = tp.val(x);
    const Tensor& alog2 = tp.val(va);
    const Tensor& wd2 = tp.val(vwd);
    const Tensor& wb2 = tp.val(vwb);
    const Tensor& wc2 = tp.val(vwc);
    const double* dv2 = use_skip ? tp.val(vd).data.data() : nullptr;

    std::vector<double> A2(static_cast<size_t>(E) * N);
    for (size_t i = 0; i < A2.size(); ++i) A2[i] = -std::exp(alog2.data[i]);

    // running adjoint of the state plus per-node accumulators
    std::vector<double> gs(static_cast<size_t>(E) * N, 0.0);
    std::vector<double> d_delta(static_cast<size_t>(T) * E);
    std::vector<double> d_bt(static_cast<size_t>(T) * N, 0.0);
    std::vector<double> d_ct(static_cast<size_t>(T) * N, 0.0);
    std::vector<double> dA(static_cast<size_t>(E) * N, 0.0);
    std::vector<double> dx_scan(static_cast<size_t>(T) * E, 0.0);
    std::vector<double> dD(E, 0.0);

    for (int tt = T - 1; tt >= 0; --tt) {
      const double* gyRow = &gy.data[static_cast<size_t>(tt) * E];
      const double* xRow = &xv2.data[static_cast<size_t>(tt) * E];
      const double* sRow = &(*states)[static_cast<size_t>(tt) * E * N];
      const double* sPrev = tt > 0 ? &(*states)[static_cast<size_t>(tt - 1) * E * N] : nullptr;
      const double* de = &(*delta)[static_cast<size_t>(tt) * E];
      const double* bRow = &(*bt)[static_cast<size_t>(tt) * N];
      const double* cRow = &(*ct)[static_cast<size_t>(tt) * N];
      double* dctRow = &d_ct[static_cast<size_t>(tt) * N];
      double* dbtRow = &d_bt[static_cast<size_t>(tt) * N];
      double* dxRow = &dx_scan[static_cast<size_t>(tt) * E];
      for (int e = 0; e < E; ++e) {
        const double g_y = gyRow[e];
        const double x_te = xRow[e], d_te = de[e];
        const double* se = &sRow[static_cast<size_t>(e) * N];
        const double* spe = sPrev ? &sPrev[static_cast<size_t>(e) * N] : nullptr;
        const double* Ae = &A2[static_cast<size_t>(e) * N];
        double* gse = &gs[static_cast<size_t>(e) * N];
        double* dAe = &dA[static_cast<size_t>(e) * N];
        if (use_skip) {
          dD[e] += g_y * x_te;
          dxRow[e] += g_y * dv2[e];
        }
        double dacc = 0.0, dxe = 0.0;
        for (int n = 0; n < N; ++n) {
          dctRow[n] += g_y * se[n];
          const double gsn = gse[n] + g_y * cRow[n];  // full ds_t
          const double a = std::exp(d_te * Ae[n]);
          const double sprev = spe ? spe[n] : 0.0;
          dacc += gsn * (sprev * Ae[n] * a + bRow[n] * x_te);
          dAe[n] += gsn * sprev * d_te * a;
          dbtRow[n] += gsn * d_te * x_te;
          dxe += gsn * d_te * bRow[n];
          gse[n] = gsn * a;  // becomes ds_{t-1} through the decay
        }
        dxRow[e] += dxe;
        d_delta[static_cast<size_t>(tt) * E + e] = dacc;
      }
    }

    // delta = softplus(raw); sigma(raw) = 1 - exp(-delta), so raw itself is
    // never saved.
    std::vector<double> draw(static_cast<size_t>(T) * E);
    for (size_t i = 0; i < draw.size(); ++i) draw[i] = d_delta[i] * (1.0 - std::exp(-(*delta)[i]));

    if (tp.id_wants_grad(x.id)) {
      Tensor& dx = tp.grad_buf(x.id);
      for (size_t i = 0; i < dx_scan.size(); ++i) dx.data[i] += dx_scan[i];
      kern::matmul_nt_acc(draw.data(), wd2.data.data(), dx.data.data(), T, E, E);
      kern::matmul_nt_acc(d_bt.data(), wb2.data.data(), dx.data.data(), T, N, E);
      kern::matmul_nt_acc(d_ct.data(), wc2.data.data(), dx.data.data(), T, N, E);
    }
    if (tp.id_wants_grad(vwd.id))
      kern::matmul_tn_acc(xv2.data.data(), draw.data(), tp.grad_buf(vwd.id).data.data(), T, E, E);
    if (tp.id_wants_grad(vbd.id)) {
      Tensor& db = tp.grad_buf(vbd.id);
      for (int tt = 0; tt < T; ++tt)
        for (int e = 0; e < E; ++e) db.data[e] += draw[static_cast<size_t>(tt) * E + e];
    }
    if (tp.id_wants_grad(vwb.id))
      kern::matmul_tn_acc(xv2.data.data(), d_bt.data(), tp.grad_buf(vwb.id).data.data(), T, E, N);
    if (tp.id_wants_grad(vwc.id))
      kern::matmul_tn_acc(xv2.data.data(), d_ct.data(), tp.grad_buf(vwc.id).data.data(), T, E, N);
    if (tp.id_wants_grad(va.id)) {
      Tensor& dal = tp.grad_buf(va.id);
      // dA/dA_log = -exp(A_log) = A
      for (size_t i = 0; i < A2.size(); ++i) dal.data[i] += dA[i] * A2[i];
    }
    if (use_skip && tp.id_wants_grad(vd.id)) {
      Tensor& dd = tp.grad_buf(vd.id);
      for (int e = 0; e < E; ++e) dd.data[e] += dD[e];
    }
  });
}

}  // namespace fmkit
