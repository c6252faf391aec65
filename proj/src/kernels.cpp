#include "fmkit/kernels.hpp"

#include <cstring>

#include "fmkit/threads.hpp"

namespace fmkit::kern {

namespace {

// Row-parallel saxpy form: each output row is owned by one thread, so the
// partitioning never changes the floating-point result.
inline void mm_rows(const double* a, const double* b, double* c, int m, int k, int p, bool accumulate) {
  parallel_for(m, 16, [&](int64_t r0, int64_t r1) {
    for (int64_t i = r0; i < r1; ++i) {
      double* ci = c + i * p;
      if (!accumulate) std::memset(ci, 0, sizeof(double) * static_cast<size_t>(p));
      const double* ai = a + i * k;
      for (int l = 0; l < k; ++l) {
        double av = ai[l];
        if (av == 0.0) continue;
        const double* bl = b + static_cast<int64_t>(l) * p;
        for (int j = 0; j < p; ++j) ci[j] += av * bl[j];
      }
    }
  });
}

}  // namespace

void matmul(const double* a, const double* b, double* c, int m, int k, int p) {
  mm_rows(a, b, c, m, k, p, false);
}

void matmul_acc(const double* a, const double* b, double* c, int m, int k, int p) {
  mm_rows(a, b, c, m, k, p, true);
}

void matmul_tn_acc(const double* a, const double* b, double* c, int m, int k, int p) {
  // c[k,p] += sum_i a[i,:]^T outer b[i,:]
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<int64_t>(i) * k;
    const double* bi = b + static_cast<int64_t>(i) * p;
    for (int l = 0; l < k; ++l) {
      double av = ai[l];
      if (av == 0.0) continue;
      double* cl = c + static_cast<int64_t>(l) * p;
      for (int j = 0; j < p; ++j) cl[j] += av * bi[j];
    }
  }
}

void matmul_nt_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  parallel_for(m, 16, [&](int64_t r0, int64_t r1) {
    for (int64_t i = r0; i < r1; ++i) {
      const double* ai = a + i * k;
      double* ci = c + i * n;
      for (int j = 0; j < n; ++j) {
        const double* bj = b + static_cast<int64_t>(j) * k;
        double s = 0.0;
        for (int l = 0; l < k; ++l) s += ai[l] * bj[l];
        ci[j] += s;
      }
    }
  });
}

}  // namespace fmkit::kern
