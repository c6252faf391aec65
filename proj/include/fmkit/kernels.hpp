#pragma once

#include <cstdint>

// Raw dense kernels shared by the tape primitives and the inference-only
// paths. All matrices are row-major, contiguous.
namespace fmkit::kern {

// c = a[m,k] * b[k,p]
void matmul(const double* a, const double* b, double* c, int m, int k, int p);
// c += a[m,k] * b[k,p]
void matmul_acc(const double* a, const double* b, double* c, int m, int k, int p);
// c += a[m,k]^T * b[m,p]   (c is [k,p])
void matmul_tn_acc(const double* a, const double* b, double* c, int m, int k, int p);
// c += a[m,k] * b[n,k]^T   (c is [m,n])
void matmul_nt_acc(const double* a, const double* b, double* c, int m, int k, int n);

}  // namespace fmkit::kern
