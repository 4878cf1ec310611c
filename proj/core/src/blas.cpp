#include "modprobe/blas.hpp"

#include <dlfcn.h>
#include <stdlib.h>

#include <algorithm>
#include <cstring>
#include <mutex>
#include <vector>

namespace modprobe {
namespace {

// CBLAS enums, reproduced so no BLAS header is needed at compile time.
enum { kRowMajor = 101 };
enum { kNoTrans = 111, kTrans = 112 };

using DgemmFn = void (*)(int, int, int, int, int, int, double, const double*,
                         int, const double*, int, double, double*, int);
using SgemmFn = void (*)(int, int, int, int, int, int, float, const float*,
                         int, const float*, int, float, float*, int);

struct Backend {
  DgemmFn dgemm = nullptr;
  SgemmFn sgemm = nullptr;
  const char* name = "builtin";
};

Backend load_backend() {
  // OpenBLAS selects its kernels in a library constructor, so tuning must be
  // in the environment before the library is mapped. Virtualized CPUs often
  // report a blank model string, which makes the runtime dispatch fall back
  // to generic kernels; steer it by instruction set unless the user already
  // chose a core type.
  if (!getenv("OPENBLAS_CORETYPE")) {
#if defined(__x86_64__)
    if (__builtin_cpu_supports("avx512f"))
      setenv("OPENBLAS_CORETYPE", "SKYLAKEX", 1);
    else if (__builtin_cpu_supports("avx2"))
      setenv("OPENBLAS_CORETYPE", "HASWELL", 1);
#endif
  }
  // Single-threaded BLAS keeps results reproducible and avoids fighting the
  // worker pool for cores.
  if (!getenv("OPENBLAS_NUM_THREADS")) setenv("OPENBLAS_NUM_THREADS", "1", 1);

  Backend b;
  void* h = dlopen("libopenblas.so.0", RTLD_NOW | RTLD_LOCAL);
  if (!h) h = dlopen("libopenblas.so", RTLD_NOW | RTLD_LOCAL);
  if (h) {
    b.dgemm = reinterpret_cast<DgemmFn>(dlsym(h, "cblas_dgemm"));
    b.sgemm = reinterpret_cast<SgemmFn>(dlsym(h, "cblas_sgemm"));
    if (b.dgemm && b.sgemm) {
      b.name = "openblas";
      return b;
    }
  }
  b.dgemm = nullptr;
  b.sgemm = nullptr;
  return b;
}

const Backend& backend() {
  static Backend b = load_backend();
  return b;
}

// Blocked fallback kernel. A(m x k), B(k x n) after applying op, row-major.
template <class T>
void gemm_builtin(bool trans_a, bool trans_b, int m, int n, int k, T alpha,
                  const T* a, int lda, const T* b, int ldb, T beta, T* c,
                  int ldc) {
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<std::size_t>(i) * ldc;
    if (beta == T(0))
      std::fill(crow, crow + n, T(0));
    else if (beta != T(1))
      for (int j = 0; j < n; ++j) crow[j] *= beta;
  }
  if (alpha == T(0) || k == 0) return;

  const int kb = 256, jb = 128;
  for (int j0 = 0; j0 < n; j0 += jb) {
    const int j1 = std::min(j0 + jb, n);
    for (int k0 = 0; k0 < k; k0 += kb) {
      const int k1 = std::min(k0 + kb, k);
      for (int i = 0; i < m; ++i) {
        T* crow = c + static_cast<std::size_t>(i) * ldc;
        for (int kk = k0; kk < k1; ++kk) {
          const T aik =
              alpha * (trans_a ? a[static_cast<std::size_t>(kk) * lda + i]
                               : a[static_cast<std::size_t>(i) * lda + kk]);
          if (aik == T(0)) continue;
          if (!trans_b) {
            const T* brow = b + static_cast<std::size_t>(kk) * ldb;
            for (int j = j0; j < j1; ++j) crow[j] += aik * brow[j];
          } else {
            for (int j = j0; j < j1; ++j)
              crow[j] += aik * b[static_cast<std::size_t>(j) * ldb + kk];
          }
        }
      }
    }
  }
}

}  // namespace

void dgemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
           const double* a, int lda, const double* b, int ldb, double beta,
           double* c, int ldc) {
  if (m == 0 || n == 0) return;
  const Backend& be = backend();
  if (be.dgemm) {
    be.dgemm(kRowMajor, trans_a ? kTrans : kNoTrans, trans_b ? kTrans : kNoTrans,
             m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
    return;
  }
  gemm_builtin(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

void sgemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
           const float* a, int lda, const float* b, int ldb, float beta,
           float* c, int ldc) {
  if (m == 0 || n == 0) return;
  const Backend& be = backend();
  if (be.sgemm) {
    be.sgemm(kRowMajor, trans_a ? kTrans : kNoTrans, trans_b ? kTrans : kNoTrans,
             m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
    return;
  }
  gemm_builtin(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

const char* blas_backend() { return backend().name; }

}  // namespace modprobe
