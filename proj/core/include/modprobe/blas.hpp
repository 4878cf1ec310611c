#pragma once

#include <cstddef>

namespace modprobe {

// Row-major GEMM: C = alpha * op(A) * op(B) + beta * C, where op is identity
// or transpose. Dispatches to OpenBLAS when it can be loaded, otherwise to a
// built-in blocked kernel. Both backends produce correct results; only speed
// differs.
void dgemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
           const double* a, int lda, const double* b, int ldb, double beta,
           double* c, int ldc);

void sgemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
           const float* a, int lda, const float* b, int ldb, float beta,
           float* c, int ldc);

// "openblas" or "builtin".
const char* blas_backend();

}  // namespace modprobe
