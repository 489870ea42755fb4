#pragma once
#include <cblas.h>

namespace derain::nn {

// Row-major C = alpha * op(A) * op(B) + beta * C, dispatched to OpenBLAS.
// With a fixed thread count OpenBLAS GEMM is bitwise reproducible run to run,
// which checkpoint determinism relies on.
inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
                 const float* a, int lda, const float* b, int ldb, float beta,
                 float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb,
              beta, c, ldc);
}

inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
                 const double* a, int lda, const double* b, int ldb, double beta,
                 double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb,
              beta, c, ldc);
}

inline void set_gemm_threads(int n) { openblas_set_num_threads(n); }

}  // namespace derain::nn
