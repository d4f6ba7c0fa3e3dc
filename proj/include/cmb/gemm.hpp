#pragma once

#include <cstdint>

namespace cmb::detail {

// Row-major double GEMM: C = op(A) * op(B), optionally accumulating into C.
// op(A) is m x k, op(B) is k x n, C is m x n with leading dimension ldc.
// Packed blocked implementation with an AVX-512 microkernel when available;
// single-threaded and deterministic.
void dgemm(int64_t m, int64_t n, int64_t k,
           const double* a, int64_t lda, bool trans_a,
           const double* b, int64_t ldb, bool trans_b,
           double* c, int64_t ldc, bool accumulate);

} // namespace cmb::detail
