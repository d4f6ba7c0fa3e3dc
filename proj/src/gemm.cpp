#include "cmb/gemm.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace cmb::detail {
namespace {

constexpr int64_t MR = 8;
constexpr int64_t NR = 16;
constexpr int64_t MC = 128;
constexpr int64_t KC = 384;
constexpr int64_t NC = 2048;

// Packs an mc x kc panel of op(A) into MR-row blocks, zero padding the tail.
void pack_a(const double* a, int64_t lda, bool trans, int64_t mc, int64_t kc, double* buf) {
    for (int64_t i0 = 0; i0 < mc; i0 += MR) {
        int64_t mr = std::min(MR, mc - i0);
        for (int64_t p = 0; p < kc; ++p) {
            for (int64_t i = 0; i < mr; ++i)
                buf[i] = trans ? a[p * lda + (i0 + i)] : a[(i0 + i) * lda + p];
            for (int64_t i = mr; i < MR; ++i) buf[i] = 0.0;
            buf += MR;
        }
    }
}

// Packs a kc x nc panel of op(B) into NR-column blocks, zero padding the tail.
void pack_b(const double* b, int64_t ldb, bool trans, int64_t kc, int64_t nc, double* buf) {
    for (int64_t j0 = 0; j0 < nc; j0 += NR) {
        int64_t nr = std::min(NR, nc - j0);
        for (int64_t p = 0; p < kc; ++p) {
            for (int64_t j = 0; j < nr; ++j)
                buf[j] = trans ? b[(j0 + j) * ldb + p] : b[p * ldb + j0 + j];
            for (int64_t j = nr; j < NR; ++j) buf[j] = 0.0;
            buf += NR;
        }
    }
}

#if defined(__AVX512F__)
void kernel(int64_t kc, const double* a, const double* b, double* c, int64_t ldc,
            int64_t mr, int64_t nr, bool accumulate) {
    __m512d acc[MR][2];
    for (int i = 0; i < MR; ++i) {
        acc[i][0] = _mm512_setzero_pd();
        acc[i][1] = _mm512_setzero_pd();
    }
    for (int64_t p = 0; p < kc; ++p) {
        __m512d b0 = _mm512_loadu_pd(b);
        __m512d b1 = _mm512_loadu_pd(b + 8);
        for (int i = 0; i < MR; ++i) {
            __m512d ai = _mm512_set1_pd(a[i]);
            acc[i][0] = _mm512_fmadd_pd(ai, b0, acc[i][0]);
            acc[i][1] = _mm512_fmadd_pd(ai, b1, acc[i][1]);
        }
        a += MR;
        b += NR;
    }
    if (mr == MR && nr == NR) {
        for (int i = 0; i < MR; ++i) {
            double* ci = c + i * ldc;
            if (accumulate) {
                _mm512_storeu_pd(ci, _mm512_add_pd(_mm512_loadu_pd(ci), acc[i][0]));
                _mm512_storeu_pd(ci + 8, _mm512_add_pd(_mm512_loadu_pd(ci + 8), acc[i][1]));
            } else {
                _mm512_storeu_pd(ci, acc[i][0]);
                _mm512_storeu_pd(ci + 8, acc[i][1]);
            }
        }
    } else {
        double tmp[MR * NR];
        for (int i = 0; i < MR; ++i) {
            _mm512_storeu_pd(tmp + i * NR, acc[i][0]);
            _mm512_storeu_pd(tmp + i * NR + 8, acc[i][1]);
        }
        for (int64_t i = 0; i < mr; ++i)
            for (int64_t j = 0; j < nr; ++j) {
                double v = tmp[i * NR + j];
                if (accumulate) c[i * ldc + j] += v; else c[i * ldc + j] = v;
            }
    }
}
#else
void kernel(int64_t kc, const double* a, const double* b, double* c, int64_t ldc,
            int64_t mr, int64_t nr, bool accumulate) {
    double tmp[MR * NR] = {0};
    for (int64_t p = 0; p < kc; ++p) {
        for (int64_t i = 0; i < MR; ++i) {
            double ai = a[i];
            for (int64_t j = 0; j < NR; ++j) tmp[i * NR + j] += ai * b[j];
        }
        a += MR;
        b += NR;
    }
    for (int64_t i = 0; i < mr; ++i)
        for (int64_t j = 0; j < nr; ++j) {
            double v = tmp[i * NR + j];
            if (accumulate) c[i * ldc + j] += v; else c[i * ldc + j] = v;
        }
}
#endif

} // namespace

void dgemm(int64_t m, int64_t n, int64_t k,
           const double* a, int64_t lda, bool trans_a,
           const double* b, int64_t ldb, bool trans_b,
           double* c, int64_t ldc, bool accumulate) {
    if (m <= 0 || n <= 0) return;
    if (k <= 0) {
        if (!accumulate)
            for (int64_t i = 0; i < m; ++i) std::memset(c + i * ldc, 0, sizeof(double) * n);
        return;
    }
    thread_local std::vector<double> abuf, bbuf;
    abuf.resize(static_cast<size_t>(MC) * KC);
    bbuf.resize(static_cast<size_t>(KC) * NC);
    for (int64_t jc = 0; jc < n; jc += NC) {
        int64_t nc = std::min(NC, n - jc);
        for (int64_t pc = 0; pc < k; pc += KC) {
            int64_t kc = std::min(KC, k - pc);
            const double* bsrc = trans_b ? b + (jc)*ldb + pc : b + pc * ldb + jc;
            pack_b(bsrc, ldb, trans_b, kc, nc, bbuf.data());
            bool acc = accumulate || pc > 0;
            for (int64_t ic = 0; ic < m; ic += MC) {
                int64_t mc = std::min(MC, m - ic);
                const double* asrc = trans_a ? a + pc * lda + ic : a + ic * lda + pc;
                pack_a(asrc, lda, trans_a, mc, kc, abuf.data());
                for (int64_t j0 = 0; j0 < nc; j0 += NR) {
                    int64_t nr = std::min(NR, nc - j0);
                    const double* bp = bbuf.data() + j0 * kc;
                    for (int64_t i0 = 0; i0 < mc; i0 += MR) {
                        int64_t mr = std::min(MR, mc - i0);
                        kernel(kc, abuf.data() + i0 * kc, bp,
                               c + (ic + i0) * ldc + jc + j0, ldc, mr, nr, acc);
                    }
                }
            }
        }
    }
}

} // namespace cmb::detail
