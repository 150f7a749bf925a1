// Compiled with -mavx2 -mfma; only reached after a runtime CPU check.
#include <immintrin.h>

#include "duet/simd.hpp"

namespace duet::simd::detail {
namespace {

inline double hsum(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d sh = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

double dot_avx2(const double* a, const double* b, std::size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
        acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
    }
    for (; i + 4 <= n; i += 4)
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    double s = hsum(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
    const __m256d av = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(y + i, _mm256_fmadd_pd(av, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
    for (; i < n; ++i) y[i] += alpha * x[i];
}

// 4x8 register-blocked micro-kernel; ragged edges fall back to axpy rows.
void gemm_avx2(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
               std::size_t m) {
    const std::size_t m8 = m - m % 8;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        for (std::size_t j = 0; j < m8; j += 8) {
            __m256d c00 = _mm256_loadu_pd(c + (i + 0) * m + j);
            __m256d c01 = _mm256_loadu_pd(c + (i + 0) * m + j + 4);
            __m256d c10 = _mm256_loadu_pd(c + (i + 1) * m + j);
            __m256d c11 = _mm256_loadu_pd(c + (i + 1) * m + j + 4);
            __m256d c20 = _mm256_loadu_pd(c + (i + 2) * m + j);
            __m256d c21 = _mm256_loadu_pd(c + (i + 2) * m + j + 4);
            __m256d c30 = _mm256_loadu_pd(c + (i + 3) * m + j);
            __m256d c31 = _mm256_loadu_pd(c + (i + 3) * m + j + 4);
            for (std::size_t p = 0; p < k; ++p) {
                const __m256d b0 = _mm256_loadu_pd(b + p * m + j);
                const __m256d b1 = _mm256_loadu_pd(b + p * m + j + 4);
                __m256d av = _mm256_broadcast_sd(a + (i + 0) * k + p);
                c00 = _mm256_fmadd_pd(av, b0, c00);
                c01 = _mm256_fmadd_pd(av, b1, c01);
                av = _mm256_broadcast_sd(a + (i + 1) * k + p);
                c10 = _mm256_fmadd_pd(av, b0, c10);
                c11 = _mm256_fmadd_pd(av, b1, c11);
                av = _mm256_broadcast_sd(a + (i + 2) * k + p);
                c20 = _mm256_fmadd_pd(av, b0, c20);
                c21 = _mm256_fmadd_pd(av, b1, c21);
                av = _mm256_broadcast_sd(a + (i + 3) * k + p);
                c30 = _mm256_fmadd_pd(av, b0, c30);
                c31 = _mm256_fmadd_pd(av, b1, c31);
            }
            _mm256_storeu_pd(c + (i + 0) * m + j, c00);
            _mm256_storeu_pd(c + (i + 0) * m + j + 4, c01);
            _mm256_storeu_pd(c + (i + 1) * m + j, c10);
            _mm256_storeu_pd(c + (i + 1) * m + j + 4, c11);
            _mm256_storeu_pd(c + (i + 2) * m + j, c20);
            _mm256_storeu_pd(c + (i + 2) * m + j + 4, c21);
            _mm256_storeu_pd(c + (i + 3) * m + j, c30);
            _mm256_storeu_pd(c + (i + 3) * m + j + 4, c31);
        }
        if (m8 < m) {
            for (std::size_t r = i; r < i + 4; ++r)
                for (std::size_t p = 0; p < k; ++p)
                    axpy_avx2(a[r * k + p], b + p * m + m8, c + r * m + m8, m - m8);
        }
    }
    for (; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) axpy_avx2(a[i * k + p], b + p * m, c + i * m, m);
}

double sum_sq_avx2(const double* x, std::size_t n) { return dot_avx2(x, x, n); }

}  // namespace

const Kernels avx2_kernels{Isa::avx2, dot_avx2, axpy_avx2, gemm_avx2, sum_sq_avx2};

}  // namespace duet::simd::detail
