#include "btu/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

#include <cmath>

#define BTU_TARGET_AVX2 __attribute__((target("avx2,fma")))

namespace btu::kernels::detail {
namespace {

BTU_TARGET_AVX2 inline double hsum(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  const __m128d pair = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(pair, _mm_unpackhi_pd(pair, pair)));
}

BTU_TARGET_AVX2 double dot_avx2(const double* a, const double* b, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
  }
  double acc = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

BTU_TARGET_AVX2 void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d vy = _mm256_add_pd(_mm256_loadu_pd(y + i), _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
    _mm256_storeu_pd(y + i, vy);
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

BTU_TARGET_AVX2 double squared_distance_avx2(const double* a, const double* b, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d diff = _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i));
    acc = _mm256_fmadd_pd(diff, diff, acc);
  }
  double out = hsum(acc);
  for (; i < n; ++i) {
    const double diff = a[i] - b[i];
    out += diff * diff;
  }
  return out;
}

BTU_TARGET_AVX2 void adam_update_avx2(double* param, const double* grad, double* m, double* v,
                                      std::size_t n, const AdamStep& s) {
  const double step_size = s.lr / s.bias_correction1;
  const double inv_sqrt_bc2 = 1.0 / std::sqrt(s.bias_correction2);
  const __m256d b1 = _mm256_set1_pd(s.beta1);
  const __m256d one_minus_b1 = _mm256_set1_pd(1.0 - s.beta1);
  const __m256d b2 = _mm256_set1_pd(s.beta2);
  const __m256d one_minus_b2 = _mm256_set1_pd(1.0 - s.beta2);
  const __m256d eps = _mm256_set1_pd(s.eps);
  const __m256d vstep = _mm256_set1_pd(step_size);
  const __m256d vbc2 = _mm256_set1_pd(inv_sqrt_bc2);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d g = _mm256_loadu_pd(grad + i);
    const __m256d mi = _mm256_add_pd(_mm256_mul_pd(b1, _mm256_loadu_pd(m + i)), _mm256_mul_pd(one_minus_b1, g));
    const __m256d vi = _mm256_add_pd(_mm256_mul_pd(b2, _mm256_loadu_pd(v + i)),
                                     _mm256_mul_pd(_mm256_mul_pd(one_minus_b2, g), g));
    _mm256_storeu_pd(m + i, mi);
    _mm256_storeu_pd(v + i, vi);
    const __m256d denom = _mm256_add_pd(_mm256_mul_pd(_mm256_sqrt_pd(vi), vbc2), eps);
    const __m256d p = _mm256_sub_pd(_mm256_loadu_pd(param + i), _mm256_mul_pd(vstep, _mm256_div_pd(mi, denom)));
    _mm256_storeu_pd(param + i, p);
  }
  for (; i < n; ++i) {
    m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * grad[i];
    v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * grad[i] * grad[i];
    const double denom = std::sqrt(v[i]) * inv_sqrt_bc2 + s.eps;
    param[i] -= step_size * (m[i] / denom);
  }
}

}  // namespace

const KernelTable avx2_table{dot_avx2, axpy_avx2, squared_distance_avx2, adam_update_avx2};

}  // namespace btu::kernels::detail

#endif
