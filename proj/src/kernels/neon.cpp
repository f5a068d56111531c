#include "btu/kernels.hpp"

#if defined(__aarch64__)

#include <arm_neon.h>

#include <cmath>

namespace btu::kernels::detail {
namespace {

double dot_neon(const double* a, const double* b, std::size_t n) {
  float64x2_t acc0 = vdupq_n_f64(0.0);
  float64x2_t acc1 = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc0 = vfmaq_f64(acc0, vld1q_f64(a + i), vld1q_f64(b + i));
    acc1 = vfmaq_f64(acc1, vld1q_f64(a + i + 2), vld1q_f64(b + i + 2));
  }
  double acc = vaddvq_f64(vaddq_f64(acc0, acc1));
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void axpy_neon(double alpha, const double* x, double* y, std::size_t n) {
  const float64x2_t va = vdupq_n_f64(alpha);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    vst1q_f64(y + i, vaddq_f64(vld1q_f64(y + i), vmulq_f64(va, vld1q_f64(x + i))));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

double squared_distance_neon(const double* a, const double* b, std::size_t n) {
  float64x2_t acc = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    const float64x2_t diff = vsubq_f64(vld1q_f64(a + i), vld1q_f64(b + i));
    acc = vfmaq_f64(acc, diff, diff);
  }
  double out = vaddvq_f64(acc);
  for (; i < n; ++i) {
    const double diff = a[i] - b[i];
    out += diff * diff;
  }
  return out;
}

void adam_update_neon(double* param, const double* grad, double* m, double* v, std::size_t n,
                      const AdamStep& s) {
  const double step_size = s.lr / s.bias_correction1;
  const double inv_sqrt_bc2 = 1.0 / std::sqrt(s.bias_correction2);
  const float64x2_t b1 = vdupq_n_f64(s.beta1);
  const float64x2_t one_minus_b1 = vdupq_n_f64(1.0 - s.beta1);
  const float64x2_t b2 = vdupq_n_f64(s.beta2);
  const float64x2_t one_minus_b2 = vdupq_n_f64(1.0 - s.beta2);
  const float64x2_t eps = vdupq_n_f64(s.eps);
  const float64x2_t vstep = vdupq_n_f64(step_size);
  const float64x2_t vbc2 = vdupq_n_f64(inv_sqrt_bc2);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    const float64x2_t g = vld1q_f64(grad + i);
    const float64x2_t mi = vaddq_f64(vmulq_f64(b1, vld1q_f64(m + i)), vmulq_f64(one_minus_b1, g));
    const float64x2_t vi = vaddq_f64(vmulq_f64(b2, vld1q_f64(v + i)), vmulq_f64(vmulq_f64(one_minus_b2, g), g));
    vst1q_f64(m + i, mi);
    vst1q_f64(v + i, vi);
    const float64x2_t denom = vaddq_f64(vmulq_f64(vsqrtq_f64(vi), vbc2), eps);
    vst1q_f64(param + i, vsubq_f64(vld1q_f64(param + i), vmulq_f64(vstep, vdivq_f64(mi, denom))));
  }
  for (; i < n; ++i) {
    m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * grad[i];
    v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * grad[i] * grad[i];
    const double denom = std::sqrt(v[i]) * inv_sqrt_bc2 + s.eps;
    param[i] -= step_size * (m[i] / denom);
  }
}

}  // namespace

const KernelTable neon_table{dot_neon, axpy_neon, squared_distance_neon, adam_update_neon};

}  // namespace btu::kernels::detail

#endif
