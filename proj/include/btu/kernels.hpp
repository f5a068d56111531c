#pragma once

// Dense double-precision kernels used by the training and analysis inner loops.
// Every kernel has a portable scalar reference; vector variants are selected once
// at runtime from the host's capabilities and must agree with the reference to
// rounding.

#include <cstddef>
#include <span>
#include <string_view>

namespace btu::kernels {

enum class Level { scalar, avx2, neon };

struct AdamStep {
  double lr;
  double beta1;
  double beta2;
  double eps;
  double bias_correction1;  // 1 - beta1^t
  double bias_correction2;  // 1 - beta2^t
};

struct KernelTable {
  double (*dot)(const double* a, const double* b, std::size_t n);
  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  double (*squared_distance)(const double* a, const double* b, std::size_t n);
  void (*adam_update)(double* param, const double* grad, double* m, double* v, std::size_t n,
                      const AdamStep& step);
};

const KernelTable& table(Level level);
bool supported(Level level);
std::string_view name(Level level);

// Level chosen on first use: the widest supported variant.
Level active_level();
const KernelTable& active();

// Pins the dispatch level (tests, reproducibility runs). Throws if unsupported.
void force_level(Level level);

inline double dot(std::span<const double> a, std::span<const double> b) {
  return active().dot(a.data(), b.data(), a.size());
}

inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  active().axpy(alpha, x.data(), y.data(), x.size());
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  return active().squared_distance(a.data(), b.data(), a.size());
}

inline void adam_update(std::span<double> param, std::span<const double> grad, std::span<double> m,
                        std::span<double> v, const AdamStep& step) {
  active().adam_update(param.data(), grad.data(), m.data(), v.data(), param.size(), step);
}

namespace detail {
extern const KernelTable scalar_table;
#if defined(__x86_64__) || defined(_M_X64)
extern const KernelTable avx2_table;
#endif
#if defined(__aarch64__)
extern const KernelTable neon_table;
#endif
}  // namespace detail

}  // namespace btu::kernels
