#include "btu/kernels.hpp"

#include <atomic>
#include <stdexcept>
#include <string>

namespace btu::kernels {
namespace {

Level detect_best() {
#if defined(__x86_64__) || defined(_M_X64)
  __builtin_cpu_init();
  if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma")) return Level::avx2;
#endif
#if defined(__aarch64__)
  return Level::neon;
#endif
  return Level::scalar;
}

std::atomic<int>& selected() {
  static std::atomic<int> level{static_cast<int>(detect_best())};
  return level;
}

}  // namespace

bool supported(Level level) {
  switch (level) {
    case Level::scalar:
      return true;
    case Level::avx2:
#if defined(__x86_64__) || defined(_M_X64)
      __builtin_cpu_init();
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
    case Level::neon:
#if defined(__aarch64__)
      return true;
#else
      return false;
#endif
  }
  return false;
}

std::string_view name(Level level) {
  switch (level) {
    case Level::scalar: return "scalar";
    case Level::avx2: return "avx2";
    case Level::neon: return "neon";
  }
  return "unknown";
}

const KernelTable& table(Level level) {
  if (!supported(level)) throw std::runtime_error("kernel level not supported on this host: " + std::string(name(level)));
  switch (level) {
#if defined(__x86_64__) || defined(_M_X64)
    case Level::avx2: return detail::avx2_table;
#endif
#if defined(__aarch64__)
    case Level::neon: return detail::neon_table;
#endif
    default: return detail::scalar_table;
  }
}

Level active_level() { return static_cast<Level>(selected().load(std::memory_order_relaxed)); }

const KernelTable& active() {
  switch (active_level()) {
#if defined(__x86_64__) || defined(_M_X64)
    case Level::avx2: return detail::avx2_table;
#endif
#if defined(__aarch64__)
    case Level::neon: return detail::neon_table;
#endif
    default: return detail::scalar_table;
  }
}

void force_level(Level level) {
  if (!supported(level)) throw std::runtime_error("kernel level not supported on this host: " + std::string(name(level)));
  selected().store(static_cast<int>(level), std::memory_order_relaxed);
}

}  // namespace btu::kernels
