#include "ifnet/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

namespace ifnet::kernels {
namespace {

Backend initial_backend() {
  if (const char* env = std::getenv("IFNET_KERNELS")) {
    const std::string name(env);
    if (name == "scalar") return Backend::Scalar;
    if (name == "avx2" && backend_supported(Backend::Avx2)) return Backend::Avx2;
  }
  return best_backend();
}

std::atomic<Backend>& current() {
  static std::atomic<Backend> backend{initial_backend()};
  return backend;
}

}  // namespace

bool backend_supported(Backend backend) {
  switch (backend) {
    case Backend::Scalar:
      return true;
    case Backend::Avx2:
#if defined(IFNET_HAVE_AVX2_KERNELS) && (defined(__GNUC__) || defined(__clang__))
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
  }
  return false;
}

Backend best_backend() {
  return backend_supported(Backend::Avx2) ? Backend::Avx2 : Backend::Scalar;
}

Backend active_backend() { return current().load(std::memory_order_relaxed); }

void set_backend(Backend backend) {
  if (!backend_supported(backend))
    throw std::invalid_argument("kernel backend not supported on this host: " +
                                std::string(backend_name(backend)));
  current().store(backend, std::memory_order_relaxed);
}

std::string_view backend_name(Backend backend) {
  return backend == Backend::Avx2 ? "avx2" : "scalar";
}

template <>
const KernelTable<float>& table<float>(Backend backend) {
#if defined(IFNET_HAVE_AVX2_KERNELS)
  if (backend == Backend::Avx2) return avx2_table_f32();
#endif
  (void)backend;
  return scalar_table_f32();
}

template <>
const KernelTable<double>& table<double>(Backend backend) {
#if defined(IFNET_HAVE_AVX2_KERNELS)
  if (backend == Backend::Avx2) return avx2_table_f64();
#endif
  (void)backend;
  return scalar_table_f64();
}

}  // namespace ifnet::kernels
