#pragma once

// Data-parallel inner loops used by the tensor core.
//
// Every kernel exists as a scalar reference implementation and, where the
// host supports it, an AVX2+FMA variant. The active table is chosen once at
// first use (best supported backend, or the IFNET_KERNELS environment
// variable: "scalar" | "avx2") and may be switched explicitly with
// set_backend(). Backends agree to rounding, not bitwise; a single backend is
// deterministic.

#include <cstddef>
#include <string_view>

namespace ifnet::kernels {

enum class Backend { Scalar, Avx2 };

template <typename T>
struct KernelTable {
  T (*dot)(const T* a, const T* b, std::size_t n);
  // y += alpha * x
  void (*axpy)(T alpha, const T* x, T* y, std::size_t n);
  T (*squared_distance)(const T* a, const T* b, std::size_t n);
  // c[m x n] += a[m x k] * b[k x n]
  void (*gemm_nn)(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c);
  // c[m x n] += a[m x k] * b[n x k]^T
  void (*gemm_nt)(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c);
  // c[m x n] += a[k x m]^T * b[k x n]
  void (*gemm_tn)(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c);
};

bool backend_supported(Backend backend);
Backend best_backend();
Backend active_backend();
void set_backend(Backend backend);
std::string_view backend_name(Backend backend);

template <typename T>
const KernelTable<T>& table(Backend backend);
template <>
const KernelTable<float>& table<float>(Backend backend);
template <>
const KernelTable<double>& table<double>(Backend backend);

template <typename T>
const KernelTable<T>& active() {
  return table<T>(active_backend());
}

// Per-backend tables; the AVX2 ones are only callable when supported.
const KernelTable<float>& scalar_table_f32();
const KernelTable<double>& scalar_table_f64();
const KernelTable<float>& avx2_table_f32();
const KernelTable<double>& avx2_table_f64();

}  // namespace ifnet::kernels
