#include "ifnet/kernels.hpp"

namespace ifnet::kernels {
namespace {

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
T squared_distance(const T* a, const T* b, std::size_t n) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* c_row = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T alpha = a[i * k + p];
      if (alpha == T(0)) continue;
      axpy(alpha, b + p * n, c_row, n);
    }
  }
}

template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) c[i * n + j] += dot(a + i * k, b + j * k, k);
}

template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* a_row = a + p * m;
    const T* b_row = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T alpha = a_row[i];
      if (alpha == T(0)) continue;
      axpy(alpha, b_row, c + i * n, n);
    }
  }
}

template <typename T>
KernelTable<T> make_table() {
  return {&dot<T>, &axpy<T>, &squared_distance<T>, &gemm_nn<T>, &gemm_nt<T>, &gemm_tn<T>};
}

}  // namespace

const KernelTable<float>& scalar_table_f32() {
  static const KernelTable<float> t = make_table<float>();
  return t;
}

const KernelTable<double>& scalar_table_f64() {
  static const KernelTable<double> t = make_table<double>();
  return t;
}

}  // namespace ifnet::kernels
