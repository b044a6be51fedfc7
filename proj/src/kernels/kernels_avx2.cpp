// Compiled with -mavx2 -mfma; only reached through the dispatcher after a
// runtime CPU check.
#include "ifnet/kernels.hpp"

#include <immintrin.h>

namespace ifnet::kernels {
namespace {

struct F32 {
  using scalar = float;
  using reg = __m256;
  static constexpr std::size_t lanes = 8;
  static reg zero() { return _mm256_setzero_ps(); }
  static reg load(const float* p) { return _mm256_loadu_ps(p); }
  static void store(float* p, reg v) { _mm256_storeu_ps(p, v); }
  static reg set1(float v) { return _mm256_set1_ps(v); }
  static reg fmadd(reg a, reg b, reg c) { return _mm256_fmadd_ps(a, b, c); }
  static reg add(reg a, reg b) { return _mm256_add_ps(a, b); }
  static reg sub(reg a, reg b) { return _mm256_sub_ps(a, b); }
  static float hsum(reg v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    __m128 shuf = _mm_movehdup_ps(lo);
    __m128 sums = _mm_add_ps(lo, shuf);
    shuf = _mm_movehl_ps(shuf, sums);
    sums = _mm_add_ss(sums, shuf);
    return _mm_cvtss_f32(sums);
  }
};

struct F64 {
  using scalar = double;
  using reg = __m256d;
  static constexpr std::size_t lanes = 4;
  static reg zero() { return _mm256_setzero_pd(); }
  static reg load(const double* p) { return _mm256_loadu_pd(p); }
  static void store(double* p, reg v) { _mm256_storeu_pd(p, v); }
  static reg set1(double v) { return _mm256_set1_pd(v); }
  static reg fmadd(reg a, reg b, reg c) { return _mm256_fmadd_pd(a, b, c); }
  static reg add(reg a, reg b) { return _mm256_add_pd(a, b); }
  static reg sub(reg a, reg b) { return _mm256_sub_pd(a, b); }
  static double hsum(reg v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d high64 = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, high64));
  }
};

template <typename V>
typename V::scalar dot(const typename V::scalar* a, const typename V::scalar* b, std::size_t n) {
  constexpr std::size_t L = V::lanes;
  auto acc0 = V::zero();
  auto acc1 = V::zero();
  std::size_t i = 0;
  for (; i + 2 * L <= n; i += 2 * L) {
    acc0 = V::fmadd(V::load(a + i), V::load(b + i), acc0);
    acc1 = V::fmadd(V::load(a + i + L), V::load(b + i + L), acc1);
  }
  for (; i + L <= n; i += L) acc0 = V::fmadd(V::load(a + i), V::load(b + i), acc0);
  typename V::scalar res = V::hsum(V::add(acc0, acc1));
  for (; i < n; ++i) res += a[i] * b[i];
  return res;
}

template <typename V>
void axpy(typename V::scalar alpha, const typename V::scalar* x, typename V::scalar* y,
          std::size_t n) {
  constexpr std::size_t L = V::lanes;
  const auto va = V::set1(alpha);
  std::size_t i = 0;
  for (; i + L <= n; i += L) V::store(y + i, V::fmadd(va, V::load(x + i), V::load(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

template <typename V>
typename V::scalar squared_distance(const typename V::scalar* a, const typename V::scalar* b,
                                    std::size_t n) {
  constexpr std::size_t L = V::lanes;
  auto acc0 = V::zero();
  auto acc1 = V::zero();
  std::size_t i = 0;
  for (; i + 2 * L <= n; i += 2 * L) {
    const auto d0 = V::sub(V::load(a + i), V::load(b + i));
    const auto d1 = V::sub(V::load(a + i + L), V::load(b + i + L));
    acc0 = V::fmadd(d0, d0, acc0);
    acc1 = V::fmadd(d1, d1, acc1);
  }
  for (; i + L <= n; i += L) {
    const auto d = V::sub(V::load(a + i), V::load(b + i));
    acc0 = V::fmadd(d, d, acc0);
  }
  typename V::scalar res = V::hsum(V::add(acc0, acc1));
  for (; i < n; ++i) {
    const auto d = a[i] - b[i];
    res += d * d;
  }
  return res;
}

// c_row += sum_q alpha[q] * rows[q], four source rows per pass over c_row.
template <typename V>
void accumulate_rows(typename V::scalar* c_row, std::size_t n, const typename V::scalar* alpha,
                     const typename V::scalar* const* rows, std::size_t count) {
  constexpr std::size_t L = V::lanes;
  std::size_t q = 0;
  for (; q + 4 <= count; q += 4) {
    const auto a0 = V::set1(alpha[q]);
    const auto a1 = V::set1(alpha[q + 1]);
    const auto a2 = V::set1(alpha[q + 2]);
    const auto a3 = V::set1(alpha[q + 3]);
    const auto* r0 = rows[q];
    const auto* r1 = rows[q + 1];
    const auto* r2 = rows[q + 2];
    const auto* r3 = rows[q + 3];
    std::size_t j = 0;
    for (; j + L <= n; j += L) {
      auto c = V::load(c_row + j);
      c = V::fmadd(a0, V::load(r0 + j), c);
      c = V::fmadd(a1, V::load(r1 + j), c);
      c = V::fmadd(a2, V::load(r2 + j), c);
      c = V::fmadd(a3, V::load(r3 + j), c);
      V::store(c_row + j, c);
    }
    for (; j < n; ++j)
      c_row[j] += alpha[q] * r0[j] + alpha[q + 1] * r1[j] + alpha[q + 2] * r2[j] +
                  alpha[q + 3] * r3[j];
  }
  for (; q < count; ++q) axpy<V>(alpha[q], rows[q], c_row, n);
}

template <typename V>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const typename V::scalar* a,
             const typename V::scalar* b, typename V::scalar* c) {
  using S = typename V::scalar;
  constexpr std::size_t block = 64;
  const S* rows[block];
  for (std::size_t p0 = 0; p0 < k; p0 += block) {
    const std::size_t count = (k - p0 < block) ? k - p0 : block;
    for (std::size_t q = 0; q < count; ++q) rows[q] = b + (p0 + q) * n;
    for (std::size_t i = 0; i < m; ++i) accumulate_rows<V>(c + i * n, n, a + i * k + p0, rows, count);
  }
}

template <typename V>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const typename V::scalar* a,
             const typename V::scalar* b, typename V::scalar* c) {
  using S = typename V::scalar;
  constexpr std::size_t L = V::lanes;
  for (std::size_t i = 0; i < m; ++i) {
    const S* a_row = a + i * k;
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
      const S* b0 = b + j * k;
      const S* b1 = b0 + k;
      const S* b2 = b1 + k;
      const S* b3 = b2 + k;
      auto acc0 = V::zero();
      auto acc1 = V::zero();
      auto acc2 = V::zero();
      auto acc3 = V::zero();
      std::size_t p = 0;
      for (; p + L <= k; p += L) {
        const auto va = V::load(a_row + p);
        acc0 = V::fmadd(va, V::load(b0 + p), acc0);
        acc1 = V::fmadd(va, V::load(b1 + p), acc1);
        acc2 = V::fmadd(va, V::load(b2 + p), acc2);
        acc3 = V::fmadd(va, V::load(b3 + p), acc3);
      }
      S s0 = V::hsum(acc0), s1 = V::hsum(acc1), s2 = V::hsum(acc2), s3 = V::hsum(acc3);
      for (; p < k; ++p) {
        s0 += a_row[p] * b0[p];
        s1 += a_row[p] * b1[p];
        s2 += a_row[p] * b2[p];
        s3 += a_row[p] * b3[p];
      }
      S* c_row = c + i * n + j;
      c_row[0] += s0;
      c_row[1] += s1;
      c_row[2] += s2;
      c_row[3] += s3;
    }
    for (; j < n; ++j) c[i * n + j] += dot<V>(a_row, b + j * k, k);
  }
}

template <typename V>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const typename V::scalar* a,
             const typename V::scalar* b, typename V::scalar* c) {
  using S = typename V::scalar;
  constexpr std::size_t block = 64;
  const S* rows[block];
  S alpha[block];
  for (std::size_t p0 = 0; p0 < k; p0 += block) {
    const std::size_t count = (k - p0 < block) ? k - p0 : block;
    for (std::size_t q = 0; q < count; ++q) rows[q] = b + (p0 + q) * n;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t q = 0; q < count; ++q) alpha[q] = a[(p0 + q) * m + i];
      accumulate_rows<V>(c + i * n, n, alpha, rows, count);
    }
  }
}

template <typename V>
KernelTable<typename V::scalar> make_table() {
  return {&dot<V>, &axpy<V>, &squared_distance<V>, &gemm_nn<V>, &gemm_nt<V>, &gemm_tn<V>};
}

}  // namespace

const KernelTable<float>& avx2_table_f32() {
  static const KernelTable<float> t = make_table<F32>();
  return t;
}

const KernelTable<double>& avx2_table_f64() {
  static const KernelTable<double> t = make_table<F64>();
  return t;
}

}  // namespace ifnet::kernels
