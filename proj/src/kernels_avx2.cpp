#include "bevref/kernels.hpp"

// AVX2 kernels (4 doubles per vector). Each loop performs the same operation
// per element as the scalar reference, with remainders handled scalar, so
// results match the reference bit for bit. No FMA: mul+add keeps rounding
// identical to the scalar path.

#if defined(__x86_64__) || defined(__i386__)

#include <immintrin.h>

namespace bevref::kernels::avx2 {

namespace {

void add_(const double* a, const double* b, double* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) y[i] = a[i] + b[i];
}

void sub_(const double* a, const double* b, double* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) y[i] = a[i] - b[i];
}

void mul_(const double* a, const double* b, double* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) y[i] = a[i] * b[i];
}

void scale_(const double* a, double s, double* y, std::size_t n) {
  const __m256d vs = _mm256_set1_pd(s);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), vs));
  for (; i < n; ++i) y[i] = a[i] * s;
}

void axpy_(double s, const double* a, double* y, std::size_t n) {
  const __m256d vs = _mm256_set1_pd(s);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d prod = _mm256_mul_pd(vs, _mm256_loadu_pd(a + i));
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), prod));
  }
  for (; i < n; ++i) y[i] += s * a[i];
}

void relu_(const double* x, double* y, std::size_t n) {
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d v = _mm256_loadu_pd(x + i);
    // (x > 0) ? x : 0, matching the scalar reference including signed zeros
    __m256d mask = _mm256_cmp_pd(v, zero, _CMP_GT_OQ);
    _mm256_storeu_pd(y + i, _mm256_and_pd(v, mask));
  }
  for (; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_bwd_(const double* x, const double* gy, double* gx, std::size_t n) {
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d mask = _mm256_cmp_pd(_mm256_loadu_pd(x + i), zero, _CMP_GT_OQ);
    __m256d g = _mm256_and_pd(_mm256_loadu_pd(gy + i), mask);
    _mm256_storeu_pd(gx + i, _mm256_add_pd(_mm256_loadu_pd(gx + i), g));
  }
  for (; i < n; ++i)
    if (x[i] > 0.0) gx[i] += gy[i];
}

double max_value_(const double* x, std::size_t n) {
  // max is exact and order-independent for finite inputs
  std::size_t i = 0;
  double m = x[0];
  if (n >= 4) {
    __m256d vm = _mm256_loadu_pd(x);
    for (i = 4; i + 4 <= n; i += 4) vm = _mm256_max_pd(vm, _mm256_loadu_pd(x + i));
    alignas(32) double lanes[4];
    _mm256_store_pd(lanes, vm);
    m = lanes[0];
    for (int l = 1; l < 4; ++l)
      if (lanes[l] > m) m = lanes[l];
  }
  for (; i < n; ++i)
    if (x[i] > m) m = x[i];
  return m;
}

void matmul_nn_(const double* a, const double* b, double* c,
                std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = arow[p];
      const double* brow = b + p * n;
      const __m256d vs = _mm256_set1_pd(s);
      std::size_t j = 0;
      for (; j + 4 <= n; j += 4) {
        __m256d prod = _mm256_mul_pd(vs, _mm256_loadu_pd(brow + j));
        _mm256_storeu_pd(crow + j, _mm256_add_pd(_mm256_loadu_pd(crow + j), prod));
      }
      for (; j < n; ++j) crow[j] += s * brow[j];
    }
  }
}

void matmul_tn_(const double* a, const double* b, double* c,
                std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = arow[p];
      double* crow = c + p * n;
      const __m256d vs = _mm256_set1_pd(s);
      std::size_t j = 0;
      for (; j + 4 <= n; j += 4) {
        __m256d prod = _mm256_mul_pd(vs, _mm256_loadu_pd(brow + j));
        _mm256_storeu_pd(crow + j, _mm256_add_pd(_mm256_loadu_pd(crow + j), prod));
      }
      for (; j < n; ++j) crow[j] += s * brow[j];
    }
  }
}

}  // namespace

extern const OpTable table;
const OpTable table = {
    add_, sub_, mul_, scale_, axpy_, relu_, relu_bwd_, max_value_, matmul_nn_, matmul_tn_,
};

}  // namespace bevref::kernels::avx2

#endif  // x86
