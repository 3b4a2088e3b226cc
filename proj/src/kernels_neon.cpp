#include "bevref/kernels.hpp"

// NEON kernels (2 doubles per vector), aarch64 only. Same bit-exactness
// contract as the AVX2 variants.

#if defined(__aarch64__)

#include <arm_neon.h>

namespace bevref::kernels::neon {

namespace {

void add_(const double* a, const double* b, double* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(y + i, vaddq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
  for (; i < n; ++i) y[i] = a[i] + b[i];
}

void sub_(const double* a, const double* b, double* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(y + i, vsubq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
  for (; i < n; ++i) y[i] = a[i] - b[i];
}

void mul_(const double* a, const double* b, double* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(y + i, vmulq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
  for (; i < n; ++i) y[i] = a[i] * b[i];
}

void scale_(const double* a, double s, double* y, std::size_t n) {
  const float64x2_t vs = vdupq_n_f64(s);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(y + i, vmulq_f64(vld1q_f64(a + i), vs));
  for (; i < n; ++i) y[i] = a[i] * s;
}

void axpy_(double s, const double* a, double* y, std::size_t n) {
  const float64x2_t vs = vdupq_n_f64(s);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    float64x2_t prod = vmulq_f64(vs, vld1q_f64(a + i));
    vst1q_f64(y + i, vaddq_f64(vld1q_f64(y + i), prod));
  }
  for (; i < n; ++i) y[i] += s * a[i];
}

void relu_(const double* x, double* y, std::size_t n) {
  const float64x2_t zero = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    float64x2_t v = vld1q_f64(x + i);
    uint64x2_t mask = vcgtq_f64(v, zero);
    vst1q_f64(y + i, vreinterpretq_f64_u64(vandq_u64(vreinterpretq_u64_f64(v), mask)));
  }
  for (; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_bwd_(const double* x, const double* gy, double* gx, std::size_t n) {
  const float64x2_t zero = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    uint64x2_t mask = vcgtq_f64(vld1q_f64(x + i), zero);
    float64x2_t g = vreinterpretq_f64_u64(vandq_u64(vreinterpretq_u64_f64(vld1q_f64(gy + i)), mask));
    vst1q_f64(gx + i, vaddq_f64(vld1q_f64(gx + i), g));
  }
  for (; i < n; ++i)
    if (x[i] > 0.0) gx[i] += gy[i];
}

double max_value_(const double* x, std::size_t n) {
  std::size_t i = 0;
  double m = x[0];
  if (n >= 2) {
    float64x2_t vm = vld1q_f64(x);
    for (i = 2; i + 2 <= n; i += 2) vm = vmaxq_f64(vm, vld1q_f64(x + i));
    double lo = vgetq_lane_f64(vm, 0), hi = vgetq_lane_f64(vm, 1);
    m = lo > hi ? lo : hi;
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
      const float64x2_t vs = vdupq_n_f64(s);
      std::size_t j = 0;
      for (; j + 2 <= n; j += 2) {
        float64x2_t prod = vmulq_f64(vs, vld1q_f64(brow + j));
        vst1q_f64(crow + j, vaddq_f64(vld1q_f64(crow + j), prod));
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
      const float64x2_t vs = vdupq_n_f64(s);
      std::size_t j = 0;
      for (; j + 2 <= n; j += 2) {
        float64x2_t prod = vmulq_f64(vs, vld1q_f64(brow + j));
        vst1q_f64(crow + j, vaddq_f64(vld1q_f64(crow + j), prod));
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

}  // namespace bevref::kernels::neon

#endif  // aarch64
