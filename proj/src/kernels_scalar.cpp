#include "bevref/kernels.hpp"

// Scalar reference kernels. These define the numerical semantics the SIMD
// variants must reproduce exactly.

namespace bevref::kernels::scalar {

namespace {

void add_(const double* a, const double* b, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a[i] + b[i];
}

void sub_(const double* a, const double* b, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a[i] - b[i];
}

void mul_(const double* a, const double* b, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a[i] * b[i];
}

void scale_(const double* a, double s, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a[i] * s;
}

void axpy_(double s, const double* a, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += s * a[i];
}

void relu_(const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_bwd_(const double* x, const double* gy, double* gx, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    if (x[i] > 0.0) gx[i] += gy[i];
}

double max_value_(const double* x, std::size_t n) {
  double m = x[0];
  for (std::size_t i = 1; i < n; ++i)
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
      for (std::size_t j = 0; j < n; ++j) crow[j] += s * brow[j];
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
      for (std::size_t j = 0; j < n; ++j) crow[j] += s * brow[j];
    }
  }
}

}  // namespace

extern const OpTable table;
const OpTable table = {
    add_, sub_, mul_, scale_, axpy_, relu_, relu_bwd_, max_value_, matmul_nn_, matmul_tn_,
};

}  // namespace bevref::kernels::scalar
