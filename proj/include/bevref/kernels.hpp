#pragma once

#include <cstddef>
#include <string>

// Low-level f64 array kernels backing the tensor library. Every operation has
// a scalar reference implementation plus SIMD variants (AVX2 on x86-64, NEON
// on aarch64) selected at runtime. All variants are bit-identical to the
// scalar reference: vectorization only regroups independent per-element work,
// never reorders a per-element accumulation chain, and the build disables
// FP contraction.

namespace bevref::kernels {

enum class Backend { scalar, avx2, neon };

Backend active();
bool supported(Backend b);
void force(Backend b);  // throws std::runtime_error if unsupported on this CPU
std::string backend_name(Backend b);

// Elementwise; safe when y aliases an input.
void add(const double* a, const double* b, double* y, std::size_t n);
void sub(const double* a, const double* b, double* y, std::size_t n);
void mul(const double* a, const double* b, double* y, std::size_t n);
void scale(const double* a, double s, double* y, std::size_t n);
void axpy(double s, const double* a, double* y, std::size_t n);  // y += s*a
void relu(const double* x, double* y, std::size_t n);            // y = x > 0 ? x : 0
void relu_bwd(const double* x, const double* gy, double* gx, std::size_t n);  // gx += x > 0 ? gy : 0
double max_value(const double* x, std::size_t n);  // n > 0, finite inputs

// C[m x n] += A[m x k] * B[k x n], row-major. Accumulation over k runs in
// index order for every output element.
void matmul_nn(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n);
// C[k x n] += A^T * B with A[m x k], B[m x n], row-major.
void matmul_tn(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n);

struct OpTable {
  void (*add)(const double*, const double*, double*, std::size_t);
  void (*sub)(const double*, const double*, double*, std::size_t);
  void (*mul)(const double*, const double*, double*, std::size_t);
  void (*scale)(const double*, double, double*, std::size_t);
  void (*axpy)(double, const double*, double*, std::size_t);
  void (*relu)(const double*, double*, std::size_t);
  void (*relu_bwd)(const double*, const double*, double*, std::size_t);
  double (*max_value)(const double*, std::size_t);
  void (*matmul_nn)(const double*, const double*, double*, std::size_t, std::size_t, std::size_t);
  void (*matmul_tn)(const double*, const double*, double*, std::size_t, std::size_t, std::size_t);
};

// Table for one backend; throws if the backend is not compiled in / supported.
const OpTable& table(Backend b);

}  // namespace bevref::kernels
