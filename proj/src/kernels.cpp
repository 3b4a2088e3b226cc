#include "bevref/kernels.hpp"

#include <stdexcept>

namespace bevref::kernels {

namespace scalar {
extern const OpTable table;
}
#if defined(__x86_64__) || defined(__i386__)
namespace avx2 {
extern const OpTable table;
}
#endif
#if defined(__aarch64__)
namespace neon {
extern const OpTable table;
}
#endif

namespace {

Backend detect_default() {
#if defined(__x86_64__) || defined(__i386__)
  if (__builtin_cpu_supports("avx2")) return Backend::avx2;
#endif
#if defined(__aarch64__)
  return Backend::neon;
#endif
  return Backend::scalar;
}

struct State {
  Backend backend;
  const OpTable* ops;
  State() : backend(detect_default()), ops(&table(backend)) {}
};

State& state() {
  static State s;
  return s;
}

}  // namespace

const OpTable& table(Backend b) {
  switch (b) {
    case Backend::scalar:
      return scalar::table;
    case Backend::avx2:
#if defined(__x86_64__) || defined(__i386__)
      if (__builtin_cpu_supports("avx2")) return avx2::table;
#endif
      break;
    case Backend::neon:
#if defined(__aarch64__)
      return neon::table;
#else
      break;
#endif
  }
  throw std::runtime_error("kernel backend not supported on this CPU: " + backend_name(b));
}

Backend active() { return state().backend; }

bool supported(Backend b) {
  switch (b) {
    case Backend::scalar:
      return true;
    case Backend::avx2:
#if defined(__x86_64__) || defined(__i386__)
      return __builtin_cpu_supports("avx2") != 0;
#else
      return false;
#endif
    case Backend::neon:
#if defined(__aarch64__)
      return true;
#else
      return false;
#endif
  }
  return false;
}

void force(Backend b) {
  state().ops = &table(b);  // throws if unsupported
  state().backend = b;
}

std::string backend_name(Backend b) {
  switch (b) {
    case Backend::scalar: return "scalar";
    case Backend::avx2: return "avx2";
    case Backend::neon: return "neon";
  }
  return "?";
}

void add(const double* a, const double* b, double* y, std::size_t n) { state().ops->add(a, b, y, n); }
void sub(const double* a, const double* b, double* y, std::size_t n) { state().ops->sub(a, b, y, n); }
void mul(const double* a, const double* b, double* y, std::size_t n) { state().ops->mul(a, b, y, n); }
void scale(const double* a, double s, double* y, std::size_t n) { state().ops->scale(a, s, y, n); }
void axpy(double s, const double* a, double* y, std::size_t n) { state().ops->axpy(s, a, y, n); }
void relu(const double* x, double* y, std::size_t n) { state().ops->relu(x, y, n); }
void relu_bwd(const double* x, const double* gy, double* gx, std::size_t n) {
  state().ops->relu_bwd(x, gy, gx, n);
}
double max_value(const double* x, std::size_t n) { return state().ops->max_value(x, n); }
void matmul_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  state().ops->matmul_nn(a, b, c, m, k, n);
}
void matmul_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  state().ops->matmul_tn(a, b, c, m, k, n);
}

}  // namespace bevref::kernels
