#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>
#include <vector>

#include "bevref/kernels.hpp"
#include "bevref/rng.hpp"

using namespace bevref;
namespace k = bevref::kernels;

namespace {

std::vector<double> rand_vec(Rng& rng, std::size_t n, double lo = -3.0, double hi = 3.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

bool bit_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() &&
         (a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

// Sizes chosen to hit empty, sub-lane, exact-lane and lane+tail paths for
// both 4-wide AVX2 and 2-wide NEON.
const std::size_t kSizes[] = {0, 1, 2, 3, 4, 5, 7, 8, 9, 15, 16, 17, 33, 100, 257};

std::vector<k::Backend> simd_backends() {
  std::vector<k::Backend> out;
  for (k::Backend b : {k::Backend::avx2, k::Backend::neon})
    if (k::supported(b)) out.push_back(b);
  return out;
}

}  // namespace

TEST_CASE("backend enumeration and forcing") {
  CHECK(k::supported(k::Backend::scalar));
  CHECK(k::supported(k::active()));
  CHECK(k::backend_name(k::Backend::scalar) == "scalar");

  k::force(k::Backend::scalar);
  CHECK(k::active() == k::Backend::scalar);

  // At most one of the SIMD flavors exists on one machine.
  CHECK(!(k::supported(k::Backend::avx2) && k::supported(k::Backend::neon)));
  for (k::Backend b : {k::Backend::avx2, k::Backend::neon})
    if (!k::supported(b)) CHECK_THROWS_AS(k::force(b), std::runtime_error);

  for (k::Backend b : simd_backends()) {
    k::force(b);
    CHECK(k::active() == b);
  }
  k::force(k::Backend::scalar);
}

TEST_CASE("elementwise kernels match a plain loop oracle exactly") {
  Rng rng(41);
  k::force(k::Backend::scalar);
  for (std::size_t n : kSizes) {
    const auto a = rand_vec(rng, n);
    const auto b = rand_vec(rng, n);
    std::vector<double> got(n), want(n);

    k::add(a.data(), b.data(), got.data(), n);
    for (std::size_t i = 0; i < n; ++i) want[i] = a[i] + b[i];
    CHECK(bit_equal(got, want));

    k::sub(a.data(), b.data(), got.data(), n);
    for (std::size_t i = 0; i < n; ++i) want[i] = a[i] - b[i];
    CHECK(bit_equal(got, want));

    k::mul(a.data(), b.data(), got.data(), n);
    for (std::size_t i = 0; i < n; ++i) want[i] = a[i] * b[i];
    CHECK(bit_equal(got, want));

    k::scale(a.data(), 1.7, got.data(), n);
    for (std::size_t i = 0; i < n; ++i) want[i] = a[i] * 1.7;
    CHECK(bit_equal(got, want));

    got = b;
    want = b;
    k::axpy(-0.3, a.data(), got.data(), n);
    for (std::size_t i = 0; i < n; ++i) want[i] += -0.3 * a[i];
    CHECK(bit_equal(got, want));

    k::relu(a.data(), got.data(), n);
    for (std::size_t i = 0; i < n; ++i) want[i] = a[i] > 0.0 ? a[i] : 0.0;
    CHECK(bit_equal(got, want));

    // relu_bwd accumulates.
    got = b;
    want = b;
    k::relu_bwd(a.data(), a.data(), got.data(), n);
    for (std::size_t i = 0; i < n; ++i)
      if (a[i] > 0.0) want[i] += a[i];
    CHECK(bit_equal(got, want));

    if (n > 0) {
      double m = a[0];
      for (double x : a) m = x > m ? x : m;
      CHECK(k::max_value(a.data(), n) == m);
    }
  }
}

TEST_CASE("elementwise kernels tolerate output aliasing an input") {
  Rng rng(42);
  k::force(k::Backend::scalar);
  for (std::size_t n : {std::size_t{7}, std::size_t{32}, std::size_t{65}}) {
    const auto a = rand_vec(rng, n);
    const auto b = rand_vec(rng, n);
    std::vector<double> want(n);
    for (std::size_t i = 0; i < n; ++i) want[i] = a[i] + b[i];
    auto y = a;
    k::add(y.data(), b.data(), y.data(), n);
    CHECK(bit_equal(y, want));
    y = b;
    k::add(a.data(), y.data(), y.data(), n);
    CHECK(bit_equal(y, want));
  }
}

TEST_CASE("matmul kernels match the naive triple loop exactly") {
  Rng rng(43);
  k::force(k::Backend::scalar);
  const struct {
    std::size_t m, kk, n;
  } shapes[] = {{1, 1, 1}, {2, 3, 4}, {5, 8, 7}, {16, 16, 16}, {17, 5, 9}, {1, 64, 1}, {3, 1, 5}};
  for (const auto& s : shapes) {
    const auto a = rand_vec(rng, s.m * s.kk);
    const auto b = rand_vec(rng, s.kk * s.n);
    const auto c0 = rand_vec(rng, s.m * s.n);  // accumulation semantics: C +=

    auto got = c0;
    k::matmul_nn(a.data(), b.data(), got.data(), s.m, s.kk, s.n);
    auto want = c0;
    for (std::size_t i = 0; i < s.m; ++i)
      for (std::size_t j = 0; j < s.n; ++j) {
        double acc = want[i * s.n + j];
        for (std::size_t t = 0; t < s.kk; ++t) acc += a[i * s.kk + t] * b[t * s.n + j];
        want[i * s.n + j] = acc;
      }
    CHECK(bit_equal(got, want));

    // A^T * B with A [m x k]: result [k x n].
    const auto d0 = rand_vec(rng, s.kk * s.n);
    got = d0;
    k::matmul_tn(a.data(), b.data(), got.data(), s.m, s.kk, s.n);
    want = d0;
    for (std::size_t i = 0; i < s.kk; ++i)
      for (std::size_t j = 0; j < s.n; ++j) {
        double acc = want[i * s.n + j];
        for (std::size_t t = 0; t < s.m; ++t) acc += a[t * s.kk + i] * b[t * s.n + j];
        want[i * s.n + j] = acc;
      }
    CHECK(bit_equal(got, want));
  }
}

TEST_CASE("SIMD variants are bit-identical to the scalar reference") {
  const auto simd = simd_backends();
  if (simd.empty()) {
    MESSAGE("no SIMD backend on this CPU, scalar-only");
    return;
  }
  const auto& ref = k::table(k::Backend::scalar);
  Rng rng(44);
  for (k::Backend b : simd) {
    const auto& alt = k::table(b);
    for (std::size_t n : kSizes) {
      const auto x = rand_vec(rng, n, -50.0, 50.0);
      const auto y = rand_vec(rng, n, -50.0, 50.0);
      std::vector<double> r0(n), r1(n);

      ref.add(x.data(), y.data(), r0.data(), n);
      alt.add(x.data(), y.data(), r1.data(), n);
      CHECK(bit_equal(r0, r1));
      ref.sub(x.data(), y.data(), r0.data(), n);
      alt.sub(x.data(), y.data(), r1.data(), n);
      CHECK(bit_equal(r0, r1));
      ref.mul(x.data(), y.data(), r0.data(), n);
      alt.mul(x.data(), y.data(), r1.data(), n);
      CHECK(bit_equal(r0, r1));
      ref.scale(x.data(), -2.6, r0.data(), n);
      alt.scale(x.data(), -2.6, r1.data(), n);
      CHECK(bit_equal(r0, r1));
      r0 = y;
      r1 = y;
      ref.axpy(0.77, x.data(), r0.data(), n);
      alt.axpy(0.77, x.data(), r1.data(), n);
      CHECK(bit_equal(r0, r1));
      ref.relu(x.data(), r0.data(), n);
      alt.relu(x.data(), r1.data(), n);
      CHECK(bit_equal(r0, r1));
      r0 = y;
      r1 = y;
      ref.relu_bwd(x.data(), y.data(), r0.data(), n);
      alt.relu_bwd(x.data(), y.data(), r1.data(), n);
      CHECK(bit_equal(r0, r1));
      if (n > 0) {
        const double m0 = ref.max_value(x.data(), n);
        const double m1 = alt.max_value(x.data(), n);
        CHECK(std::memcmp(&m0, &m1, sizeof m0) == 0);
      }
    }

    // matmul across shapes with ragged tails
    for (std::size_t m : {1, 3, 8, 13})
      for (std::size_t kk : {1, 4, 7, 32})
        for (std::size_t n : {1, 2, 5, 16, 19}) {
          const auto a = rand_vec(rng, m * kk);
          const auto bb = rand_vec(rng, kk * n);
          const auto c0 = rand_vec(rng, m * n);
          auto r0 = c0, r1 = c0;
          ref.matmul_nn(a.data(), bb.data(), r0.data(), m, kk, n);
          alt.matmul_nn(a.data(), bb.data(), r1.data(), m, kk, n);
          CHECK(bit_equal(r0, r1));
          const auto d0 = rand_vec(rng, kk * n);
          r0 = d0;
          r1 = d0;
          ref.matmul_tn(a.data(), bb.data(), r0.data(), m, kk, n);
          alt.matmul_tn(a.data(), bb.data(), r1.data(), m, kk, n);
          CHECK(bit_equal(r0, r1));
        }
  }
  k::force(k::Backend::scalar);
}

TEST_CASE("forced backend drives the module-level wrappers") {
  Rng rng(45);
  const std::size_t n = 37;
  const auto a = rand_vec(rng, n);
  const auto b = rand_vec(rng, n);
  std::vector<double> ref(n);
  k::force(k::Backend::scalar);
  k::add(a.data(), b.data(), ref.data(), n);
  for (k::Backend bk : simd_backends()) {
    std::vector<double> alt(n);
    k::force(bk);
    k::add(a.data(), b.data(), alt.data(), n);
    CHECK(bit_equal(ref, alt));
  }
  k::force(k::Backend::scalar);
}
