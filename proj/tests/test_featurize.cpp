#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <vector>

#include "bevref/featurize.hpp"
#include "bevref/rng.hpp"
#include "bevref/scene.hpp"
#include "bevref/tensor.hpp"

using namespace bevref;
using namespace bevref::grid;

namespace {

GridSpec small_grid() { return GridSpec::create(-8, 8, -8, 8, -5.8, 2.2, 1, 1, 8); }

scene::Point pt(double x, double y, double z, double inten = 0.5) {
  scene::Point p;
  p.x = x;
  p.y = y;
  p.z = z;
  p.intensity = inten;
  return p;
}

Tensor rand_tensor(Rng& rng, std::vector<int> shape, double lo = -0.5, double hi = 0.5) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from_data(std::move(shape), std::move(v), true);
}

}  // namespace

TEST_CASE("grid construction and cell arithmetic") {
  const GridSpec g = GridSpec::create(-32, 32, -32, 32, -5.8, 2.2, 1, 1, 8);
  CHECK(g.h == 64);
  CHECK(g.w == 64);
  CHECK(g.cell_x(0.0) == 32);  // h/2 under the default spec
  CHECK(g.cell_y(0.0) == 32);
  CHECK(g.cell_x(-32.0) == 0);
  CHECK(g.cell_x(31.999) == 63);
  CHECK(g.cell_center_x(0) == doctest::Approx(-31.5).epsilon(1e-15));
  CHECK(g.flat(2, 5) == 2 * 64 + 5);
  CHECK(g.in_range(0, 0, 0));
  CHECK(!g.in_range(0, 0, 5.0));
  CHECK(!g.in_range(40.0, 0, 0));

  // voxel size must divide the range
  CHECK_THROWS_AS(GridSpec::create(-32, 32, -32, 32, -5.8, 2.2, 0.7, 1, 8), grid_error);
  CHECK_THROWS_AS(GridSpec::create(32, -32, -32, 32, -5.8, 2.2, 1, 1, 8), grid_error);
}

TEST_CASE("pillar statistics hand fixture") {
  const GridSpec g = small_grid();
  scene::Scenario s;
  // two points in the cell whose center is (0.5, 0.5), one elsewhere
  s.points = {pt(0.7, 0.5, -1.0, 0.2), pt(0.5, 0.3, -2.0, 0.8), pt(-3.5, 2.5, 0.0, 1.0),
              pt(50.0, 0.0, 0.0)};  // out of range, dropped
  const auto stats = pillar_stats(s, g);
  REQUIRE(stats.size() == static_cast<std::size_t>(g.h) * g.w * kRawStatChannels);

  const std::size_t cell = static_cast<std::size_t>(g.flat(g.cell_x(0.7), g.cell_y(0.5)));
  const double* c = stats.data() + cell * kRawStatChannels;
  const double z_mid = 0.5 * (-5.8 + 2.2);
  CHECK(c[0] == doctest::Approx(0.1).epsilon(1e-12));          // mean x offset
  CHECK(c[1] == doctest::Approx(-0.1).epsilon(1e-12));         // mean y offset
  CHECK(c[2] == doctest::Approx(-1.5 - z_mid).epsilon(1e-12)); // mean z minus mid-plane
  CHECK(c[3] == doctest::Approx(-1.5).epsilon(1e-12));         // mean z
  CHECK(c[4] == doctest::Approx(0.5).epsilon(1e-12));          // mean intensity
  CHECK(c[5] == 2.0);                                          // count
  CHECK(c[6] == -1.0);                                         // max z

  const std::size_t other = static_cast<std::size_t>(g.flat(g.cell_x(-3.5), g.cell_y(2.5)));
  CHECK(stats[other * kRawStatChannels + 5] == 1.0);

  // empty cells are the zero vector, max z included
  const std::size_t empty = static_cast<std::size_t>(g.flat(0, 0));
  for (int ch = 0; ch < kRawStatChannels; ++ch) CHECK(stats[empty * kRawStatChannels + ch] == 0.0);
}

TEST_CASE("pillar statistics are point-permutation invariant") {
  const GridSpec g = small_grid();
  Rng rng(61);
  scene::Scenario s;
  for (int i = 0; i < 200; ++i)
    s.points.push_back(pt(rng.uniform(-8, 8), rng.uniform(-8, 8), rng.uniform(-5, 2),
                          rng.next_double()));
  const auto a = pillar_stats(s, g);
  scene::Scenario rev = s;
  std::reverse(rev.points.begin(), rev.points.end());
  const auto b = pillar_stats(rev, g);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-9));
}

TEST_CASE("translating the scene by one voxel translates the raw statistics") {
  const GridSpec g = small_grid();
  Rng rng(62);
  scene::Scenario s;
  for (int i = 0; i < 150; ++i)
    s.points.push_back(pt(rng.uniform(-7, 6.5), rng.uniform(-8, 8), rng.uniform(-5, 2),
                          rng.next_double()));
  scene::Scenario shifted = s;
  for (auto& p : shifted.points) p.x += g.dx;
  const auto a = pillar_stats(s, g);
  const auto b = pillar_stats(shifted, g);
  for (int ix = 0; ix + 1 < g.h; ++ix)
    for (int iy = 0; iy < g.w; ++iy)
      for (int ch = 0; ch < kRawStatChannels; ++ch) {
        const double va = a[static_cast<std::size_t>(g.flat(ix, iy)) * kRawStatChannels + ch];
        const double vb = b[static_cast<std::size_t>(g.flat(ix + 1, iy)) * kRawStatChannels + ch];
        CHECK(va == doctest::Approx(vb).epsilon(1e-9));
      }
}

TEST_CASE("empty scene encodes to a spatially constant feature map") {
  const GridSpec g = small_grid();
  Rng rng(63);
  const int d = 8;
  const Tensor lin_w = rand_tensor(rng, {kRawStatChannels, d});
  const Tensor lin_b = rand_tensor(rng, {d});
  const Tensor c1w = rand_tensor(rng, {9 * d, d});
  const Tensor c1b = rand_tensor(rng, {d});
  const Tensor c2w = rand_tensor(rng, {9 * d, d});
  const Tensor c2b = rand_tensor(rng, {d});

  scene::Scenario s;  // no points at all
  const Tensor raw = Tensor::from_data({g.h * g.w, kRawStatChannels}, pillar_stats(s, g));
  const Tensor f = encode_pillars(raw, g, lin_w, lin_b, c1w, c1b, c2w, c2b);
  REQUIRE(f.shape() == std::vector<int>{g.h * g.w, d});
  for (int cell = 1; cell < g.h * g.w; ++cell)
    for (int ch = 0; ch < d; ++ch)
      CHECK(f.at(cell * d + ch) == doctest::Approx(f.at(ch)).epsilon(1e-12));
}

TEST_CASE("gaussian radius grows with footprint and respects the floor") {
  CHECK(gaussian_radius(20, 10, 0.1) > gaussian_radius(6, 3, 0.1));
  CHECK(gaussian_radius(6, 3, 0.5) < gaussian_radius(6, 3, 0.1));
  CHECK(gaussian_radius(4, 2, 0.1) > 0.0);
}

TEST_CASE("heatmap peaks, falloff, and channel separation") {
  const GridSpec g = small_grid();
  scene::Scenario s;
  scene::ObjectSpec car;
  car.box = geo::make_box(0.5, 0.5, -1.0, 1.0, 1.0, 1.5, 0.0);  // exactly at a cell center
  car.category = scene::Category::car;
  car.role = scene::Role::target;
  s.objects.push_back(car);

  const auto hm = gt_heatmap(s, g);
  REQUIRE(hm.size() == static_cast<std::size_t>(g.h) * g.w * scene::kCategoryCount);
  const int ci = g.cell_x(0.5), cj = g.cell_y(0.5);
  const int ch = static_cast<int>(scene::Category::car);
  auto at = [&](int i, int j, int c) {
    return hm[static_cast<std::size_t>(g.flat(i, j)) * scene::kCategoryCount + c];
  };
  CHECK(at(ci, cj, ch) == 1.0);  // peak is exactly 1 by construction

  // 1x1-cell footprint hits the radius floor r=2, sigma=2/3: at distance r the
  // value is exp(-4.5)
  CHECK(at(ci + 2, cj, ch) == doctest::Approx(std::exp(-4.5)).epsilon(1e-12));
  CHECK(at(ci, cj - 2, ch) == doctest::Approx(std::exp(-4.5)).epsilon(1e-12));
  CHECK(at(ci + 1, cj, ch) == doctest::Approx(std::exp(-9.0 / 8.0)).epsilon(1e-12));

  // other category channels stay empty
  for (int c = 0; c < scene::kCategoryCount; ++c) {
    double mx = 0.0;
    for (int i = 0; i < g.h; ++i)
      for (int j = 0; j < g.w; ++j) mx = std::max(mx, at(i, j, c));
    CHECK(mx == (c == ch ? 1.0 : 0.0));
  }
}

TEST_CASE("overlapping gaussians merge by max, peaks never exceed 1") {
  const GridSpec g = small_grid();
  scene::Scenario s;
  for (double x : {0.5, 1.5}) {
    scene::ObjectSpec o;
    o.box = geo::make_box(x, 0.5, -1.0, 1.0, 1.0, 1.5, 0.0);
    o.category = scene::Category::bus;
    o.role = x < 1.0 ? scene::Role::target : scene::Role::background;
    s.objects.push_back(o);
  }
  const auto hm = gt_heatmap(s, g);
  const int ch = static_cast<int>(scene::Category::bus);
  double mx = 0.0;
  int peaks = 0;
  for (std::size_t cell = 0; cell < static_cast<std::size_t>(g.h) * g.w; ++cell) {
    const double v = hm[cell * scene::kCategoryCount + ch];
    CHECK(v <= 1.0);
    mx = std::max(mx, v);
    peaks += v == 1.0;
  }
  CHECK(mx == 1.0);
  CHECK(peaks == 2);
  // the midpoint between adjacent peaks keeps the single-gaussian value, not a sum
  const int ci = g.cell_x(0.5);
  const int cj = g.cell_y(0.5);
  (void)ci;
  const double mid = hm[static_cast<std::size_t>(g.flat(g.cell_x(1.5), cj)) *
                            scene::kCategoryCount + ch];
  CHECK(mid == 1.0);  // it IS the second peak's center
}

TEST_CASE("text embedding lookup") {
  const Tensor table = Tensor::from_data({5, 3}, {0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12},
                                         true);
  scene::TokenBatch tb;
  tb.ids = {3, 1, 3, 0};
  tb.valid = {1, 1, 1, 0};
  const Tensor e = embed_text(tb, table);
  REQUIRE(e.shape() == std::vector<int>{4, 3});
  CHECK(e.at(0) == 7.0);
  CHECK(e.at(3) == 1.0);
  CHECK(e.at(6) == 7.0);  // duplicate token, identical row
  CHECK(e.at(9) == 0.0);  // pad row

  backward(sum(e));
  CHECK(table.grad()[0 * 3 + 0] == 1.0);  // pad row looked up once
  CHECK(table.grad()[3 * 3 + 0] == 2.0);  // duplicated row accumulates
  CHECK(table.grad()[2 * 3 + 0] == 0.0);  // untouched row gets nothing

  scene::TokenBatch bad;
  bad.ids = {5};
  bad.valid = {1};
  CHECK_THROWS_AS(embed_text(bad, table), scene::vocab_error);
}
