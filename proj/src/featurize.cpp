#include "bevref/featurize.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace bevref::grid {

namespace {

int span_cells(double lo, double hi, double step, const char* axis) {
  const double span = hi - lo;
  if (span <= 0.0 || step <= 0.0)
    throw grid_error(std::string("grid ") + axis + ": empty range or non-positive voxel size");
  const double n = span / step;
  const double rounded = std::round(n);
  if (std::fabs(n - rounded) > 1e-9 * std::max(1.0, n))
    throw grid_error(std::string("grid ") + axis + ": range " + std::to_string(span) +
                     " is not a whole multiple of voxel size " + std::to_string(step));
  return static_cast<int>(rounded);
}

}  // namespace

GridSpec GridSpec::create(double x_min, double x_max, double y_min, double y_max, double z_min,
                          double z_max, double dx, double dy, double dz) {
  GridSpec g;
  g.x_min = x_min;
  g.x_max = x_max;
  g.y_min = y_min;
  g.y_max = y_max;
  g.z_min = z_min;
  g.z_max = z_max;
  g.dx = dx;
  g.dy = dy;
  g.dz = dz;
  g.h = span_cells(x_min, x_max, dx, "x");
  g.w = span_cells(y_min, y_max, dy, "y");
  span_cells(z_min, z_max, dz, "z");
  return g;
}

bool GridSpec::in_range(double x, double y, double z) const {
  return x >= x_min && x < x_max && y >= y_min && y < y_max && z >= z_min && z < z_max;
}

int GridSpec::cell_x(double x) const {
  return std::min(h - 1, static_cast<int>(std::floor((x - x_min) / dx)));
}

int GridSpec::cell_y(double y) const {
  return std::min(w - 1, static_cast<int>(std::floor((y - y_min) / dy)));
}

std::vector<double> pillar_stats(const scene::Scenario& s, const GridSpec& g) {
  const std::size_t cells = static_cast<std::size_t>(g.h) * g.w;
  std::vector<double> stats(cells * kRawStatChannels, 0.0);
  std::vector<int> counts(cells, 0);
  const double z_mid = 0.5 * (g.z_min + g.z_max);
  for (const auto& p : s.points) {
    if (!g.in_range(p.x, p.y, p.z)) continue;
    const int ix = g.cell_x(p.x);
    const int iy = g.cell_y(p.y);
    const std::size_t base = static_cast<std::size_t>(g.flat(ix, iy)) * kRawStatChannels;
    stats[base + 0] += p.x - g.cell_center_x(ix);
    stats[base + 1] += p.y - g.cell_center_y(iy);
    stats[base + 2] += p.z - z_mid;
    stats[base + 3] += p.z;
    stats[base + 4] += p.intensity;
    const int c = counts[static_cast<std::size_t>(g.flat(ix, iy))]++;
    if (c == 0)
      stats[base + 6] = p.z;
    else
      stats[base + 6] = std::max(stats[base + 6], p.z);
  }
  for (std::size_t cell = 0; cell < cells; ++cell) {
    const int c = counts[cell];
    if (c == 0) continue;
    const std::size_t base = cell * kRawStatChannels;
    const double inv = 1.0 / static_cast<double>(c);
    for (int ch = 0; ch < 5; ++ch) stats[base + ch] *= inv;
    stats[base + 5] = static_cast<double>(c);
  }
  return stats;
}

Tensor encode_pillars(const Tensor& raw, const GridSpec& g, const Tensor& lin_w,
                      const Tensor& lin_b, const Tensor& conv1_w, const Tensor& conv1_b,
                      const Tensor& conv2_w, const Tensor& conv2_b) {
  Tensor x = relu(add_bias(matmul(raw, lin_w), lin_b));
  x = relu(conv3x3(x, g.h, g.w, conv1_w, conv1_b));
  x = relu(conv3x3(x, g.h, g.w, conv2_w, conv2_b));
  return x;
}

double gaussian_radius(double l_cells, double w_cells, double min_overlap) {
  const double h = l_cells, w = w_cells, o = min_overlap;

  const double a1 = 1.0;
  const double b1 = h + w;
  const double c1 = w * h * (1.0 - o) / (1.0 + o);
  const double r1 = (b1 - std::sqrt(b1 * b1 - 4.0 * a1 * c1)) / (2.0 * a1);

  const double a2 = 4.0;
  const double b2 = 2.0 * (h + w);
  const double c2 = (1.0 - o) * w * h;
  const double r2 = (b2 - std::sqrt(b2 * b2 - 4.0 * a2 * c2)) / (2.0 * a2);

  const double a3 = 4.0 * o;
  const double b3 = -2.0 * o * (h + w);
  const double c3 = (o - 1.0) * w * h;
  const double r3 = (b3 + std::sqrt(b3 * b3 - 4.0 * a3 * c3)) / (2.0 * a3);

  return std::min({r1, r2, r3});
}

std::vector<double> gt_heatmap(const scene::Scenario& s, const GridSpec& g) {
  const std::size_t cells = static_cast<std::size_t>(g.h) * g.w;
  std::vector<double> hm(cells * scene::kCategoryCount, 0.0);
  for (const auto& o : s.objects) {
    if (!g.in_range(o.box.cx, o.box.cy, o.box.cz)) continue;
    const int ci = g.cell_x(o.box.cx);
    const int cj = g.cell_y(o.box.cy);
    const int ch = static_cast<int>(o.category);
    const double r = std::max(2.0, gaussian_radius(o.box.l / g.dx, o.box.w / g.dy, 0.1));
    const double sigma = r / 3.0;
    const double denom = 2.0 * sigma * sigma;
    const int win = static_cast<int>(std::ceil(r));
    for (int di = -win; di <= win; ++di) {
      const int i = ci + di;
      if (i < 0 || i >= g.h) continue;
      for (int dj = -win; dj <= win; ++dj) {
        const int j = cj + dj;
        if (j < 0 || j >= g.w) continue;
        const double v = std::exp(-(static_cast<double>(di) * di + static_cast<double>(dj) * dj) / denom);
        double& cell = hm[static_cast<std::size_t>(g.flat(i, j)) * scene::kCategoryCount + ch];
        cell = std::max(cell, v);
      }
    }
  }
  return hm;
}

Tensor embed_text(const scene::TokenBatch& batch, const Tensor& table) {
  for (int id : batch.ids)
    if (id < 0 || id >= table.dim(0))
      throw scene::vocab_error("token index " + std::to_string(id) + " outside embedding table of " +
                               std::to_string(table.dim(0)) + " rows");
  return gather_rows(table, batch.ids);
}

}  // namespace bevref::grid
