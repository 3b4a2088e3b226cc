#pragma once

#include <stdexcept>
#include <vector>

#include "bevref/scene.hpp"
#include "bevref/tensor.hpp"

// Scenario -> model inputs: per-cell pillar statistics over a BEV grid, the
// trainable encoding to d channels, per-category ground-truth center
// heatmaps, and text token embedding lookup.

namespace bevref::grid {

struct grid_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GridSpec {
  double x_min = 0.0, x_max = 0.0;
  double y_min = 0.0, y_max = 0.0;
  double z_min = 0.0, z_max = 0.0;
  double dx = 1.0, dy = 1.0, dz = 1.0;
  int h = 0;  // cells along x
  int w = 0;  // cells along y

  // Ranges must be whole multiples of the voxel size.
  static GridSpec create(double x_min, double x_max, double y_min, double y_max, double z_min,
                         double z_max, double dx, double dy, double dz);

  bool in_range(double x, double y, double z) const;
  int cell_x(double x) const;
  int cell_y(double y) const;
  double cell_center_x(int ix) const { return x_min + (ix + 0.5) * dx; }
  double cell_center_y(int iy) const { return y_min + (iy + 0.5) * dy; }
  int flat(int ix, int iy) const { return ix * w + iy; }
};

// Raw channel order: mean dx, mean dy, mean dz (offsets from the cell center
// and the z mid-plane), mean z, mean intensity, count, max z. Cells with no
// points hold the zero vector, including max z.
inline constexpr int kRawStatChannels = 7;

std::vector<double> pillar_stats(const scene::Scenario& s, const GridSpec& g);

// Trainable encoder: linear 7->d + relu, then two same-size 3x3 conv + relu
// stages. raw is [h*w, 7]; returns [h*w, d].
Tensor encode_pillars(const Tensor& raw, const GridSpec& g, const Tensor& lin_w,
                      const Tensor& lin_b, const Tensor& conv1_w, const Tensor& conv1_b,
                      const Tensor& conv2_w, const Tensor& conv2_b);

// Radius at which a box of the given footprint (in cells) still overlaps a
// shifted copy by min_overlap; the usual center-heatmap prescription.
double gaussian_radius(double l_cells, double w_cells, double min_overlap);

// [h*w, c] per-category heatmap: one Gaussian per object, peak exactly 1 at
// the center cell, sigma = r/3 with r = max(2, gaussian_radius(l, w, 0.1)),
// overlaps merged with elementwise max.
std::vector<double> gt_heatmap(const scene::Scenario& s, const GridSpec& g);

// Row lookup into table [vocab, d]; gradient reaches only looked-up rows.
Tensor embed_text(const scene::TokenBatch& batch, const Tensor& table);

}  // namespace bevref::grid
