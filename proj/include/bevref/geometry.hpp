#pragma once

#include <array>

namespace bevref::geo {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

// Oriented box: center (cx, cy, cz), extents l along the heading axis, w
// across it, h vertical, yaw CCW from +x. Construct via make_box so yaw is
// always stored normalized to [-pi, pi).
struct Box3D {
  double cx = 0.0, cy = 0.0, cz = 0.0;
  double l = 0.0, w = 0.0, h = 0.0;
  double yaw = 0.0;
  bool operator==(const Box3D&) const = default;
};

double normalize_angle(double a);  // wraps into [-pi, pi)

Box3D make_box(double cx, double cy, double cz, double l, double w, double h, double yaw);

// Top-down footprint corners in CCW order, starting from the local (+l/2, +w/2) corner.
std::array<Vec2, 4> bev_corners(const Box3D& b);

double bev_area(const Box3D& b);
double volume(const Box3D& b);

// Rotated-rectangle intersection area via convex polygon clipping.
double bev_intersection_area(const Box3D& a, const Box3D& b);

// Both IoUs order their arguments canonically before computing, so
// iou(a, b) == iou(b, a) bit for bit.
double iou_bev(const Box3D& a, const Box3D& b);
double iou_3d(const Box3D& a, const Box3D& b);

double center_distance_bev(const Box3D& a, const Box3D& b);

// Closed membership test (boundary counts as inside).
bool point_in_box(const Box3D& b, double px, double py, double pz);

}  // namespace bevref::geo
