#include "bevref/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <tuple>
#include <vector>

namespace bevref::geo {

namespace {

constexpr double kPi = std::numbers::pi;

double cross(const Vec2& o, const Vec2& a, const Vec2& b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

Vec2 line_intersect(const Vec2& p1, const Vec2& p2, const Vec2& q1, const Vec2& q2) {
  const double a1 = p2.y - p1.y, b1 = p1.x - p2.x;
  const double c1 = a1 * p1.x + b1 * p1.y;
  const double a2 = q2.y - q1.y, b2 = q1.x - q2.x;
  const double c2 = a2 * q1.x + b2 * q1.y;
  const double det = a1 * b2 - a2 * b1;
  // Caller only asks for the intersection when the sides differ, so det != 0.
  return {(b2 * c1 - b1 * c2) / det, (a1 * c2 - a2 * c1) / det};
}

// Sutherland-Hodgman: clip subject polygon against each CCW edge of clip.
std::vector<Vec2> clip_polygon(std::vector<Vec2> subject, const std::array<Vec2, 4>& clip) {
  for (int e = 0; e < 4 && !subject.empty(); ++e) {
    const Vec2& c1 = clip[e];
    const Vec2& c2 = clip[(e + 1) % 4];
    std::vector<Vec2> out;
    out.reserve(subject.size() + 1);
    for (std::size_t i = 0; i < subject.size(); ++i) {
      const Vec2& s = subject[i];
      const Vec2& t = subject[(i + 1) % subject.size()];
      const bool s_in = cross(c1, c2, s) >= 0.0;
      const bool t_in = cross(c1, c2, t) >= 0.0;
      if (s_in && t_in) {
        out.push_back(t);
      } else if (s_in && !t_in) {
        out.push_back(line_intersect(s, t, c1, c2));
      } else if (!s_in && t_in) {
        out.push_back(line_intersect(s, t, c1, c2));
        out.push_back(t);
      }
    }
    subject = std::move(out);
  }
  return subject;
}

double polygon_area(const std::vector<Vec2>& p) {
  if (p.size() < 3) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const Vec2& a = p[i];
    const Vec2& b = p[(i + 1) % p.size()];
    s += a.x * b.y - b.x * a.y;
  }
  return std::max(0.0, 0.5 * s);
}

// Total order on boxes so symmetric entry points can pick a fixed operand order.
bool box_before(const Box3D& a, const Box3D& b) {
  return std::tie(a.cx, a.cy, a.cz, a.l, a.w, a.h, a.yaw) <
         std::tie(b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw);
}

double bev_intersection_ordered(const Box3D& a, const Box3D& b) {
  if (a.l <= 0.0 || a.w <= 0.0 || b.l <= 0.0 || b.w <= 0.0) return 0.0;
  const auto ca = bev_corners(a);
  const auto cb = bev_corners(b);
  return polygon_area(clip_polygon({ca.begin(), ca.end()}, cb));
}

}  // namespace

double normalize_angle(double a) {
  const double two_pi = 2.0 * kPi;
  double r = a - two_pi * std::floor((a + kPi) / two_pi);
  if (r >= kPi) r -= two_pi;  // guards the floor landing exactly on the seam
  if (r < -kPi) r += two_pi;
  return r;
}

Box3D make_box(double cx, double cy, double cz, double l, double w, double h, double yaw) {
  return {cx, cy, cz, l, w, h, normalize_angle(yaw)};
}

std::array<Vec2, 4> bev_corners(const Box3D& b) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double hl = 0.5 * b.l, hw = 0.5 * b.w;
  const std::array<Vec2, 4> local{{{hl, hw}, {-hl, hw}, {-hl, -hw}, {hl, -hw}}};
  std::array<Vec2, 4> out;
  for (int i = 0; i < 4; ++i)
    out[i] = {b.cx + c * local[i].x - s * local[i].y, b.cy + s * local[i].x + c * local[i].y};
  return out;
}

double bev_area(const Box3D& b) { return std::max(0.0, b.l) * std::max(0.0, b.w); }

double volume(const Box3D& b) { return bev_area(b) * std::max(0.0, b.h); }

double bev_intersection_area(const Box3D& a, const Box3D& b) {
  return box_before(b, a) ? bev_intersection_ordered(b, a) : bev_intersection_ordered(a, b);
}

double iou_bev(const Box3D& a, const Box3D& b) {
  const Box3D& u = box_before(b, a) ? b : a;
  const Box3D& v = box_before(b, a) ? a : b;
  const double inter = bev_intersection_ordered(u, v);
  const double uni = bev_area(u) + bev_area(v) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

double iou_3d(const Box3D& a, const Box3D& b) {
  const Box3D& u = box_before(b, a) ? b : a;
  const Box3D& v = box_before(b, a) ? a : b;
  const double inter_bev = bev_intersection_ordered(u, v);
  const double zlo = std::max(u.cz - 0.5 * u.h, v.cz - 0.5 * v.h);
  const double zhi = std::min(u.cz + 0.5 * u.h, v.cz + 0.5 * v.h);
  const double dz = std::max(0.0, zhi - zlo);
  const double inter = inter_bev * dz;
  const double uni = volume(u) + volume(v) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

double center_distance_bev(const Box3D& a, const Box3D& b) {
  return std::hypot(a.cx - b.cx, a.cy - b.cy);
}

bool point_in_box(const Box3D& b, double px, double py, double pz) {
  if (std::fabs(pz - b.cz) > 0.5 * b.h) return false;
  const double dx = px - b.cx, dy = py - b.cy;
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double lx = c * dx + s * dy;
  const double ly = -s * dx + c * dy;
  return std::fabs(lx) <= 0.5 * b.l && std::fabs(ly) <= 0.5 * b.w;
}

}  // namespace bevref::geo
