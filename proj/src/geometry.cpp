#include "tacood/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace tacood {

double wrap_angle(double a) {
  if (!std::isfinite(a)) throw GeometryError("wrap_angle: non-finite angle");
  double r = std::fmod(a, 2.0 * kPi);
  if (r <= -kPi) r += 2.0 * kPi;
  if (r > kPi) r -= 2.0 * kPi;
  return r;
}

double angle_diff(double from, double to) { return wrap_angle(to - from); }

static void check_alpha(double alpha, const char* who) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw GeometryError(std::string(who) + ": alpha must lie in [0,1], got " + std::to_string(alpha));
  }
}

Pose interpolate_pose(const Pose& p0, const Pose& p1, double alpha) {
  check_alpha(alpha, "interpolate_pose");
  if (alpha == 0.0) return p0;
  if (alpha == 1.0) return p1;
  Pose out;
  out.x = p0.x + alpha * (p1.x - p0.x);
  out.y = p0.y + alpha * (p1.y - p0.y);
  out.z = p0.z + alpha * (p1.z - p0.z);
  out.yaw = wrap_angle(p0.yaw + alpha * angle_diff(p0.yaw, p1.yaw));
  return out;
}

BBox interpolate_bbox(const BBox& b0, const BBox& b1, double alpha) {
  check_alpha(alpha, "interpolate_bbox");
  if (alpha == 0.0) return b0;
  if (alpha == 1.0) return b1;
  const Pose p = interpolate_pose({b0.center.x, b0.center.y, b0.center.z, b0.yaw},
                                  {b1.center.x, b1.center.y, b1.center.z, b1.yaw}, alpha);
  BBox out;
  out.center = {p.x, p.y, p.z};
  out.yaw = p.yaw;
  out.l = b0.l + alpha * (b1.l - b0.l);
  out.w = b0.w + alpha * (b1.w - b0.w);
  out.h = b0.h + alpha * (b1.h - b0.h);
  return out;
}

Pose inverse(const Pose& pose) {
  const double c = std::cos(pose.yaw);
  const double s = std::sin(pose.yaw);
  Pose inv;
  inv.x = -(c * pose.x + s * pose.y);
  inv.y = -(-s * pose.x + c * pose.y);
  inv.z = -pose.z;
  inv.yaw = wrap_angle(-pose.yaw);
  return inv;
}

Pose compose(const Pose& a, const Pose& b) {
  const Vec3 t = transform_point(a, Vec3{b.x, b.y, b.z});
  return {t.x, t.y, t.z, wrap_angle(a.yaw + b.yaw)};
}

Vec3 transform_point(const Pose& pose, const Vec3& pt) {
  const double c = std::cos(pose.yaw);
  const double s = std::sin(pose.yaw);
  return {c * pt.x - s * pt.y + pose.x, s * pt.x + c * pt.y + pose.y, pt.z + pose.z};
}

Vec2 transform_point(const Pose& pose, const Vec2& pt) {
  const Vec3 r = transform_point(pose, Vec3{pt.x, pt.y, 0.0});
  return {r.x, r.y};
}

std::array<Vec2, 4> bbox_corners_bev(const BBox& b) {
  const double c = std::cos(b.yaw);
  const double s = std::sin(b.yaw);
  const double hl = 0.5 * b.l;
  const double hw = 0.5 * b.w;
  const std::array<Vec2, 4> local{{{hl, hw}, {-hl, hw}, {-hl, -hw}, {hl, -hw}}};
  std::array<Vec2, 4> out;
  for (std::size_t i = 0; i < 4; ++i) {
    out[i] = {b.center.x + c * local[i].x - s * local[i].y, b.center.y + s * local[i].x + c * local[i].y};
  }
  return out;
}

bool point_in_bbox_bev(const BBox& b, const Vec2& p) {
  const double c = std::cos(b.yaw);
  const double s = std::sin(b.yaw);
  const double dx = p.x - b.center.x;
  const double dy = p.y - b.center.y;
  const double lx = c * dx + s * dy;
  const double ly = -s * dx + c * dy;
  return std::abs(lx) <= 0.5 * b.l && std::abs(ly) <= 0.5 * b.w;
}

namespace {

double polygon_area(const std::vector<Vec2>& poly) {
  double acc = 0.0;
  const std::size_t n = poly.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2& p = poly[i];
    const Vec2& q = poly[(i + 1) % n];
    acc += p.x * q.y - q.x * p.y;
  }
  return 0.5 * acc;
}

// Signed distance-like test: > 0 means p is left of the directed edge a->b.
double side(const Vec2& a, const Vec2& b, const Vec2& p) {
  return (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
}

}  // namespace

double convex_intersection_area(const Vec2* a, int na, const Vec2* b, int nb) {
  std::vector<Vec2> poly(a, a + na);
  std::vector<Vec2> next;
  for (int e = 0; e < nb && !poly.empty(); ++e) {
    const Vec2& c0 = b[e];
    const Vec2& c1 = b[(e + 1) % nb];
    next.clear();
    const std::size_t n = poly.size();
    for (std::size_t i = 0; i < n; ++i) {
      const Vec2& p = poly[i];
      const Vec2& q = poly[(i + 1) % n];
      const double sp = side(c0, c1, p);
      const double sq = side(c0, c1, q);
      if (sp >= 0.0) next.push_back(p);
      if ((sp >= 0.0) != (sq >= 0.0)) {
        const double t = sp / (sp - sq);
        next.push_back({p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)});
      }
    }
    poly.swap(next);
  }
  if (poly.size() < 3) return 0.0;
  return std::max(0.0, polygon_area(poly));
}

double rotated_iou_bev(const BBox& a, const BBox& b) {
  const double area_a = a.l * a.w;
  const double area_b = b.l * b.w;
  if (!(area_a > 0.0) || !(area_b > 0.0)) throw GeometryError("rotated_iou_bev: degenerate box");
  const auto ca = bbox_corners_bev(a);
  const auto cb = bbox_corners_bev(b);
  // Averaging both clip orders keeps the result exactly symmetric.
  const double inter = convex_intersection_area(ca.data(), 4, cb.data(), 4);
  const double inter_rev = convex_intersection_area(cb.data(), 4, ca.data(), 4);
  const double i = 0.5 * (inter + inter_rev);
  const double uni = area_a + area_b - i;
  if (uni <= 0.0) return 0.0;
  return std::clamp(i / uni, 0.0, 1.0);
}

}  // namespace tacood
