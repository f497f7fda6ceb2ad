#pragma once

#include <array>
#include <stdexcept>

namespace tacood {

inline constexpr double kPi = 3.14159265358979323846;

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

// Planar rigid pose: translation plus heading about +z.
struct Pose {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  double yaw = 0.0;
};

struct BBox {
  Vec3 center;
  double l = 1.0;
  double w = 1.0;
  double h = 1.0;
  double yaw = 0.0;
};

class GeometryError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Maps any finite angle into (-pi, pi].
double wrap_angle(double a);

// Signed shortest rotation from a to b, in (-pi, pi].
double angle_diff(double from, double to);

Pose interpolate_pose(const Pose& p0, const Pose& p1, double alpha);
BBox interpolate_bbox(const BBox& b0, const BBox& b1, double alpha);

Pose inverse(const Pose& pose);
Pose compose(const Pose& a, const Pose& b);
Vec3 transform_point(const Pose& pose, const Vec3& pt);
Vec2 transform_point(const Pose& pose, const Vec2& pt);

// Corners in counterclockwise order starting at the front-left.
std::array<Vec2, 4> bbox_corners_bev(const BBox& b);

bool point_in_bbox_bev(const BBox& b, const Vec2& p);

// Area of the intersection of two convex polygons given in CCW order.
double convex_intersection_area(const Vec2* a, int na, const Vec2* b, int nb);

double rotated_iou_bev(const BBox& a, const BBox& b);

}  // namespace tacood
