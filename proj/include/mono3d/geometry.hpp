#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

// Camera / 3D-box geometry kernel. Axis convention throughout: x right,
// y down, z forward; yaw rotates about the y axis. All lengths in meters,
// pixels for image coordinates.

namespace mono3d {

using Vec3 = std::array<double, 3>;

inline Vec3 operator+(const Vec3& a, const Vec3& b) {
  return {a[0] + b[0], a[1] + b[1], a[2] + b[2]};
}
inline Vec3 operator-(const Vec3& a, const Vec3& b) {
  return {a[0] - b[0], a[1] - b[1], a[2] - b[2]};
}
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline double dot(const Vec3& a, const Vec3& b) {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

struct CameraIntrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;

  CameraIntrinsics() = default;
  CameraIntrinsics(double fx_, double fy_, double cx_, double cy_, int w, int h)
      : fx(fx_), fy(fy_), cx(cx_), cy(cy_), width(w), height(h) {
    if (fx <= 0 || fy <= 0) throw std::invalid_argument("intrinsics: focal must be > 0");
    if (w < 1 || h < 1) throw std::invalid_argument("intrinsics: image size must be >= 1");
  }
};

// Rigid transform x_tgt = R * x_src + t. Rotation row-major.
struct Pose {
  std::array<double, 9> rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};
  Vec3 translation{0, 0, 0};

  Vec3 apply(const Vec3& p) const {
    const auto& r = rotation;
    return {r[0] * p[0] + r[1] * p[1] + r[2] * p[2] + translation[0],
            r[3] * p[0] + r[4] * p[1] + r[5] * p[2] + translation[1],
            r[6] * p[0] + r[7] * p[1] + r[8] * p[2] + translation[2]};
  }
  Vec3 rotate(const Vec3& p) const {
    const auto& r = rotation;
    return {r[0] * p[0] + r[1] * p[1] + r[2] * p[2],
            r[3] * p[0] + r[4] * p[1] + r[5] * p[2],
            r[6] * p[0] + r[7] * p[1] + r[8] * p[2]};
  }
  Pose inverse() const {
    Pose inv;
    const auto& r = rotation;
    inv.rotation = {r[0], r[3], r[6], r[1], r[4], r[7], r[2], r[5], r[8]};
    Vec3 rt = inv.rotate(translation);
    inv.translation = {-rt[0], -rt[1], -rt[2]};
    return inv;
  }
  // this ∘ other: first apply other, then this
  Pose compose(const Pose& o) const;

  // checks R^T R = I and det(R) = +1 within tol
  bool is_valid(double tol = 1e-9) const;

  static Pose yaw_about_y(double yaw, const Vec3& t = {0, 0, 0});
};

struct Box3D {
  Vec3 center{0, 0, 0};  // frame tagged by context (camera or world)
  double w = 1, l = 1, h = 1;
  double yaw = 0;  // radians, about y, in (-pi, pi]
  int class_id = 0;
  double score = -1;  // optional, [0,1]; negative = unset

  void validate() const {
    if (w <= 0 || l <= 0 || h <= 0) throw std::invalid_argument("box: sizes must be > 0");
  }
};

struct AABB2D {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  double area() const { return std::max(0.0, x2 - x1) * std::max(0.0, y2 - y1); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
};

struct PixelDepth {
  double u, v, depth;
};

inline double wrap_angle(double a) {
  a = std::fmod(a + M_PI, 2 * M_PI);
  if (a < 0) a += 2 * M_PI;
  return a - M_PI == -M_PI ? M_PI : a - M_PI;
}

// pinhole projection; throws for z <= 0
PixelDepth project(const Vec3& point, const CameraIntrinsics& k);

// exact right-inverse of project; throws for depth <= 0
Vec3 unproject(double u, double v, double depth, const CameraIntrinsics& k);

// 8 corners, ordering: index bit 0 = +x, bit 1 = +y, bit 2 = +z in the box
// local frame (w along x, h along y, l along z before yaw).
std::array<Vec3, 8> box_corners(const Box3D& box);

constexpr double kNearPlane = 0.1;  // meters

// Tight AABB over the 8 projected corners; not clipped to the image.
// Throws if any corner has z <= z_min.
AABB2D projected_keypoint_aabb(const Box3D& box, const CameraIntrinsics& k,
                               double z_min = kNearPlane);

double iou_aabb(const AABB2D& a, const AABB2D& b);

// IoU of yaw-rotated ground-plane footprints (x-z plane).
double iou_bev(const Box3D& a, const Box3D& b);

// BEV intersection x vertical overlap over union of volumes.
double iou_3d(const Box3D& a, const Box3D& b);

// footprint polygon in the x-z plane, CCW
std::array<std::array<double, 2>, 4> bev_footprint(const Box3D& b);

// Sutherland-Hodgman intersection area of two convex polygons
double convex_intersection_area(const std::vector<std::array<double, 2>>& p,
                                const std::vector<std::array<double, 2>>& q);

double polygon_area(const std::vector<std::array<double, 2>>& poly);

}  // namespace mono3d
