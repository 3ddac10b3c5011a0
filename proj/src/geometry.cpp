#include "mono3d/geometry.hpp"

#include <algorithm>

namespace mono3d {

Pose Pose::compose(const Pose& o) const {
  Pose out;
  const auto& a = rotation;
  const auto& b = o.rotation;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0;
      for (int k = 0; k < 3; ++k) s += a[i * 3 + k] * b[k * 3 + j];
      out.rotation[i * 3 + j] = s;
    }
  out.translation = apply(o.translation);
  return out;
}

bool Pose::is_valid(double tol) const {
  const auto& r = rotation;
  // R^T R == I
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0;
      for (int k = 0; k < 3; ++k) s += r[k * 3 + i] * r[k * 3 + j];
      if (std::abs(s - (i == j ? 1.0 : 0.0)) > tol) return false;
    }
  const double det = r[0] * (r[4] * r[8] - r[5] * r[7]) -
                     r[1] * (r[3] * r[8] - r[5] * r[6]) +
                     r[2] * (r[3] * r[7] - r[4] * r[6]);
  return std::abs(det - 1.0) <= tol;
}

Pose Pose::yaw_about_y(double yaw, const Vec3& t) {
  Pose p;
  const double c = std::cos(yaw), s = std::sin(yaw);
  p.rotation = {c, 0, s, 0, 1, 0, -s, 0, c};
  p.translation = t;
  return p;
}

PixelDepth project(const Vec3& point, const CameraIntrinsics& k) {
  if (point[2] <= 0) throw std::domain_error("project: point behind camera");
  return {k.fx * point[0] / point[2] + k.cx, k.fy * point[1] / point[2] + k.cy,
          point[2]};
}

Vec3 unproject(double u, double v, double depth, const CameraIntrinsics& k) {
  if (depth <= 0) throw std::domain_error("unproject: depth must be > 0");
  return {(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth};
}

std::array<Vec3, 8> box_corners(const Box3D& box) {
  box.validate();
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  std::array<Vec3, 8> out;
  for (int i = 0; i < 8; ++i) {
    const double lx = (i & 1 ? 0.5 : -0.5) * box.w;
    const double ly = (i & 2 ? 0.5 : -0.5) * box.h;
    const double lz = (i & 4 ? 0.5 : -0.5) * box.l;
    // rotation about y: x' = c*x + s*z, z' = -s*x + c*z
    out[i] = {box.center[0] + c * lx + s * lz, box.center[1] + ly,
              box.center[2] - s * lx + c * lz};
  }
  return out;
}

AABB2D projected_keypoint_aabb(const Box3D& box, const CameraIntrinsics& k,
                               double z_min) {
  const auto corners = box_corners(box);
  AABB2D out{1e300, 1e300, -1e300, -1e300};
  for (const auto& c : corners) {
    if (c[2] <= z_min) throw std::domain_error("projected_keypoint_aabb: box clips near plane");
    const auto p = project(c, k);
    out.x1 = std::min(out.x1, p.u);
    out.y1 = std::min(out.y1, p.v);
    out.x2 = std::max(out.x2, p.u);
    out.y2 = std::max(out.y2, p.v);
  }
  return out;
}

double iou_aabb(const AABB2D& a, const AABB2D& b) {
  const double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (ix <= 0 || iy <= 0) return 0.0;
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0) return 0.0;
  return inter / uni;
}

std::array<std::array<double, 2>, 4> bev_footprint(const Box3D& b) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  std::array<std::array<double, 2>, 4> out;
  // local (x, z) corners in CCW order for the x-z plane
  const double hx = 0.5 * b.w, hz = 0.5 * b.l;
  const double local[4][2] = {{-hx, -hz}, {hx, -hz}, {hx, hz}, {-hx, hz}};
  for (int i = 0; i < 4; ++i) {
    const double lx = local[i][0], lz = local[i][1];
    out[i] = {b.center[0] + c * lx + s * lz, b.center[2] - s * lx + c * lz};
  }
  return out;
}

double polygon_area(const std::vector<std::array<double, 2>>& poly) {
  double a = 0;
  const std::size_t n = poly.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = poly[i];
    const auto& q = poly[(i + 1) % n];
    a += p[0] * q[1] - q[0] * p[1];
  }
  return std::abs(a) * 0.5;
}

namespace {
// signed area x2, used for orientation checks
double cross(const std::array<double, 2>& o, const std::array<double, 2>& a,
             const std::array<double, 2>& b) {
  return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
}

std::vector<std::array<double, 2>> ensure_ccw(std::vector<std::array<double, 2>> p) {
  double a = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const auto& u = p[i];
    const auto& v = p[(i + 1) % p.size()];
    a += u[0] * v[1] - v[0] * u[1];
  }
  if (a < 0) std::reverse(p.begin(), p.end());
  return p;
}
}  // namespace

double convex_intersection_area(const std::vector<std::array<double, 2>>& p_in,
                                const std::vector<std::array<double, 2>>& q_in) {
  constexpr double kAreaEps = 1e-12;
  auto subject = ensure_ccw(p_in);
  const auto clip = ensure_ccw(q_in);
  for (std::size_t i = 0; i < clip.size() && !subject.empty(); ++i) {
    const auto& e0 = clip[i];
    const auto& e1 = clip[(i + 1) % clip.size()];
    std::vector<std::array<double, 2>> out;
    out.reserve(subject.size() + 4);
    for (std::size_t j = 0; j < subject.size(); ++j) {
      const auto& a = subject[j];
      const auto& b = subject[(j + 1) % subject.size()];
      const double da = cross(e0, e1, a);
      const double db = cross(e0, e1, b);
      if (da >= -kAreaEps) out.push_back(a);
      if ((da > kAreaEps && db < -kAreaEps) || (da < -kAreaEps && db > kAreaEps)) {
        const double t = da / (da - db);
        out.push_back({a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])});
      }
    }
    subject = std::move(out);
  }
  if (subject.size() < 3) return 0.0;
  const double a = polygon_area(subject);
  return a < kAreaEps ? 0.0 : a;
}

double iou_bev(const Box3D& a, const Box3D& b) {
  a.validate();
  b.validate();
  const auto fa = bev_footprint(a);
  const auto fb = bev_footprint(b);
  const double inter = convex_intersection_area({fa.begin(), fa.end()},
                                                {fb.begin(), fb.end()});
  const double uni = a.w * a.l + b.w * b.l - inter;
  if (uni <= 0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

double iou_3d(const Box3D& a, const Box3D& b) {
  a.validate();
  b.validate();
  const auto fa = bev_footprint(a);
  const auto fb = bev_footprint(b);
  const double inter_bev = convex_intersection_area({fa.begin(), fa.end()},
                                                    {fb.begin(), fb.end()});
  const double ya0 = a.center[1] - 0.5 * a.h, ya1 = a.center[1] + 0.5 * a.h;
  const double yb0 = b.center[1] - 0.5 * b.h, yb1 = b.center[1] + 0.5 * b.h;
  const double overlap_y = std::max(0.0, std::min(ya1, yb1) - std::max(ya0, yb0));
  const double inter = inter_bev * overlap_y;
  const double uni = a.w * a.l * a.h + b.w * b.l * b.h - inter;
  if (uni <= 0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

}  // namespace mono3d
