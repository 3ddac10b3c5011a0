#include "mono3d/depthsup.hpp"

#include <cmath>

namespace mono3d {

DepthMap pointcloud_to_depthmap(const PointCloud& pc, const Pose& cam_from_world,
                                const CameraIntrinsics& k, int height, int width) {
  DepthMap d(height, width);
  for (const auto& pw : pc.points) {
    const Vec3 p = pc.world_frame ? cam_from_world.apply(pw) : pw;
    if (p[2] <= 0) continue;
    const auto px = project(p, k);
    const int u = static_cast<int>(std::lround(px.u));
    const int v = static_cast<int>(std::lround(px.v));
    if (u < 0 || u >= width || v < 0 || v >= height) continue;
    if (!d.is_valid(v, u) || p[2] < d.at(v, u)) d.set(v, u, p[2]);
  }
  return d;
}

std::vector<uint8_t> ignore_close_mask(const DepthMap& d, double d_min) {
  if (d_min < 0) throw std::invalid_argument("ignore_close_mask: d_min must be >= 0");
  std::vector<uint8_t> mask(d.numel(), 0);
  for (std::size_t i = 0; i < d.numel(); ++i)
    mask[i] = d.valid[i] && d.values[i] >= d_min;
  return mask;
}

}  // namespace mono3d
