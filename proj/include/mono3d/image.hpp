#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mono3d/tensor.hpp"

namespace mono3d {

// RGB image, CHW, values in [0,1].
using Image = Tensor<double>;

// Dense depth map with validity mask. values > 0 wherever valid.
struct DepthMap {
  int height = 0, width = 0;
  std::vector<double> values;   // meters
  std::vector<uint8_t> valid;

  DepthMap() = default;
  DepthMap(int h, int w) : height(h), width(w), values(std::size_t(h) * w, 0.0),
                           valid(std::size_t(h) * w, 0) {}
  double& at(int y, int x) { return values[std::size_t(y) * width + x]; }
  double at(int y, int x) const { return values[std::size_t(y) * width + x]; }
  bool is_valid(int y, int x) const { return valid[std::size_t(y) * width + x] != 0; }
  void set(int y, int x, double d) {
    values[std::size_t(y) * width + x] = d;
    valid[std::size_t(y) * width + x] = 1;
  }
  std::size_t numel() const { return values.size(); }
};

// 8-bit RGB PNG
void write_png_rgb(const std::string& path, const Image& img);
Image read_png_rgb(const std::string& path);

// 16-bit grayscale PNG, KITTI depth convention: value = round(depth_m * 256),
// 0 = invalid. Depths that would overflow 16 bits throw.
void write_png_depth16(const std::string& path, const DepthMap& d);
DepthMap read_png_depth16(const std::string& path);

constexpr double kDepthPngScale = 256.0;

}  // namespace mono3d
