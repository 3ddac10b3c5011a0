#include "mono3d/image.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>

namespace mono3d {

namespace {

struct FileCloser {
  void operator()(FILE* f) const { if (f) std::fclose(f); }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

[[noreturn]] void fail(const std::string& path, const char* what) {
  throw std::runtime_error(std::string(what) + ": " + path);
}

}  // namespace

void write_png_rgb(const std::string& path, const Image& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw std::invalid_argument("write_png_rgb: expected [3,H,W]");
  const int h = img.dim(1), w = img.dim(2);
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) fail(path, "cannot open for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail(path, "png write error");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<uint8_t> rowbuf(std::size_t(w) * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = img.at(c, y, x);
        v = v < 0 ? 0 : (v > 1 ? 1 : v);
        rowbuf[std::size_t(x) * 3 + c] = static_cast<uint8_t>(std::lround(v * 255.0));
      }
    png_write_row(png, rowbuf.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image read_png_rgb(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) fail(path, "cannot open");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(path, "png read error");
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const int w = png_get_image_width(png, info);
  const int h = png_get_image_height(png, info);
  if (png_get_color_type(png, info) != PNG_COLOR_TYPE_RGB ||
      png_get_bit_depth(png, info) != 8) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(path, "not an 8-bit RGB png");
  }
  Image img({3, h, w});
  std::vector<uint8_t> rowbuf(std::size_t(w) * 3);
  for (int y = 0; y < h; ++y) {
    png_read_row(png, rowbuf.data(), nullptr);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) = rowbuf[std::size_t(x) * 3 + c] / 255.0;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void write_png_depth16(const std::string& path, const DepthMap& d) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) fail(path, "cannot open for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail(path, "png write error");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, d.width, d.height, 16, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<uint8_t> rowbuf(std::size_t(d.width) * 2);
  for (int y = 0; y < d.height; ++y) {
    for (int x = 0; x < d.width; ++x) {
      uint16_t q = 0;
      if (d.is_valid(y, x)) {
        const long code = std::lround(d.at(y, x) * kDepthPngScale);
        if (code < 1 || code > 65535)
          fail(path, "depth out of the 16-bit png range");
        q = static_cast<uint16_t>(code);
      }
      rowbuf[std::size_t(x) * 2] = static_cast<uint8_t>(q >> 8);  // big-endian per PNG
      rowbuf[std::size_t(x) * 2 + 1] = static_cast<uint8_t>(q & 0xff);
    }
    png_write_row(png, rowbuf.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

DepthMap read_png_depth16(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) fail(path, "cannot open");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(path, "png read error");
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const int w = png_get_image_width(png, info);
  const int h = png_get_image_height(png, info);
  if (png_get_color_type(png, info) != PNG_COLOR_TYPE_GRAY ||
      png_get_bit_depth(png, info) != 16) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(path, "not a 16-bit gray png");
  }
  DepthMap d(h, w);
  std::vector<uint8_t> rowbuf(std::size_t(w) * 2);
  for (int y = 0; y < h; ++y) {
    png_read_row(png, rowbuf.data(), nullptr);
    for (int x = 0; x < w; ++x) {
      const uint16_t q = static_cast<uint16_t>((rowbuf[std::size_t(x) * 2] << 8) |
                                               rowbuf[std::size_t(x) * 2 + 1]);
      if (q != 0) d.set(y, x, q / kDepthPngScale);
    }
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return d;
}

}  // namespace mono3d
