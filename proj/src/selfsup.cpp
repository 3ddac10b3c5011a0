#include "mono3d/selfsup.hpp"

#include <cstdio>
#include <filesystem>

namespace mono3d {

namespace fs = std::filesystem;

std::vector<PhotoSample> collect_photo_samples(const std::vector<Sequence>& data,
                                               const std::vector<int>& offsets) {
  if (offsets.empty()) throw std::invalid_argument("collect_photo_samples: no context offsets");
  std::vector<PhotoSample> out;
  for (const Sequence& seq : data) {
    const int n = static_cast<int>(seq.frames.size());
    for (int t = 0; t < n; ++t) {
      PhotoSample s;
      s.target = &seq.frames[t];
      bool ok = true;
      for (int off : offsets) {
        const int si = t + off;
        if (si < 0 || si >= n) {
          ok = false;
          break;
        }
        s.contexts.push_back(&seq.frames[si].image);
        s.poses_t_to_s.push_back(
            seq.frames[si].cam_from_world.compose(seq.frames[t].cam_from_world.inverse()));
      }
      if (ok) out.push_back(std::move(s));
    }
  }
  return out;
}

std::string pseudo_label_path(const std::string& root, int seq_index, int frame_index) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "seq_%04d/pseudo_depth/%03d.png", seq_index, frame_index);
  return (fs::path(root) / buf).string();
}

void write_pseudo_label(const std::string& root, int seq_index, int frame_index,
                        const DepthMap& d) {
  const fs::path path = pseudo_label_path(root, seq_index, frame_index);
  std::error_code ec;
  fs::create_directories(path.parent_path(), ec);
  if (ec) throw std::runtime_error("cannot create directory: " + path.parent_path().string());
  write_png_depth16(path.string(), d);
}

DepthMap read_pseudo_label(const std::string& root, int seq_index, int frame_index) {
  return read_png_depth16(pseudo_label_path(root, seq_index, frame_index));
}

double abs_rel(const DepthMap& pred, const DepthMap& gt,
               const std::vector<uint8_t>* select) {
  double sum = 0;
  long n = 0;
  for (std::size_t i = 0; i < gt.numel(); ++i) {
    if (!gt.valid[i] || !pred.valid[i]) continue;
    if (select && !(*select)[i]) continue;
    sum += std::abs(pred.values[i] - gt.values[i]) / gt.values[i];
    ++n;
  }
  return n == 0 ? 0.0 : sum / n;
}

}  // namespace mono3d
