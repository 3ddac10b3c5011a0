#pragma once

#include <map>
#include <string>

#include "mono3d/geometry.hpp"

// nuScenes-style evaluation (center-distance AP, ATE/ASE/AOE, NDS-8 composite)
// and KITTI-style IoU AP at 40 recall points. All functions take per-frame
// detection/ground-truth lists; matching never crosses frames.

namespace mono3d {

using FrameBoxes = std::vector<std::vector<Box3D>>;

constexpr double kApDistThresholds[4] = {0.5, 1.0, 2.0, 4.0};
constexpr double kTpMatchDist = 2.0;   // nuScenes TP-metric threshold
constexpr double kAteNorm = 4.0;       // ATE normalizer for NDS (max match dist)

// BEV (x-z plane) center distance.
double bev_center_distance(const Box3D& a, const Box3D& b);

struct MatchResult {
  // indexed like the flattened, score-sorted detection list
  std::vector<int> det_frame;
  std::vector<int> det_gt;        // matched gt index within its frame, or -1
  std::vector<double> det_dist;   // center distance of the match
  std::vector<double> det_score;
  long num_gt = 0;
};

// Greedy matching by descending score: a detection matches the closest still
// unmatched ground truth of the same class in its frame within dist_thr.
// Equal scores are ordered by a content-derived key so input permutation of
// ties cannot change the result.
MatchResult greedy_match_center(const FrameBoxes& dets, const FrameBoxes& gts,
                                int class_id, double dist_thr);

// nuScenes AP: 101-point interpolated precision, recall below 0.1 removed,
// precision floor 0.1 subtracted, renormalized by 0.9.
double ap_center_distance(const FrameBoxes& dets, const FrameBoxes& gts,
                          int class_id, double dist_thr);

struct TPErrors {
  double ate = 1.0, ase = 1.0, aoe = 1.0;
  long num_tp = 0;
  bool valid = false;  // false when there were no true positives
};

// Errors over true positives at the 2 m threshold. ASE is 1 - size-only 3D
// IoU (centers and yaw aligned), AOE the minimal absolute yaw difference.
TPErrors tp_errors(const FrameBoxes& dets, const FrameBoxes& gts, int class_id);

// NDS-8: (5 * mAP + sum over {ATE/4m, ASE, AOE/pi} of (1 - min(1, e))) / 8.
double nds(double map_value, const TPErrors& errors);

enum class KittiMode { k3D, kBEV };

// AP|R40: greedy IoU matching, mean interpolated precision at recalls
// {1/40, ..., 40/40}.
double kitti_ap(const FrameBoxes& dets, const FrameBoxes& gts, int class_id,
                double iou_thr, KittiMode mode);

struct ClassMetrics {
  std::map<double, double> ap_by_dist;  // keyed by distance threshold
  double ap_mean = 0;
  TPErrors tp;
  double kitti_ap3d = 0, kitti_apbev = 0;
};

struct MetricsReport {
  std::vector<std::string> class_names;
  std::vector<ClassMetrics> per_class;
  double map = 0;        // mean over classes and distance thresholds
  double ate = 1, ase = 1, aoe = 1;  // mean over classes with TPs
  double nds8 = 0;
  double kitti_iou_thr = 0.5;

  std::string to_json() const;
  static MetricsReport from_json(const std::string& text);
  std::string table() const;  // fixed-width summary
};

// Full evaluation over all classes. kitti_iou_thr applies to both 3D and BEV.
MetricsReport evaluate(const FrameBoxes& dets, const FrameBoxes& gts,
                       const std::vector<std::string>& class_names,
                       double kitti_iou_thr = 0.5);

}  // namespace mono3d
