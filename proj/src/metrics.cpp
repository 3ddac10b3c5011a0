#include "mono3d/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

namespace mono3d {

using nlohmann::json;

double bev_center_distance(const Box3D& a, const Box3D& b) {
  return std::hypot(a.center[0] - b.center[0], a.center[2] - b.center[2]);
}

namespace {

struct DetRef {
  int frame;
  int index;  // within the frame
  double score;
};

// deterministic, content-derived ordering: permuting equal-score inputs
// cannot change evaluation results
std::vector<DetRef> sorted_dets(const FrameBoxes& dets, int class_id) {
  std::vector<DetRef> out;
  for (int f = 0; f < int(dets.size()); ++f)
    for (int i = 0; i < int(dets[f].size()); ++i)
      if (dets[f][i].class_id == class_id)
        out.push_back({f, i, dets[f][i].score});
  std::sort(out.begin(), out.end(), [&](const DetRef& a, const DetRef& b) {
    if (a.score != b.score) return a.score > b.score;
    const Box3D& ba = dets[a.frame][a.index];
    const Box3D& bb = dets[b.frame][b.index];
    if (a.frame != b.frame) return a.frame < b.frame;
    const auto ka = std::make_tuple(ba.center[0], ba.center[1], ba.center[2],
                                    ba.yaw, ba.w, ba.l, ba.h);
    const auto kb = std::make_tuple(bb.center[0], bb.center[1], bb.center[2],
                                    bb.yaw, bb.w, bb.l, bb.h);
    return ka < kb;
  });
  return out;
}

long count_gt(const FrameBoxes& gts, int class_id) {
  long n = 0;
  for (const auto& frame : gts)
    for (const auto& g : frame) n += g.class_id == class_id;
  return n;
}

// interpolated precision envelope: p(r) = max precision at recall >= r
std::vector<double> precision_envelope(const std::vector<uint8_t>& is_tp, long n_gt,
                                       const std::vector<double>& recall_points) {
  std::vector<double> prec, rec;
  long tp = 0, fp = 0;
  for (uint8_t t : is_tp) {
    tp += t;
    fp += !t;
    prec.push_back(double(tp) / double(tp + fp));
    rec.push_back(n_gt > 0 ? double(tp) / double(n_gt) : 0.0);
  }
  std::vector<double> out;
  for (double r : recall_points) {
    double best = 0;
    for (std::size_t i = 0; i < prec.size(); ++i)
      if (rec[i] >= r - 1e-12) best = std::max(best, prec[i]);
    out.push_back(best);
  }
  return out;
}

}  // namespace

MatchResult greedy_match_center(const FrameBoxes& dets, const FrameBoxes& gts,
                                int class_id, double dist_thr) {
  if (dets.size() != gts.size())
    throw std::invalid_argument("greedy_match_center: frame count mismatch");
  MatchResult res;
  res.num_gt = count_gt(gts, class_id);
  std::vector<std::vector<uint8_t>> taken(gts.size());
  for (std::size_t f = 0; f < gts.size(); ++f) taken[f].assign(gts[f].size(), 0);

  for (const DetRef& d : sorted_dets(dets, class_id)) {
    const Box3D& box = dets[d.frame][d.index];
    int best = -1;
    double best_dist = dist_thr;
    for (int g = 0; g < int(gts[d.frame].size()); ++g) {
      if (taken[d.frame][g] || gts[d.frame][g].class_id != class_id) continue;
      const double dist = bev_center_distance(box, gts[d.frame][g]);
      if (dist <= best_dist) {
        best_dist = dist;
        best = g;
      }
    }
    if (best >= 0) taken[d.frame][best] = 1;
    res.det_frame.push_back(d.frame);
    res.det_gt.push_back(best);
    res.det_dist.push_back(best >= 0 ? best_dist : -1.0);
    res.det_score.push_back(d.score);
  }
  return res;
}

double ap_center_distance(const FrameBoxes& dets, const FrameBoxes& gts,
                          int class_id, double dist_thr) {
  auto m = greedy_match_center(dets, gts, class_id, dist_thr);
  if (m.num_gt == 0) return 0.0;
  std::vector<uint8_t> is_tp;
  for (int g : m.det_gt) is_tp.push_back(g >= 0);

  // 101 recall points 0.00 .. 1.00; drop the first 11 (recall < 0.1),
  // subtract the 0.1 precision floor, renormalize by 0.9
  std::vector<double> recall_points;
  for (int i = 11; i <= 100; ++i) recall_points.push_back(i / 100.0);
  auto prec = precision_envelope(is_tp, m.num_gt, recall_points);
  double acc = 0;
  for (double p : prec) acc += std::max(0.0, p - 0.1);
  // AP is mathematically in [0,1]; clamp away accumulated rounding error
  return std::clamp(acc / prec.size() / 0.9, 0.0, 1.0);
}

TPErrors tp_errors(const FrameBoxes& dets, const FrameBoxes& gts, int class_id) {
  TPErrors out;
  double ate = 0, ase = 0, aoe = 0;
  std::vector<std::vector<uint8_t>> taken(gts.size());
  for (std::size_t f = 0; f < gts.size(); ++f) taken[f].assign(gts[f].size(), 0);
  for (const DetRef& dref : sorted_dets(dets, class_id)) {
    const Box3D& det = dets[dref.frame][dref.index];
    int best = -1;
    double best_dist = kTpMatchDist;
    for (int g = 0; g < int(gts[dref.frame].size()); ++g) {
      if (taken[dref.frame][g] || gts[dref.frame][g].class_id != class_id) continue;
      const double dist = bev_center_distance(det, gts[dref.frame][g]);
      if (dist <= best_dist) {
        best_dist = dist;
        best = g;
      }
    }
    if (best < 0) continue;
    taken[dref.frame][best] = 1;
    const Box3D& gt = gts[dref.frame][best];
    ate += best_dist;
    // size-only IoU: align centers and yaw, intersect per axis
    const double iw = std::min(det.w, gt.w), il = std::min(det.l, gt.l),
                 ih = std::min(det.h, gt.h);
    const double inter = iw * il * ih;
    const double uni = det.w * det.l * det.h + gt.w * gt.l * gt.h - inter;
    ase += 1.0 - inter / uni;
    double dyaw = std::abs(wrap_angle(det.yaw - gt.yaw));
    aoe += dyaw;
    ++out.num_tp;
  }
  if (out.num_tp == 0) return out;  // worst-case defaults, valid = false
  out.ate = ate / out.num_tp;
  out.ase = ase / out.num_tp;
  out.aoe = aoe / out.num_tp;
  out.valid = true;
  return out;
}

double nds(double map_value, const TPErrors& errors) {
  if (map_value < 0 || map_value > 1) throw std::invalid_argument("nds: mAP out of range");
  const double terms[3] = {errors.ate / kAteNorm, errors.ase, errors.aoe / M_PI};
  double acc = 5.0 * map_value;
  for (double e : terms) acc += 1.0 - std::min(1.0, e);
  return acc / 8.0;
}

double kitti_ap(const FrameBoxes& dets, const FrameBoxes& gts, int class_id,
                double iou_thr, KittiMode mode) {
  if (dets.size() != gts.size())
    throw std::invalid_argument("kitti_ap: frame count mismatch");
  const long n_gt = count_gt(gts, class_id);
  if (n_gt == 0) return 0.0;
  auto iou = [&](const Box3D& a, const Box3D& b) {
    return mode == KittiMode::k3D ? iou_3d(a, b) : iou_bev(a, b);
  };
  std::vector<std::vector<uint8_t>> taken(gts.size());
  for (std::size_t f = 0; f < gts.size(); ++f) taken[f].assign(gts[f].size(), 0);
  std::vector<uint8_t> is_tp;
  for (const DetRef& dref : sorted_dets(dets, class_id)) {
    const Box3D& det = dets[dref.frame][dref.index];
    int best = -1;
    double best_iou = iou_thr;
    for (int g = 0; g < int(gts[dref.frame].size()); ++g) {
      if (taken[dref.frame][g] || gts[dref.frame][g].class_id != class_id) continue;
      const double v = iou(det, gts[dref.frame][g]);
      if (v >= best_iou) {
        best_iou = v;
        best = g;
      }
    }
    if (best >= 0) taken[dref.frame][best] = 1;
    is_tp.push_back(best >= 0);
  }
  std::vector<double> recall_points;
  for (int i = 1; i <= 40; ++i) recall_points.push_back(i / 40.0);
  auto prec = precision_envelope(is_tp, n_gt, recall_points);
  double acc = 0;
  for (double p : prec) acc += p;
  return std::clamp(acc / 40.0, 0.0, 1.0);
}

MetricsReport evaluate(const FrameBoxes& dets, const FrameBoxes& gts,
                       const std::vector<std::string>& class_names,
                       double kitti_iou_thr) {
  MetricsReport rep;
  rep.class_names = class_names;
  rep.kitti_iou_thr = kitti_iou_thr;
  double map_acc = 0, ate_acc = 0, ase_acc = 0, aoe_acc = 0;
  int tp_classes = 0;
  for (int c = 0; c < int(class_names.size()); ++c) {
    ClassMetrics cm;
    double ap_acc = 0;
    for (double thr : kApDistThresholds) {
      const double ap = ap_center_distance(dets, gts, c, thr);
      cm.ap_by_dist[thr] = ap;
      ap_acc += ap;
    }
    cm.ap_mean = ap_acc / 4.0;
    cm.tp = tp_errors(dets, gts, c);
    cm.kitti_ap3d = kitti_ap(dets, gts, c, kitti_iou_thr, KittiMode::k3D);
    cm.kitti_apbev = kitti_ap(dets, gts, c, kitti_iou_thr, KittiMode::kBEV);
    map_acc += cm.ap_mean;
    if (cm.tp.valid) {
      ate_acc += cm.tp.ate;
      ase_acc += cm.tp.ase;
      aoe_acc += cm.tp.aoe;
      ++tp_classes;
    }
    rep.per_class.push_back(std::move(cm));
  }
  rep.map = class_names.empty() ? 0.0 : map_acc / class_names.size();
  if (tp_classes > 0) {
    rep.ate = ate_acc / tp_classes;
    rep.ase = ase_acc / tp_classes;
    rep.aoe = aoe_acc / tp_classes;
  }
  TPErrors agg;
  agg.ate = rep.ate;
  agg.ase = rep.ase;
  agg.aoe = rep.aoe;
  rep.nds8 = nds(rep.map, agg);
  return rep;
}

std::string MetricsReport::to_json() const {
  json j;
  j["schema"] = "mono3d-metrics-v1";
  j["map"] = map;
  j["ate"] = ate;
  j["ase"] = ase;
  j["aoe"] = aoe;
  j["nds8"] = nds8;
  j["kitti_iou_thr"] = kitti_iou_thr;
  json classes = json::array();
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    const auto& cm = per_class[c];
    json ap = json::object();
    for (const auto& [thr, v] : cm.ap_by_dist) ap[std::to_string(thr)] = v;
    classes.push_back({{"name", class_names[c]},
                       {"ap_by_dist", ap},
                       {"ap_mean", cm.ap_mean},
                       {"ate", cm.tp.ate},
                       {"ase", cm.tp.ase},
                       {"aoe", cm.tp.aoe},
                       {"tp_count", cm.tp.num_tp},
                       {"tp_valid", cm.tp.valid},
                       {"kitti_ap3d", cm.kitti_ap3d},
                       {"kitti_apbev", cm.kitti_apbev}});
  }
  j["classes"] = std::move(classes);
  return j.dump(2);
}

MetricsReport MetricsReport::from_json(const std::string& text) {
  json j = json::parse(text);
  if (j.value("schema", "") != "mono3d-metrics-v1")
    throw std::runtime_error("metrics report: unrecognized schema");
  MetricsReport rep;
  rep.map = j.at("map");
  rep.ate = j.at("ate");
  rep.ase = j.at("ase");
  rep.aoe = j.at("aoe");
  rep.nds8 = j.at("nds8");
  rep.kitti_iou_thr = j.at("kitti_iou_thr");
  for (const auto& c : j.at("classes")) {
    rep.class_names.push_back(c.at("name"));
    ClassMetrics cm;
    for (const auto& [k, v] : c.at("ap_by_dist").items())
      cm.ap_by_dist[std::stod(k)] = v.get<double>();
    cm.ap_mean = c.at("ap_mean");
    cm.tp.ate = c.at("ate");
    cm.tp.ase = c.at("ase");
    cm.tp.aoe = c.at("aoe");
    cm.tp.num_tp = c.at("tp_count");
    cm.tp.valid = c.at("tp_valid");
    cm.kitti_ap3d = c.at("kitti_ap3d");
    cm.kitti_apbev = c.at("kitti_apbev");
    rep.per_class.push_back(std::move(cm));
  }
  return rep;
}

std::string MetricsReport::table() const {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof(line), "%-10s %7s %7s %7s %7s %7s %7s %7s\n",
                "class", "AP", "ATE[m]", "ASE", "AOE[rad]", "NDS-8", "AP3D", "APBEV");
  os << line;
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    const auto& cm = per_class[c];
    std::snprintf(line, sizeof(line), "%-10s %7.3f %7.3f %7.3f %7.3f %7s %7.3f %7.3f\n",
                  class_names[c].c_str(), cm.ap_mean, cm.tp.ate, cm.tp.ase,
                  cm.tp.aoe, "-", cm.kitti_ap3d, cm.kitti_apbev);
    os << line;
  }
  std::snprintf(line, sizeof(line), "%-10s %7.3f %7.3f %7.3f %7.3f %7.3f %7s %7s\n",
                "mean", map, ate, ase, aoe, nds8, "-", "-");
  os << line;
  return os.str();
}

}  // namespace mono3d
