#include "mono3d/detector.hpp"

#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

namespace mono3d {

using nlohmann::json;

void DetectorConfig::validate() const {
  if (strides.empty()) throw std::invalid_argument("detector config: no strides");
  if (scales.empty() || ratios.empty())
    throw std::invalid_argument("detector config: scales/ratios must be non-empty");
  for (double s : scales)
    if (s <= 0) throw std::invalid_argument("detector config: scales must be > 0");
  for (double r : ratios)
    if (r <= 0) throw std::invalid_argument("detector config: ratios must be > 0");
  if (tau <= 0 || tau >= 1) throw std::invalid_argument("detector config: tau must be in (0,1)");
  if (head_layers < 1) throw std::invalid_argument("detector config: head_layers must be >= 1");
  if (num_classes < 1) throw std::invalid_argument("detector config: num_classes must be >= 1");
  if (static_cast<int>(priors().size()) < num_classes)
    throw std::invalid_argument("detector config: missing size priors");
}

const std::vector<ClassPrior>& DetectorConfig::priors() const {
  static const std::vector<ClassPrior> kDefault = WorldConfig::default_classes();
  return size_priors.empty() ? kDefault : size_priors;
}

std::vector<AnchorSet> build_anchor_sets(const DetectorConfig& cfg, int image_h,
                                         int image_w) {
  cfg.validate();
  std::vector<AnchorSet> out;
  for (int s : cfg.strides) {
    if (image_h % s != 0 || image_w % s != 0)
      throw std::invalid_argument("build_anchor_sets: image size not divisible by stride");
    AnchorSet lvl;
    lvl.stride = s;
    lvl.feat_h = image_h / s;
    lvl.feat_w = image_w / s;
    for (double k : cfg.scales)
      for (double r : cfg.ratios) {
        const double side = s * cfg.anchor_base * k;  // area side^2, aspect w/h = r
        lvl.shapes.push_back({side * std::sqrt(r), side / std::sqrt(r)});
      }
    out.push_back(std::move(lvl));
  }
  return out;
}

Assignment assign_instances(const std::vector<AnchorSet>& levels,
                            const std::vector<AABB2D>& gt_boxes, double tau) {
  if (tau <= 0 || tau >= 1) throw std::invalid_argument("assign_instances: tau must be in (0,1)");
  Assignment as;
  for (const auto& lvl : levels) {
    std::vector<int> idx(lvl.locations(), -1);
    std::vector<double> iou(lvl.locations(), 0.0);
    for (int y = 0; y < lvl.feat_h; ++y)
      for (int x = 0; x < lvl.feat_w; ++x) {
        const int loc = y * lvl.feat_w + x;
        for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
          double best = 0;
          for (std::size_t a = 0; a < lvl.shapes.size(); ++a)
            best = std::max(best, iou_aabb(lvl.anchor_at(y, x, int(a)), gt_boxes[g]));
          // highest best-anchor IoU wins; ties keep the smaller gt index
          if (best > tau && best > iou[loc]) {
            iou[loc] = best;
            idx[loc] = int(g);
          }
        }
        as.num_assigned += idx[loc] >= 0;
      }
    as.gt_index.push_back(std::move(idx));
    as.best_iou.push_back(std::move(iou));
  }
  return as;
}

std::vector<AssignedLocation> list_assigned(const std::vector<AnchorSet>& levels,
                                            const Assignment& as) {
  std::vector<AssignedLocation> out;
  for (std::size_t s = 0; s < levels.size(); ++s) {
    const auto& lvl = levels[s];
    for (int loc = 0; loc < lvl.locations(); ++loc) {
      const int g = as.gt_index[s][loc];
      if (g < 0) continue;
      const int y = loc / lvl.feat_w, x = loc % lvl.feat_w;
      out.push_back({lvl.loc_u(x), lvl.loc_v(y), lvl.stride, int(s), loc, g});
    }
  }
  return out;
}

BoxEncoding encode_box(const Box3D& box, double loc_u, double loc_v, int stride,
                       const CameraIntrinsics& k, const std::vector<ClassPrior>& priors) {
  if (box.center[2] <= 0) throw std::invalid_argument("encode_box: center z must be > 0");
  box.validate();
  const ClassPrior& p = priors.at(box.class_id);
  const PixelDepth c = project(box.center, k);
  BoxEncoding e;
  e.du = (c.u - loc_u) / stride;
  e.dv = (c.v - loc_v) / stride;
  e.raw_depth = softplus_inv_scalar(box.center[2] * kFRef / k.fx);
  e.log_size = {std::log(box.w / p.w), std::log(box.l / p.l), std::log(box.h / p.h)};
  e.yaw_sin = std::sin(box.yaw);
  e.yaw_cos = std::cos(box.yaw);
  return e;
}

Box3D decode_box(const BoxEncoding& enc, int class_id, double loc_u, double loc_v,
                 int stride, const CameraIntrinsics& k,
                 const std::vector<ClassPrior>& priors) {
  const ClassPrior& p = priors.at(class_id);
  const double z = rescale_depth_scalar(enc.raw_depth, k.fx, kFRef);
  const double u = loc_u + enc.du * stride, v = loc_v + enc.dv * stride;
  Box3D b;
  b.center = unproject(u, v, z, k);
  b.w = p.w * std::exp(enc.log_size[0]);
  b.l = p.l * std::exp(enc.log_size[1]);
  b.h = p.h * std::exp(enc.log_size[2]);
  const double n = std::hypot(enc.yaw_sin, enc.yaw_cos);
  b.yaw = n > 1e-12 ? std::atan2(enc.yaw_sin / n, enc.yaw_cos / n) : 0.0;
  b.class_id = class_id;
  return b;
}

namespace {
double corner_l1(const std::array<Vec3, 8>& a, const std::array<Vec3, 8>& b) {
  double acc = 0;
  for (int i = 0; i < 8; ++i)
    for (int d = 0; d < 3; ++d) acc += std::abs(a[i][d] - b[i][d]);
  return acc / 8.0;
}
}  // namespace

BoxLossParts disentangled_box_loss(const BoxEncoding& pred, const Box3D& gt,
                                   double loc_u, double loc_v, int stride,
                                   const CameraIntrinsics& k,
                                   const std::vector<ClassPrior>& priors) {
  const Box3D full = decode_box(pred, gt.class_id, loc_u, loc_v, stride, k, priors);
  const auto gt_corners = box_corners(gt);
  BoxLossParts out;

  Box3D hybrid = gt;  // orientation
  hybrid.yaw = full.yaw;
  out.orientation = corner_l1(box_corners(hybrid), gt_corners);

  hybrid = gt;  // projected center at gt depth
  const double u = loc_u + pred.du * stride, v = loc_v + pred.dv * stride;
  hybrid.center = unproject(u, v, gt.center[2], k);
  out.center = corner_l1(box_corners(hybrid), gt_corners);

  hybrid = gt;  // depth only: pure z substitution -> |dz|
  hybrid.center[2] = full.center[2];
  out.depth = corner_l1(box_corners(hybrid), gt_corners);

  hybrid = gt;  // size
  hybrid.w = full.w;
  hybrid.l = full.l;
  hybrid.h = full.h;
  out.size = corner_l1(box_corners(hybrid), gt_corners);
  return out;
}

std::vector<Box3D> nms_keypoint_aabb(const std::vector<Box3D>& dets,
                                     const CameraIntrinsics& k, double iou_thr,
                                     double score_thr) {
  struct Cand {
    const Box3D* box;
    AABB2D aabb;
    std::size_t id;
  };
  std::vector<Cand> cands;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (dets[i].score < score_thr) continue;
    try {
      cands.push_back({&dets[i], projected_keypoint_aabb(dets[i], k), i});
    } catch (const std::domain_error&) {
      // near-plane clipping: no valid 2D footprint, drop
    }
  }
  std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.box->score != b.box->score) return a.box->score > b.box->score;
    return a.id < b.id;  // deterministic tie-break
  });
  std::vector<Box3D> out;
  std::vector<AABB2D> kept_aabb;
  std::vector<int> kept_class;
  for (const auto& c : cands) {
    bool suppressed = false;
    for (std::size_t j = 0; j < out.size(); ++j)
      if (kept_class[j] == c.box->class_id && iou_aabb(kept_aabb[j], c.aabb) > iou_thr) {
        suppressed = true;
        break;
      }
    if (suppressed) continue;
    out.push_back(*c.box);
    kept_aabb.push_back(c.aabb);
    kept_class.push_back(c.box->class_id);
  }
  return out;
}

std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::kDetOnly: return "det_only";
    case TrainMode::kLidar: return "lidar";
    case TrainMode::kSelfsupSingleStage: return "selfsup_single_stage";
    case TrainMode::kPseudoTwoStage: return "pseudo_two_stage";
  }
  throw std::invalid_argument("unknown train mode");
}

TrainMode train_mode_from_string(const std::string& s) {
  if (s == "det_only") return TrainMode::kDetOnly;
  if (s == "lidar") return TrainMode::kLidar;
  if (s == "selfsup_single_stage") return TrainMode::kSelfsupSingleStage;
  if (s == "pseudo_two_stage") return TrainMode::kPseudoTwoStage;
  throw std::invalid_argument("unknown train mode: " + s);
}

SupervisionBank build_supervision(const std::vector<Sequence>& data, TrainMode mode,
                                  const DetTrainConfig& cfg,
                                  const CameraIntrinsics& k,
                                  const std::string& pseudo_root) {
  SupervisionBank bank;
  // first pass: count frames so depth_storage never reallocates
  std::size_t total = 0;
  for (const auto& seq : data) total += seq.frames.size();
  bank.depth_storage.reserve(total);

  for (std::size_t s = 0; s < data.size(); ++s) {
    const Sequence& seq = data[s];
    for (std::size_t f = 0; f < seq.frames.size(); ++f) {
      FrameSupervision sup;
      sup.frame = &seq.frames[f];
      if (mode == TrainMode::kLidar) {
        if (seq.clouds.size() != seq.frames.size())
          throw std::invalid_argument("build_supervision: lidar mode needs point clouds");
        bank.depth_storage.push_back(pointcloud_to_depthmap(
            seq.clouds[f], seq.frames[f].cam_from_world, k, k.height, k.width));
        const DepthMap& d = bank.depth_storage.back();
        sup.depth_target = &d;
        sup.depth_mask =
            cfg.ignore_close ? ignore_close_mask(d, cfg.ignore_close_dist) : d.valid;
      } else if (mode == TrainMode::kPseudoTwoStage) {
        if (pseudo_root.empty())
          throw std::invalid_argument("build_supervision: two-stage mode needs pseudo_root");
        bank.depth_storage.push_back(
            read_pseudo_label(pseudo_root, int(s), seq.frames[f].index));
        const DepthMap& d = bank.depth_storage.back();
        sup.depth_target = &d;
        sup.depth_mask =
            cfg.ignore_close ? ignore_close_mask(d, cfg.ignore_close_dist) : d.valid;
      } else if (mode == TrainMode::kSelfsupSingleStage) {
        for (int off : cfg.photo.context_offsets) {
          const long j = long(f) + off;
          if (j < 0 || j >= long(seq.frames.size())) continue;
          sup.contexts.push_back(&seq.frames[j].image);
          sup.poses_t_to_s.push_back(
              seq.frames[j].cam_from_world.compose(seq.frames[f].cam_from_world.inverse()));
        }
        if (sup.contexts.empty()) continue;  // isolated frame, unusable
      }
      bank.samples.push_back(std::move(sup));
    }
  }
  return bank;
}

// ---- persistence ----

namespace {

json intrinsics_to_json(const CameraIntrinsics& k) {
  return {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy},
          {"width", k.width}, {"height", k.height}};
}

CameraIntrinsics intrinsics_from_json(const json& j) {
  return CameraIntrinsics(j.at("fx"), j.at("fy"), j.at("cx"), j.at("cy"),
                          j.at("width"), j.at("height"));
}

json config_to_json(const DetectorConfig& c) {
  json pri = json::array();
  for (const auto& p : c.priors())
    pri.push_back({{"name", p.name}, {"w", p.w}, {"l", p.l}, {"h", p.h},
                   {"size_jitter", p.size_jitter}});
  return {{"strides", c.strides},   {"scales", c.scales},
          {"ratios", c.ratios},     {"anchor_base", c.anchor_base},
          {"tau", c.tau},           {"head_layers", c.head_layers},
          {"channels", c.channels}, {"num_classes", c.num_classes},
          {"nms_iou_thr", c.nms_iou_thr}, {"nms_score_thr", c.nms_score_thr},
          {"size_priors", pri}};
}

DetectorConfig config_from_json(const json& j) {
  DetectorConfig c;
  c.strides = j.at("strides").get<std::vector<int>>();
  c.scales = j.at("scales").get<std::vector<double>>();
  c.ratios = j.at("ratios").get<std::vector<double>>();
  c.anchor_base = j.at("anchor_base");
  c.tau = j.at("tau");
  c.head_layers = j.at("head_layers");
  c.channels = j.at("channels");
  c.num_classes = j.at("num_classes");
  c.nms_iou_thr = j.at("nms_iou_thr");
  c.nms_score_thr = j.at("nms_score_thr");
  c.size_priors.clear();
  for (const auto& p : j.at("size_priors"))
    c.size_priors.push_back({p.at("name"), p.at("w"), p.at("l"), p.at("h"),
                             p.at("size_jitter")});
  return c;
}

}  // namespace

template <class T>
void save_checkpoint(const DetectorNet<T>& net, int step, const std::string& path) {
  json j;
  j["format"] = "mono3d-checkpoint-v1";
  j["step"] = step;
  j["config"] = config_to_json(net.cfg);
  j["intrinsics"] = intrinsics_to_json(net.intrinsics);
  json params = json::object();
  for (std::size_t i = 0; i < net.params.params.size(); ++i) {
    const auto& p = net.params.params[i];
    params[net.params.names[i]] = {{"shape", p->val.shape},
                                   {"data", std::vector<double>(p->val.v.begin(), p->val.v.end())}};
  }
  j["params"] = std::move(params);
  std::filesystem::create_directories(std::filesystem::path(path).parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_checkpoint: cannot write " + path);
  out << j.dump();
}

template <class T>
DetectorNet<T> load_checkpoint(const std::string& path, CheckpointInfo* info) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  json j = json::parse(in);
  if (j.value("format", "") != "mono3d-checkpoint-v1")
    throw std::runtime_error("load_checkpoint: unrecognized format in " + path);
  DetectorConfig cfg = config_from_json(j.at("config"));
  CameraIntrinsics k = intrinsics_from_json(j.at("intrinsics"));
  DetectorNet<T> net(cfg, k, 0);
  const json& params = j.at("params");
  for (std::size_t i = 0; i < net.params.params.size(); ++i) {
    const std::string& name = net.params.names[i];
    if (!params.contains(name))
      throw std::runtime_error("load_checkpoint: missing parameter " + name);
    const json& pj = params.at(name);
    auto shape = pj.at("shape").get<std::vector<int>>();
    if (shape != net.params.params[i]->val.shape)
      throw std::runtime_error("load_checkpoint: shape mismatch for " + name);
    const auto data = pj.at("data").get<std::vector<double>>();
    auto& dst = net.params.params[i]->val.v;
    if (data.size() != dst.size())
      throw std::runtime_error("load_checkpoint: size mismatch for " + name);
    for (std::size_t n = 0; n < data.size(); ++n) dst[n] = static_cast<T>(data[n]);
  }
  if (info) {
    info->cfg = cfg;
    info->intrinsics = k;
    info->step = j.at("step");
  }
  return net;
}

template void save_checkpoint<float>(const DetectorNet<float>&, int, const std::string&);
template void save_checkpoint<double>(const DetectorNet<double>&, int, const std::string&);
template DetectorNet<float> load_checkpoint<float>(const std::string&, CheckpointInfo*);
template DetectorNet<double> load_checkpoint<double>(const std::string&, CheckpointInfo*);

namespace {
json box_to_json(const Box3D& b) {
  return {{"center", {b.center[0], b.center[1], b.center[2]}},
          {"w", b.w}, {"l", b.l}, {"h", b.h}, {"yaw", b.yaw},
          {"class_id", b.class_id}, {"score", b.score}};
}

Box3D box_from_json(const json& j) {
  Box3D b;
  b.center = {j.at("center")[0], j.at("center")[1], j.at("center")[2]};
  b.w = j.at("w");
  b.l = j.at("l");
  b.h = j.at("h");
  b.yaw = j.at("yaw");
  b.class_id = j.at("class_id");
  b.score = j.at("score");
  return b;
}
}  // namespace

void write_detections_json(const std::string& path,
                           const std::vector<std::vector<Box3D>>& per_frame) {
  json j = json::array();
  for (const auto& frame : per_frame) {
    json f = json::array();
    for (const auto& b : frame) f.push_back(box_to_json(b));
    j.push_back(std::move(f));
  }
  std::filesystem::create_directories(std::filesystem::path(path).parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_detections_json: cannot write " + path);
  out << j.dump();
}

std::vector<std::vector<Box3D>> read_detections_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_detections_json: cannot open " + path);
  json j = json::parse(in);
  std::vector<std::vector<Box3D>> out;
  for (const auto& frame : j) {
    std::vector<Box3D> boxes;
    for (const auto& b : frame) boxes.push_back(box_from_json(b));
    out.push_back(std::move(boxes));
  }
  return out;
}

}  // namespace mono3d
