#pragma once

#include <optional>

#include "mono3d/depthsup.hpp"
#include "mono3d/nn.hpp"
#include "mono3d/selfsup.hpp"

// Multi-task monocular 3D detector: anchor-overlap assignment, box
// encode/decode, disentangled corner loss, focal classification, keypoint-AABB
// NMS, a small FPN network with an independent dense depth head, and the
// training loop for all four supervision regimes.

namespace mono3d {

// ---- anchors & assignment ----

struct DetectorConfig {
  std::vector<int> strides = {8, 16, 32};
  std::vector<double> scales = {1.0, 1.26, 1.59};  // side = stride * anchor_base * scale
  std::vector<double> ratios = {0.5, 1.0, 2.0};    // width / height
  double anchor_base = 4.0;
  double tau = 0.5;
  int head_layers = 4;
  int channels = 32;
  int num_classes = 3;
  double nms_iou_thr = 0.75;
  double nms_score_thr = 0.05;
  std::vector<ClassPrior> size_priors;  // per class; defaults to WorldConfig classes

  void validate() const;
  const std::vector<ClassPrior>& priors() const;
};

struct AnchorSet {
  int stride = 0;
  int feat_h = 0, feat_w = 0;
  struct Shape {
    double w, h;
  };
  std::vector<Shape> shapes;  // per location, |scales| * |ratios|

  double loc_u(int x) const { return (x + 0.5) * stride; }
  double loc_v(int y) const { return (y + 0.5) * stride; }
  AABB2D anchor_at(int y, int x, int a) const {
    const double cu = loc_u(x), cv = loc_v(y);
    return {cu - shapes[a].w / 2, cv - shapes[a].h / 2,
            cu + shapes[a].w / 2, cv + shapes[a].h / 2};
  }
  int locations() const { return feat_h * feat_w; }
};

std::vector<AnchorSet> build_anchor_sets(const DetectorConfig& cfg, int image_h,
                                         int image_w);

struct Assignment {
  // per level, flat location -> ground-truth index or -1
  std::vector<std::vector<int>> gt_index;
  std::vector<std::vector<double>> best_iou;  // IoU of the matching anchor
  long num_assigned = 0;
};

Assignment assign_instances(const std::vector<AnchorSet>& levels,
                            const std::vector<AABB2D>& gt_boxes, double tau);

// ---- box encoding ----

struct BoxEncoding {
  double du = 0, dv = 0;           // projected-center offset, stride units
  double raw_depth = 0;            // pre-rescale (softplus domain)
  std::array<double, 3> log_size{};  // ln(size / prior), order (w, l, h)
  double yaw_sin = 0, yaw_cos = 1;
};

BoxEncoding encode_box(const Box3D& box, double loc_u, double loc_v, int stride,
                       const CameraIntrinsics& k, const std::vector<ClassPrior>& priors);

Box3D decode_box(const BoxEncoding& enc, int class_id, double loc_u, double loc_v,
                 int stride, const CameraIntrinsics& k,
                 const std::vector<ClassPrior>& priors);

// Per-component disentangled corner losses (reference, double precision).
struct BoxLossParts {
  double orientation = 0, center = 0, depth = 0, size = 0;
  double sum() const { return orientation + center + depth + size; }
};

BoxLossParts disentangled_box_loss(const BoxEncoding& pred, const Box3D& gt,
                                   double loc_u, double loc_v, int stride,
                                   const CameraIntrinsics& k,
                                   const std::vector<ClassPrior>& priors);

// ---- NMS ----

// Greedy class-wise NMS on projected keypoint AABBs. Detections whose AABB is
// undefined (box clipping the near plane) are dropped.
std::vector<Box3D> nms_keypoint_aabb(const std::vector<Box3D>& dets,
                                     const CameraIntrinsics& k, double iou_thr,
                                     double score_thr);

// ---- losses (autodiff) ----

// enc rows: du, dv, raw_depth, log_w, log_l, log_h, yaw_sin, yaw_cos
constexpr int kBoxChannels = 8;

struct AssignedLocation {
  double loc_u, loc_v;
  int stride;
  int level;
  int flat;  // flat spatial index within the level
  int gt;    // index into the frame's gt boxes
};

std::vector<AssignedLocation> list_assigned(const std::vector<AnchorSet>& levels,
                                            const Assignment& as);

template <class T>
struct BoxLossTerms {
  Var<T> orientation, center, depth, size;
  Var<T> sum() const { return add(add(orientation, center), add(depth, size)); }
};

namespace detail {
template <class T>
Tensor<T> vec_tensor(const std::vector<double>& v) {
  Tensor<T> t({static_cast<int>(v.size())});
  for (std::size_t i = 0; i < v.size(); ++i) t.v[i] = static_cast<T>(v[i]);
  return t;
}
}  // namespace detail

// Vectorized Eq.-3 loss over N assigned locations. `enc` is [8, N] gathered
// from the box head; each component substitutes only its own prediction into
// a ground-truth box and measures mean corner L1 distance (per corner:
// |dx|+|dy|+|dz|, averaged over the 8 corners and the N locations).
template <class T>
BoxLossTerms<T> disentangled_box_loss_batch(const Var<T>& enc,
                                            const std::vector<Box3D>& gts,
                                            const std::vector<AssignedLocation>& locs,
                                            const CameraIntrinsics& k,
                                            const std::vector<ClassPrior>& priors) {
  const int n = enc->val.dim(1);
  if (static_cast<int>(locs.size()) != n)
    throw std::invalid_argument("disentangled_box_loss_batch: location count mismatch");

  auto du = row(enc, 0), dv = row(enc, 1), raw = row(enc, 2);
  auto lw = row(enc, 3), ll = row(enc, 4), lh = row(enc, 5);
  auto esin = row(enc, 6), ecos = row(enc, 7);

  // per-location ground-truth constants
  std::vector<double> gz(n), gcx(n), gcy(n), gyaw_s(n), gyaw_c(n);
  std::vector<double> pw(n), pl(n), ph(n), gw(n), gl(n), gh(n);
  std::vector<double> au(n), av(n), strides(n), fxratio(n);
  std::array<std::vector<double>, 8> cx, cy, cz;  // gt corners
  for (auto& v : cx) v.resize(n);
  for (auto& v : cy) v.resize(n);
  for (auto& v : cz) v.resize(n);
  for (int i = 0; i < n; ++i) {
    const Box3D& g = gts[locs[i].gt];
    if (g.center[2] <= 0)
      throw std::invalid_argument("disentangled_box_loss_batch: gt depth must be > 0");
    gz[i] = g.center[2];
    gcx[i] = g.center[0];
    gcy[i] = g.center[1];
    gyaw_s[i] = std::sin(g.yaw);
    gyaw_c[i] = std::cos(g.yaw);
    const ClassPrior& p = priors.at(g.class_id);
    pw[i] = p.w;
    pl[i] = p.l;
    ph[i] = p.h;
    gw[i] = g.w;
    gl[i] = g.l;
    gh[i] = g.h;
    au[i] = locs[i].loc_u;
    av[i] = locs[i].loc_v;
    strides[i] = locs[i].stride;
    fxratio[i] = k.fx / kFRef;
    const auto corners = box_corners(g);
    for (int c = 0; c < 8; ++c) {
      cx[c][i] = corners[c][0];
      cy[c][i] = corners[c][1];
      cz[c][i] = corners[c][2];
    }
  }
  using detail::vec_tensor;
  auto C = [&](const std::vector<double>& v) { return constant(vec_tensor<T>(v)); };
  Tensor<T> mean_w({n}, T(1) / T(8 * n));  // corner+location mean

  // --- depth: |softplus(raw) * fx / f_ref - z_gt| ---
  auto z_pred = mul(softplus(raw), C(fxratio));
  auto depth_term = weighted_sum(abs_(sub(z_pred, C(gz))),
                                 Tensor<T>({n}, T(1) / T(n)));

  // --- orientation: gt box, predicted yaw ---
  auto norm = sqrt_(add_const(add(square(esin), square(ecos)), T(1e-12)));
  auto sn = divv(esin, norm), cn = divv(ecos, norm);
  Var<T> orient_acc;
  for (int c = 0; c < 8; ++c) {
    const double lxs = (c & 1 ? 0.5 : -0.5), lzs = (c & 4 ? 0.5 : -0.5);
    std::vector<double> lx(n), lz(n);
    for (int i = 0; i < n; ++i) {
      lx[i] = lxs * gw[i];
      lz[i] = lzs * gl[i];
    }
    auto hx = add(C(gcx), add(mul(cn, C(lx)), mul(sn, C(lz))));
    auto hz = add(C(gz), sub(mul(cn, C(lz)), mul(sn, C(lx))));
    auto term = add(weighted_sum(abs_(sub(hx, C(cx[c]))), mean_w),
                    weighted_sum(abs_(sub(hz, C(cz[c]))), mean_w));
    orient_acc = c == 0 ? term : add(orient_acc, term);
  }

  // --- projected center: predicted (u,v) at gt depth; constant across corners ---
  std::vector<double> ux_scale(n), uy_scale(n), ux_off(n), uy_off(n);
  for (int i = 0; i < n; ++i) {
    // x = (loc_u + du*stride - cx)/fx * z_gt  (linear in du)
    ux_scale[i] = strides[i] / k.fx * gz[i];
    ux_off[i] = (au[i] - k.cx) / k.fx * gz[i];
    uy_scale[i] = strides[i] / k.fy * gz[i];
    uy_off[i] = (av[i] - k.cy) / k.fy * gz[i];
  }
  auto hcx = add(mul(du, C(ux_scale)), C(ux_off));
  auto hcy = add(mul(dv, C(uy_scale)), C(uy_off));
  auto center_term = add(weighted_sum(abs_(sub(hcx, C(gcx))), Tensor<T>({n}, T(1) / T(n))),
                         weighted_sum(abs_(sub(hcy, C(gcy))), Tensor<T>({n}, T(1) / T(n))));

  // --- size: gt center/yaw, predicted size ---
  auto sw = mul(exp_(lw), C(pw));
  auto sl = mul(exp_(ll), C(pl));
  auto sh = mul(exp_(lh), C(ph));
  Var<T> size_acc;
  for (int c = 0; c < 8; ++c) {
    const double sx = (c & 1 ? 0.5 : -0.5), sy = (c & 2 ? 0.5 : -0.5),
                 sz = (c & 4 ? 0.5 : -0.5);
    std::vector<double> rc(n), rs(n);
    for (int i = 0; i < n; ++i) {
      rc[i] = gyaw_c[i];
      rs[i] = gyaw_s[i];
    }
    auto lxv = scale(sw, T(sx)), lyv = scale(sh, T(sy)), lzv = scale(sl, T(sz));
    auto hx = add(C(gcx), add(mul(C(rc), lxv), mul(C(rs), lzv)));
    auto hy = add(C(gcy), lyv);
    auto hz = add(C(gz), sub(mul(C(rc), lzv), mul(C(rs), lxv)));
    auto term = add(add(weighted_sum(abs_(sub(hx, C(cx[c]))), mean_w),
                        weighted_sum(abs_(sub(hy, C(cy[c]))), mean_w)),
                    weighted_sum(abs_(sub(hz, C(cz[c]))), mean_w));
    size_acc = c == 0 ? term : add(size_acc, term);
  }

  return {orient_acc, center_term, depth_term, size_acc};
}

// Focal loss (gamma = 2, alpha = 0.25) over every location and class of every
// level, normalized by max(1, positives).
template <class T>
Var<T> classification_loss(const std::vector<Var<T>>& cls_logits,
                           const std::vector<AnchorSet>& levels,
                           const Assignment& as, const std::vector<Box3D>& gts,
                           int num_classes) {
  if (cls_logits.size() != levels.size())
    throw std::invalid_argument("classification_loss: level count mismatch");
  long n_pos = 0;
  for (const auto& lvl : as.gt_index)
    for (int g : lvl) n_pos += g >= 0;
  const T norm = T(1) / T(std::max<long>(1, n_pos));
  const T alpha = T(0.25);

  Var<T> total;
  for (std::size_t s = 0; s < levels.size(); ++s) {
    const auto& x = cls_logits[s];
    const int h = x->val.dim(1), w = x->val.dim(2);
    Tensor<T> w_pos(x->val.shape, T(0)), w_neg(x->val.shape, (T(1) - alpha) * norm);
    for (int loc = 0; loc < h * w; ++loc) {
      const int g = as.gt_index[s][loc];
      if (g < 0) continue;
      const int cls = gts[g].class_id;
      if (cls < 0 || cls >= num_classes)
        throw std::invalid_argument("classification_loss: class id out of range");
      const std::size_t i = std::size_t(cls) * h * w + loc;
      w_pos.v[i] = alpha * norm;
      w_neg.v[i] = T(0);
    }
    auto p = sigmoid(x);
    auto pos = mul(square(add_const(neg(p), T(1))), softplus(neg(x)));
    auto negl = mul(square(p), softplus(x));
    auto lvl_loss = add(weighted_sum(pos, w_pos), weighted_sum(negl, w_neg));
    total = s == 0 ? lvl_loss : add(total, lvl_loss);
  }
  return total;
}

// ---- network ----

template <class T>
struct DetectorNet {
  DetectorConfig cfg;
  CameraIntrinsics intrinsics;  // configured input size / projection
  ParamStore<T> params;
  ConvLayer<T> c1, c2, c3, c4, c5;
  ConvLayer<T> lat3, lat4, lat5;
  std::vector<ConvLayer<T>> cls_tower, box_tower, depth_tower;
  ConvLayer<T> cls_out, box_out, depth_out;
  std::vector<std::size_t> depth_param_ids;  // indices into params of the depth head

  DetectorNet() = default;
  DetectorNet(const DetectorConfig& c, const CameraIntrinsics& k, uint64_t seed)
      : cfg(c), intrinsics(k) {
    cfg.validate();
    if (k.height % 32 != 0 || k.width % 32 != 0)
      throw std::invalid_argument("detector: image size must be divisible by 32");
    std::mt19937_64 rng(seed);
    const int ch = cfg.channels;
    c1 = ConvLayer<T>(params, "c1", 3, 16, 3, 2, rng);
    c2 = ConvLayer<T>(params, "c2", 16, 32, 3, 2, rng);
    c3 = ConvLayer<T>(params, "c3", 32, ch, 3, 2, rng);
    c4 = ConvLayer<T>(params, "c4", ch, ch, 3, 2, rng);
    c5 = ConvLayer<T>(params, "c5", ch, ch, 3, 2, rng);
    lat3 = ConvLayer<T>(params, "lat3", ch, ch, 1, 1, rng);
    lat4 = ConvLayer<T>(params, "lat4", ch, ch, 1, 1, rng);
    lat5 = ConvLayer<T>(params, "lat5", ch, ch, 1, 1, rng);
    for (int i = 0; i < cfg.head_layers; ++i) {
      cls_tower.push_back(ConvLayer<T>(params, "cls_t" + std::to_string(i), ch, ch, 3, 1, rng));
      box_tower.push_back(ConvLayer<T>(params, "box_t" + std::to_string(i), ch, ch, 3, 1, rng));
    }
    cls_out = ConvLayer<T>(params, "cls_out", ch, cfg.num_classes, 3, 1, rng);
    box_out = ConvLayer<T>(params, "box_out", ch, kBoxChannels, 3, 1, rng);
    const std::size_t depth_begin = params.params.size();
    for (int i = 0; i < cfg.head_layers; ++i)
      depth_tower.push_back(ConvLayer<T>(params, "dep_t" + std::to_string(i), ch, ch, 3, 1, rng));
    depth_out = ConvLayer<T>(params, "dep_out", ch, 1, 3, 1, rng);
    for (std::size_t i = depth_begin; i < params.params.size(); ++i)
      depth_param_ids.push_back(i);
    // bias the classification output towards background so early training is
    // not swamped by negatives
    cls_out.b->val = Tensor<T>({cfg.num_classes}, T(-3.0));
  }

  struct Output {
    std::vector<Var<T>> cls;  // per level [K, h, w]
    std::vector<Var<T>> box;  // per level [8, h, w]
    Var<T> depth;             // [1, H, W] metric depth, only if requested
  };

  Output forward(const Image& img, bool with_depth) const {
    if (img.dim(1) != intrinsics.height || img.dim(2) != intrinsics.width)
      throw std::invalid_argument("detector forward: image size mismatch");
    auto x = constant(img.cast<T>());
    auto f1 = leaky_relu(c1(x));
    auto f2 = leaky_relu(c2(f1));
    auto f3 = leaky_relu(c3(f2));  // stride 8
    auto f4 = leaky_relu(c4(f3));  // stride 16
    auto f5 = leaky_relu(c5(f4));  // stride 32
    auto p5 = lat5(f5);
    auto p4 = add(lat4(f4), upsample_nearest2x(p5));
    auto p3 = add(lat3(f3), upsample_nearest2x(p4));

    Output out;
    for (auto& p : {p3, p4, p5}) {
      auto tc = p;
      for (const auto& l : cls_tower) tc = leaky_relu(l(tc));
      out.cls.push_back(cls_out(tc));
      auto tb = p;
      for (const auto& l : box_tower) tb = leaky_relu(l(tb));
      out.box.push_back(box_out(tb));
    }
    if (with_depth) {
      auto td = p3;
      for (const auto& l : depth_tower) td = leaky_relu(l(td));
      auto raw = upsample_bilinear(depth_out(td), intrinsics.height, intrinsics.width);
      out.depth = rescale_depth(raw, T(intrinsics.fx), T(kFRef));
    }
    return out;
  }
};

// ---- inference ----

template <class T>
std::vector<Box3D> decode_raw(const typename DetectorNet<T>::Output& out,
                              const std::vector<AnchorSet>& levels,
                              const DetectorConfig& cfg, const CameraIntrinsics& k,
                              double score_thr) {
  std::vector<Box3D> dets;
  for (std::size_t s = 0; s < levels.size(); ++s) {
    const auto& lvl = levels[s];
    const auto& cls = out.cls[s]->val;
    const auto& box = out.box[s]->val;
    const int hw = lvl.feat_h * lvl.feat_w;
    for (int loc = 0; loc < hw; ++loc) {
      int best = 0;
      T best_logit = cls.v[loc];
      for (int c = 1; c < cfg.num_classes; ++c)
        if (cls.v[std::size_t(c) * hw + loc] > best_logit) {
          best_logit = cls.v[std::size_t(c) * hw + loc];
          best = c;
        }
      const double score = 1.0 / (1.0 + std::exp(-double(best_logit)));
      if (score < score_thr) continue;
      BoxEncoding enc;
      enc.du = box.v[0 * hw + loc];
      enc.dv = box.v[1 * hw + loc];
      enc.raw_depth = box.v[2 * hw + loc];
      enc.log_size = {double(box.v[3 * hw + loc]), double(box.v[4 * hw + loc]),
                      double(box.v[5 * hw + loc])};
      enc.yaw_sin = box.v[6 * hw + loc];
      enc.yaw_cos = box.v[7 * hw + loc];
      const int y = loc / lvl.feat_w, x = loc % lvl.feat_w;
      Box3D b = decode_box(enc, best, lvl.loc_u(x), lvl.loc_v(y), lvl.stride, k,
                           cfg.priors());
      b.score = score;
      dets.push_back(b);
    }
  }
  return dets;
}

// Full test-time path: forward WITHOUT the depth head, decode, NMS.
template <class T>
std::vector<Box3D> infer(const DetectorNet<T>& net, const Image& img,
                         const std::vector<AnchorSet>& levels) {
  auto out = net.forward(img, /*with_depth=*/false);
  auto dets = decode_raw<T>(out, levels, net.cfg, net.intrinsics, net.cfg.nms_score_thr);
  return nms_keypoint_aabb(dets, net.intrinsics, net.cfg.nms_iou_thr,
                           net.cfg.nms_score_thr);
}

// ---- training ----

enum class TrainMode { kDetOnly, kLidar, kSelfsupSingleStage, kPseudoTwoStage };

std::string to_string(TrainMode m);
TrainMode train_mode_from_string(const std::string& s);

struct LossBreakdown {
  double cls = 0, box_orientation = 0, box_center = 0, box_depth = 0, box_size = 0;
  double depth = 0;  // unweighted depth-supervision term
  bool has_depth_term = false;
  double total = 0;
};

// Per-frame supervision bundle resolved by the trainer.
struct FrameSupervision {
  const Frame* frame = nullptr;
  const DepthMap* depth_target = nullptr;      // lidar or pseudo
  std::vector<uint8_t> depth_mask;             // valid (+ ignore-close) mask
  std::vector<const Image*> contexts;          // selfsup
  std::vector<Pose> poses_t_to_s;
};

struct DetTrainConfig {
  int steps = 1500;
  int batch = 2;
  double lr = 2e-3;
  double lr_decay = 0.1;
  std::vector<int> lr_decay_steps = {};  // default: single decay at 80%
  double lambda_depth = 0.45;
  bool ignore_close = false;  // masks lidar/pseudo depth targets
  // selfsup variant: drop pixels predicted nearer than ignore_close_dist
  // from the photometric loss
  bool ignore_close_photometric = false;
  double ignore_close_dist = kIgnoreCloseDefault;
  PhotometricConfig photo;
  uint64_t seed = 0;
};

struct TrainRecord {
  std::vector<double> total;
  std::vector<LossBreakdown> parts;  // sampled every record_every steps
};

// column concat of two [C, N] tensors (helper for multi-level gathers)
template <class T>
Var<T> concat_cols(const Var<T>& a, const Var<T>& b) {
  const int c = a->val.dim(0), na = a->val.dim(1), nb = b->val.dim(1);
  if (b->val.dim(0) != c) throw std::invalid_argument("concat_cols: channel mismatch");
  Tensor<T> out({c, na + nb});
  for (int ci = 0; ci < c; ++ci) {
    std::copy_n(a->val.v.begin() + std::size_t(ci) * na, na,
                out.v.begin() + std::size_t(ci) * (na + nb));
    std::copy_n(b->val.v.begin() + std::size_t(ci) * nb, nb,
                out.v.begin() + std::size_t(ci) * (na + nb) + na);
  }
  return make_op<T>(std::move(out), {a, b}, [a, b, c, na, nb](Node<T>& n) {
    for (int ci = 0; ci < c; ++ci)
      for (int j = 0; j < na + nb; ++j) {
        const T g = n.grad.v[std::size_t(ci) * (na + nb) + j];
        if (j < na)
          a->grad.v[std::size_t(ci) * na + j] += g;
        else
          b->grad.v[std::size_t(ci) * nb + (j - na)] += g;
      }
  });
}

// Builds the scalar loss for one frame. `levels` must match the net's input
// size. Throws if the mode's supervision is missing from `sup`.
template <class T>
Var<T> frame_loss(const DetectorNet<T>& net, const std::vector<AnchorSet>& levels,
                  const FrameSupervision& sup, TrainMode mode,
                  const DetTrainConfig& cfg, LossBreakdown* bd = nullptr) {
  const Frame& f = *sup.frame;
  const CameraIntrinsics& k = net.intrinsics;
  const bool with_depth = mode != TrainMode::kDetOnly;
  auto out = net.forward(f.image, with_depth);

  std::vector<AABB2D> gt2d;
  for (const Box3D& b : f.boxes) gt2d.push_back(projected_keypoint_aabb(b, k));
  auto as = assign_instances(levels, gt2d, net.cfg.tau);
  auto cls_loss = classification_loss(out.cls, levels, as, f.boxes, net.cfg.num_classes);

  Var<T> loss = cls_loss;
  BoxLossTerms<T> box_terms;
  auto locs = list_assigned(levels, as);
  if (!locs.empty()) {
    std::vector<std::vector<int>> idx_per_level(levels.size());
    for (const auto& l : locs) idx_per_level[l.level].push_back(l.flat);
    // gather per level, then concatenate columns in `locs` order
    std::vector<AssignedLocation> ordered;
    Var<T> enc;
    for (std::size_t s = 0; s < levels.size(); ++s) {
      if (idx_per_level[s].empty()) continue;
      auto g = gather_spatial(out.box[s], idx_per_level[s]);
      enc = enc ? concat_cols(enc, g) : g;
      for (const auto& l : locs)
        if (l.level == int(s)) ordered.push_back(l);
    }
    box_terms = disentangled_box_loss_batch(enc, f.boxes, ordered, k, net.cfg.priors());
    loss = add(loss, box_terms.sum());
  }

  Var<T> depth_loss;
  bool no_sup = false;
  if (mode == TrainMode::kLidar || mode == TrainMode::kPseudoTwoStage) {
    if (!sup.depth_target)
      throw std::invalid_argument("frame_loss: mode needs a depth target");
    Tensor<T> tgt({1, k.height, k.width});
    for (std::size_t i = 0; i < sup.depth_target->numel(); ++i)
      tgt.v[i] = static_cast<T>(sup.depth_target->values[i]);
    depth_loss = smooth_l1_depth_loss(out.depth, tgt, sup.depth_mask,
                                      T(kDepthLossBeta), &no_sup);
  } else if (mode == TrainMode::kSelfsupSingleStage) {
    if (sup.contexts.empty())
      throw std::invalid_argument("frame_loss: selfsup mode needs context frames");
    std::vector<Image> ctx;
    for (auto* c : sup.contexts) ctx.push_back(*c);
    std::vector<uint8_t> keep;
    if (cfg.ignore_close_photometric) {
      keep.resize(out.depth->val.numel());
      for (std::size_t i = 0; i < keep.size(); ++i)
        keep[i] = out.depth->val.v[i] >= T(cfg.ignore_close_dist);
    }
    auto [photo, map] = photometric_loss(f.image, ctx, out.depth, sup.poses_t_to_s,
                                         k, cfg.photo, nullptr,
                                         keep.empty() ? nullptr : &keep);
    depth_loss = photo;
  }
  if (depth_loss) loss = add(loss, scale(depth_loss, T(cfg.lambda_depth)));

  if (bd) {
    bd->cls = double(cls_loss->val.v[0]);
    if (!locs.empty()) {
      bd->box_orientation = double(box_terms.orientation->val.v[0]);
      bd->box_center = double(box_terms.center->val.v[0]);
      bd->box_depth = double(box_terms.depth->val.v[0]);
      bd->box_size = double(box_terms.size->val.v[0]);
    }
    bd->has_depth_term = bool(depth_loss);
    bd->depth = depth_loss ? double(depth_loss->val.v[0]) : 0.0;
    bd->total = double(loss->val.v[0]);
  }
  return loss;
}

// Resolves the supervision each frame of the dataset needs for `mode`.
// `pseudo_root` points at the dataset directory containing pseudo_depth/
// subfolders (only used in two-stage mode).
struct SupervisionBank {
  std::vector<FrameSupervision> samples;
  std::vector<DepthMap> depth_storage;  // owns lidar/pseudo maps
};

SupervisionBank build_supervision(const std::vector<Sequence>& data, TrainMode mode,
                                  const DetTrainConfig& cfg,
                                  const CameraIntrinsics& k,
                                  const std::string& pseudo_root = "");

template <class T>
std::pair<DetectorNet<T>, TrainRecord> train_detector(
    const std::vector<Sequence>& data, TrainMode mode, const DetectorConfig& dcfg,
    const DetTrainConfig& cfg, const std::string& pseudo_root = "") {
  if (data.empty() || data[0].frames.empty())
    throw std::invalid_argument("train_detector: empty dataset");
  const CameraIntrinsics& k = data[0].frames[0].intrinsics;
  DetectorNet<T> net(dcfg, k, cfg.seed);
  auto levels = build_anchor_sets(dcfg, k.height, k.width);
  auto bank = build_supervision(data, mode, cfg, k, pseudo_root);
  if (bank.samples.empty()) throw std::invalid_argument("train_detector: no usable frames");

  SGD<T> opt(T(cfg.lr));
  std::vector<int> decay = cfg.lr_decay_steps;
  if (decay.empty()) decay = {int(cfg.steps * 0.8)};
  std::mt19937_64 rng(cfg.seed ^ 0xdecafULL);
  std::uniform_int_distribution<std::size_t> pick(0, bank.samples.size() - 1);

  TrainRecord rec;
  std::vector<Tensor<T>> last_good;
  for (int step = 0; step < cfg.steps; ++step) {
    for (int d : decay)
      if (step == d) opt.lr *= T(cfg.lr_decay);
    net.params.zero_grad();
    double step_loss = 0;
    LossBreakdown bd_acc;
    for (int b = 0; b < cfg.batch; ++b) {
      LossBreakdown bd;
      auto loss = frame_loss(net, levels, bank.samples[pick(rng)], mode, cfg, &bd);
      backward(loss);
      step_loss += bd.total;
      bd_acc.cls += bd.cls / cfg.batch;
      bd_acc.box_orientation += bd.box_orientation / cfg.batch;
      bd_acc.box_center += bd.box_center / cfg.batch;
      bd_acc.box_depth += bd.box_depth / cfg.batch;
      bd_acc.box_size += bd.box_size / cfg.batch;
      bd_acc.depth += bd.depth / cfg.batch;
      bd_acc.has_depth_term |= bd.has_depth_term;
    }
    step_loss /= cfg.batch;
    if (!std::isfinite(step_loss)) {
      // restore the last finite parameter state before reporting
      if (!last_good.empty())
        for (std::size_t i = 0; i < net.params.params.size(); ++i)
          net.params.params[i]->val = last_good[i];
      throw std::runtime_error("train_detector: loss diverged (nan/inf) at step " +
                               std::to_string(step));
    }
    last_good.clear();
    for (auto& p : net.params.params) last_good.push_back(p->val);
    for (auto& p : net.params.params)
      for (auto& g : p->grad.v) g /= T(cfg.batch);
    opt.step(net.params);
    bd_acc.total = step_loss;
    rec.total.push_back(step_loss);
    rec.parts.push_back(bd_acc);
  }
  return {std::move(net), std::move(rec)};
}

// ---- persistence ----

// JSON checkpoint: config + named parameter tensors + trained-step count.
template <class T>
void save_checkpoint(const DetectorNet<T>& net, int step, const std::string& path);

struct CheckpointInfo {
  DetectorConfig cfg;
  CameraIntrinsics intrinsics;
  int step = 0;
};

// load_checkpoint is defined for float and double in detector.cpp
template <class T>
DetectorNet<T> load_checkpoint(const std::string& path, CheckpointInfo* info = nullptr);

void write_detections_json(const std::string& path,
                           const std::vector<std::vector<Box3D>>& per_frame);
std::vector<std::vector<Box3D>> read_detections_json(const std::string& path);

}  // namespace mono3d
