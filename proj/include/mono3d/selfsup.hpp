#pragma once

#include <random>

#include "mono3d/depthsup.hpp"
#include "mono3d/nn.hpp"

// Stage-I self-supervised depth: SSIM, differentiable inverse warping, the
// photometric loss, a small encoder-decoder depth network trained with
// ground-truth relative poses, and pseudo-label export.

namespace mono3d {

enum class ContextReduction { kMin, kMean };

struct PhotometricConfig {
  double alpha = 0.85;
  int ssim_window = 3;
  std::vector<int> context_offsets = {-1, 1};
  ContextReduction reduction = ContextReduction::kMin;

  void validate() const {
    if (alpha < 0 || alpha > 1) throw std::invalid_argument("photometric: alpha must be in [0,1]");
    if (ssim_window < 3 || ssim_window % 2 == 0)
      throw std::invalid_argument("photometric: ssim window must be odd and >= 3");
  }
};

// Standard SSIM with C1 = 0.01^2, C2 = 0.03^2, local stats over a square
// window, averaged over channels. Output [1,H,W] in [-1, 1].
template <class T>
Var<T> ssim_map(const Var<T>& a, const Var<T>& b, int window) {
  check_same_shape(a->val, b->val, "ssim_map");
  const T c1 = T(0.01 * 0.01), c2 = T(0.03 * 0.03);
  auto mu_a = box_mean(a, window);
  auto mu_b = box_mean(b, window);
  auto var_a = sub(box_mean(mul(a, a), window), mul(mu_a, mu_a));
  auto var_b = sub(box_mean(mul(b, b), window), mul(mu_b, mu_b));
  auto cov = sub(box_mean(mul(a, b), window), mul(mu_a, mu_b));
  auto num = mul(add_const(scale(mul(mu_a, mu_b), T(2)), c1),
                 add_const(scale(cov, T(2)), c2));
  auto den = mul(add_const(add(mul(mu_a, mu_a), mul(mu_b, mu_b)), c1),
                 add_const(add(var_a, var_b), c2));
  auto s = divv(num, den);
  // channel mean
  const int c = s->val.dim(0);
  auto out = slice_ch(s, 0, 1);
  for (int i = 1; i < c; ++i) out = add(out, slice_ch(s, i, i + 1));
  return scale(out, T(1) / T(c));
}

// Differentiable inverse warp: each target pixel is unprojected with depth_t,
// moved by pose_t_to_s and bilinearly sampled from the source image. The
// source is a constant; gradients flow to depth_t only.
// depth_t: [1,H,W] (positive). Returns the synthesized image [3,H,W] plus a
// validity mask (pixels landing inside the source).
template <class T>
std::pair<Var<T>, std::vector<uint8_t>> inverse_warp(const Image& source,
                                                     const Var<T>& depth_t,
                                                     const Pose& pose_t_to_s,
                                                     const CameraIntrinsics& k) {
  const int h = k.height, w = k.width;
  if (depth_t->val.dim(1) != h || depth_t->val.dim(2) != w)
    throw std::invalid_argument("inverse_warp: depth size mismatch");
  if (source.dim(1) != h || source.dim(2) != w)
    throw std::invalid_argument("inverse_warp: source size mismatch");

  struct PixelTap {
    T us, vs;          // source coordinates
    T dus_dd, dvs_dd;  // derivative of the source coords wrt depth
    uint8_t valid;
  };
  auto taps = std::make_shared<std::vector<PixelTap>>(std::size_t(h) * w);
  std::vector<uint8_t> mask(std::size_t(h) * w, 0);

  Tensor<T> out({3, h, w}, T(0));
  const auto& rot = pose_t_to_s.rotation;
  const auto& tr = pose_t_to_s.translation;

  auto sample = [&](int c, T us, T vs, T* gu, T* gv) -> T {
    const int x0 = static_cast<int>(std::floor(us)), y0 = static_cast<int>(std::floor(vs));
    const int x1 = x0 + 1, y1 = y0 + 1;
    const T fu = us - T(x0), fv = vs - T(y0);
    const T i00 = static_cast<T>(source.at(c, y0, x0));
    const T i01 = static_cast<T>(source.at(c, y0, x1));
    const T i10 = static_cast<T>(source.at(c, y1, x0));
    const T i11 = static_cast<T>(source.at(c, y1, x1));
    if (gu) *gu = (T(1) - fv) * (i01 - i00) + fv * (i11 - i10);
    if (gv) *gv = (T(1) - fu) * (i10 - i00) + fu * (i11 - i01);
    return (T(1) - fv) * ((T(1) - fu) * i00 + fu * i01) +
           fv * ((T(1) - fu) * i10 + fu * i11);
  };

  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t pix = std::size_t(y) * w + x;
      const T d = depth_t->val.at(0, y, x);
      // ray direction for this pixel; q(d) = d * r + t is linear in depth
      const double rx = (x - k.cx) / k.fx, ry = (y - k.cy) / k.fy;
      const double r0 = rot[0] * rx + rot[1] * ry + rot[2];
      const double r1 = rot[3] * rx + rot[4] * ry + rot[5];
      const double r2 = rot[6] * rx + rot[7] * ry + rot[8];
      const T qx = T(d * r0 + tr[0]), qy = T(d * r1 + tr[1]), qz = T(d * r2 + tr[2]);
      if (qz <= T(1e-6)) continue;
      const T us = T(k.fx) * qx / qz + T(k.cx);
      const T vs = T(k.fy) * qy / qz + T(k.cy);
      if (us < T(0) || us > T(w - 1) || vs < T(0) || vs > T(h - 1)) continue;
      // clamp so floor(x)+1 stays in range at the far edge
      const T use = std::min(us, T(w - 1) - T(1e-6));
      const T vse = std::min(vs, T(h - 1) - T(1e-6));
      const T inv_qz = T(1) / qz;
      PixelTap tap;
      tap.us = use;
      tap.vs = vse;
      tap.dus_dd = T(k.fx) * (T(r0) * qz - qx * T(r2)) * inv_qz * inv_qz;
      tap.dvs_dd = T(k.fy) * (T(r1) * qz - qy * T(r2)) * inv_qz * inv_qz;
      tap.valid = 1;
      (*taps)[pix] = tap;
      mask[pix] = 1;
      for (int c = 0; c < 3; ++c)
        out.v[std::size_t(c) * h * w + pix] = sample(c, use, vse, nullptr, nullptr);
    }

  auto node = make_op<T>(std::move(out), {depth_t},
                         [depth_t, taps, source, h, w, sample](Node<T>& n) {
    for (std::size_t pix = 0; pix < taps->size(); ++pix) {
      const PixelTap& tap = (*taps)[pix];
      if (!tap.valid) continue;
      T acc = T(0);
      for (int c = 0; c < 3; ++c) {
        T gu, gv;
        sample(c, tap.us, tap.vs, &gu, &gv);
        const T gy = n.grad.v[std::size_t(c) * h * w + pix];
        acc += gy * (gu * tap.dus_dd + gv * tap.dvs_dd);
      }
      depth_t->grad.v[pix] += acc;
    }
  });
  return {node, std::move(mask)};
}

struct PhotometricResult {
  // scalar loss (mean over pixels valid in at least one context)
  // and the reduced per-pixel map [1,H,W]
  long valid_pixels = 0;
};

// Eq: per context s, alpha * (1 - SSIM(I_t, warp_s)) / 2 + (1 - alpha) * L1,
// reduced over contexts (min or mean), averaged over pixels covered by at
// least one context. `keep` (optional, H*W) excludes pixels from the loss on
// top of the warp validity masks (e.g. near-field ignore masking).
template <class T>
std::pair<Var<T>, Var<T>> photometric_loss(const Image& target,
                                           const std::vector<Image>& contexts,
                                           const Var<T>& depth_t,
                                           const std::vector<Pose>& poses_t_to_s,
                                           const CameraIntrinsics& k,
                                           const PhotometricConfig& cfg,
                                           PhotometricResult* info = nullptr,
                                           const std::vector<uint8_t>* keep = nullptr) {
  cfg.validate();
  if (contexts.empty()) throw std::invalid_argument("photometric_loss: no context frames");
  if (contexts.size() != poses_t_to_s.size())
    throw std::invalid_argument("photometric_loss: contexts/poses mismatch");

  const int h = k.height, w = k.width;
  const std::size_t npix = std::size_t(h) * w;
  if (keep && keep->size() != npix)
    throw std::invalid_argument("photometric_loss: keep mask size mismatch");
  auto target_var = constant(target.cast<T>());

  constexpr T kInvalidPenalty = T(1e3);
  Var<T> reduced;
  std::vector<uint8_t> any_valid(npix, 0);
  std::vector<std::vector<uint8_t>> masks;
  std::vector<Var<T>> maps;

  for (std::size_t s = 0; s < contexts.size(); ++s) {
    auto [synth, mask] = inverse_warp(contexts[s], depth_t, poses_t_to_s[s], k);
    if (keep)
      for (std::size_t i = 0; i < npix; ++i) mask[i] &= (*keep)[i];
    auto ssim = ssim_map(target_var, synth, cfg.ssim_window);
    auto dssim = scale(add_const(neg(ssim), T(1)), T(0.5));
    // channel-mean L1
    auto diff = abs_(sub(target_var, synth));
    auto l1 = scale(add(add(slice_ch(diff, 0, 1), slice_ch(diff, 1, 2)),
                        slice_ch(diff, 2, 3)), T(1) / T(3));
    auto map = add(scale(dssim, T(cfg.alpha)), scale(l1, T(1) - T(cfg.alpha)));
    for (std::size_t i = 0; i < npix; ++i) any_valid[i] |= mask[i];
    masks.push_back(std::move(mask));
    maps.push_back(std::move(map));
  }

  if (cfg.reduction == ContextReduction::kMin) {
    for (std::size_t s = 0; s < maps.size(); ++s) {
      // push invalid pixels out of the min
      Tensor<T> keep({1, h, w}, T(0)), penalty({1, h, w}, T(0));
      for (std::size_t i = 0; i < npix; ++i) {
        keep.v[i] = masks[s][i] ? T(1) : T(0);
        penalty.v[i] = masks[s][i] ? T(0) : kInvalidPenalty;
      }
      auto masked = add(mul(maps[s], constant(keep)), constant(penalty));
      reduced = s == 0 ? masked : vmin(reduced, masked);
    }
  } else {
    Tensor<T> counts({1, h, w}, T(0));
    for (std::size_t s = 0; s < maps.size(); ++s)
      for (std::size_t i = 0; i < npix; ++i) counts.v[i] += masks[s][i] ? T(1) : T(0);
    for (std::size_t s = 0; s < maps.size(); ++s) {
      Tensor<T> wgt({1, h, w}, T(0));
      for (std::size_t i = 0; i < npix; ++i)
        if (masks[s][i]) wgt.v[i] = T(1) / counts.v[i];
      auto weighted = mul(maps[s], constant(wgt));
      reduced = s == 0 ? weighted : add(reduced, weighted);
    }
  }

  long count = 0;
  for (uint8_t m : any_valid) count += m != 0;
  if (info) info->valid_pixels = count;
  // zero out pixels no context covers before exposing the map
  Tensor<T> valid_w({1, h, w}, T(0));
  Tensor<T> mean_w({1, h, w}, T(0));
  for (std::size_t i = 0; i < npix; ++i)
    if (any_valid[i]) {
      valid_w.v[i] = T(1);
      mean_w.v[i] = T(1) / T(std::max<long>(count, 1));
    }
  auto map_out = mul(reduced, constant(valid_w));
  auto loss = weighted_sum(reduced, mean_w);
  return {loss, map_out};
}

// x/y forward differences (last column/row zero), used by the smoothness term
template <class T>
Var<T> diff_x(const Var<T>& a) {
  const int c = a->val.dim(0), h = a->val.dim(1), w = a->val.dim(2);
  Tensor<T> out({c, h, w}, T(0));
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x + 1 < w; ++x)
        out.at(ci, y, x) = a->val.at(ci, y, x + 1) - a->val.at(ci, y, x);
  return make_op<T>(std::move(out), {a}, [a, c, h, w](Node<T>& n) {
    for (int ci = 0; ci < c; ++ci)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x + 1 < w; ++x) {
          const T g = n.grad.at(ci, y, x);
          a->grad.at(ci, y, x + 1) += g;
          a->grad.at(ci, y, x) -= g;
        }
  });
}

template <class T>
Var<T> diff_y(const Var<T>& a) {
  const int c = a->val.dim(0), h = a->val.dim(1), w = a->val.dim(2);
  Tensor<T> out({c, h, w}, T(0));
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y + 1 < h; ++y)
      for (int x = 0; x < w; ++x)
        out.at(ci, y, x) = a->val.at(ci, y + 1, x) - a->val.at(ci, y, x);
  return make_op<T>(std::move(out), {a}, [a, c, h, w](Node<T>& n) {
    for (int ci = 0; ci < c; ++ci)
      for (int y = 0; y + 1 < h; ++y)
        for (int x = 0; x < w; ++x) {
          const T g = n.grad.at(ci, y, x);
          a->grad.at(ci, y + 1, x) += g;
          a->grad.at(ci, y, x) -= g;
        }
  });
}

// Edge-aware smoothness on mean-normalized inverse depth.
template <class T>
Var<T> smoothness_loss(const Var<T>& depth, const Image& img) {
  auto inv = divv(constant(Tensor<T>::full(depth->val.shape, T(1))), depth);
  auto norm = divv(inv, constant(Tensor<T>::full(
                            depth->val.shape, std::max(T(1e-6), mean(inv)->val.v[0]))));
  const int h = img.dim(1), w = img.dim(2);
  Tensor<T> wx({1, h, w}, T(0)), wy({1, h, w}, T(0));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double gx = 0, gy = 0;
      for (int c = 0; c < 3; ++c) {
        if (x + 1 < w) gx += std::abs(img.at(c, y, x + 1) - img.at(c, y, x));
        if (y + 1 < h) gy += std::abs(img.at(c, y + 1, x) - img.at(c, y, x));
      }
      wx.at(0, y, x) = std::exp(-T(gx / 3) * T(30));
      wy.at(0, y, x) = std::exp(-T(gy / 3) * T(30));
    }
  const T n = T(depth->val.numel());
  return scale(add(weighted_sum(abs_(diff_x(norm)), wx),
                   weighted_sum(abs_(diff_y(norm)), wy)),
               T(1) / n);
}

// ---- depth network ----

struct DepthNetConfig {
  int width = 96, height = 64;
  double d_min = 0.5, d_max = 80.0;  // sigmoid output range (inverse-depth)
};

template <class T>
struct DepthNet {
  DepthNetConfig cfg;
  ParamStore<T> params;
  ConvLayer<T> e1, e2, e3, bottleneck, d3, d3b, d2, d2b, d1, d1b, out;

  DepthNet() = default;
  DepthNet(const DepthNetConfig& c, uint64_t seed) : cfg(c) {
    std::mt19937_64 rng(seed);
    e1 = ConvLayer<T>(params, "e1", 3, 16, 3, 2, rng);
    e2 = ConvLayer<T>(params, "e2", 16, 32, 3, 2, rng);
    e3 = ConvLayer<T>(params, "e3", 32, 48, 3, 2, rng);
    bottleneck = ConvLayer<T>(params, "bottleneck", 48, 48, 3, 1, rng);
    d3 = ConvLayer<T>(params, "d3", 48, 32, 3, 1, rng);
    d3b = ConvLayer<T>(params, "d3b", 64, 32, 3, 1, rng);
    d2 = ConvLayer<T>(params, "d2", 32, 16, 3, 1, rng);
    d2b = ConvLayer<T>(params, "d2b", 32, 16, 3, 1, rng);
    d1 = ConvLayer<T>(params, "d1", 16, 16, 3, 1, rng);
    d1b = ConvLayer<T>(params, "d1b", 16, 16, 3, 1, rng);
    out = ConvLayer<T>(params, "out", 16, 1, 3, 1, rng);
  }

  // raw (pre-activation) map, one channel, input resolution
  Var<T> forward_raw(const Image& img) const {
    auto x = constant(img.cast<T>());
    auto f1 = leaky_relu(e1(x));            // H/2
    auto f2 = leaky_relu(e2(f1));           // H/4
    auto f3 = leaky_relu(e3(f2));           // H/8
    auto b = leaky_relu(bottleneck(f3));
    auto u3 = leaky_relu(d3(upsample_nearest2x(b)));          // H/4
    auto m3 = leaky_relu(d3b(concat_ch(u3, f2)));
    auto u2 = leaky_relu(d2(upsample_nearest2x(m3)));         // H/2
    auto m2 = leaky_relu(d2b(concat_ch(u2, f1)));
    auto u1 = leaky_relu(d1(upsample_nearest2x(m2)));         // H
    auto m1 = leaky_relu(d1b(u1));
    return out(m1);
  }

  // sigmoid-bounded inverse-depth mapping into [d_min, d_max]
  Var<T> raw_to_depth(const Var<T>& raw) const {
    const T lo = T(1.0 / cfg.d_max), hi = T(1.0 / cfg.d_min);
    auto inv = add_const(scale(sigmoid(raw), hi - lo), lo);
    return divv(constant(Tensor<T>::full(raw->val.shape, T(1))), inv);
  }

  Var<T> predict(const Image& img) const { return raw_to_depth(forward_raw(img)); }
};

struct DepthTrainConfig {
  int steps = 900;
  int batch = 4;
  double lr = 2e-4;
  double smoothness_weight = 1e-3;
  // drop pixels whose current depth prediction is nearer than
  // ignore_close_dist from the photometric loss
  bool ignore_close_photometric = false;
  double ignore_close_dist = kIgnoreCloseDefault;
  PhotometricConfig photo;
  uint64_t seed = 0;
};

struct TrainCurve {
  std::vector<double> loss;  // per step
};

// One target frame plus its temporal contexts, resolved from sequences.
struct PhotoSample {
  const Frame* target;
  std::vector<const Image*> contexts;
  std::vector<Pose> poses_t_to_s;
};

std::vector<PhotoSample> collect_photo_samples(const std::vector<Sequence>& data,
                                               const std::vector<int>& offsets);

template <class T>
std::pair<DepthNet<T>, TrainCurve> train_depth_stage1(
    const std::vector<Sequence>& data, const DepthTrainConfig& cfg) {
  auto samples = collect_photo_samples(data, cfg.photo.context_offsets);
  if (samples.empty()) throw std::invalid_argument("train_depth_stage1: no usable frames");
  const CameraIntrinsics& k = samples[0].target->intrinsics;

  DepthNet<T> net(DepthNetConfig{k.width, k.height}, cfg.seed);
  Adam<T> opt(T(cfg.lr));
  std::mt19937_64 rng(cfg.seed ^ 0x5eedULL);
  std::uniform_int_distribution<std::size_t> pick(0, samples.size() - 1);
  TrainCurve curve;

  for (int step = 0; step < cfg.steps; ++step) {
    net.params.zero_grad();
    double step_loss = 0;
    for (int b = 0; b < cfg.batch; ++b) {
      const PhotoSample& s = samples[pick(rng)];
      auto depth = net.predict(s.target->image);
      std::vector<Image> ctx_imgs;
      for (auto* c : s.contexts) ctx_imgs.push_back(*c);
      std::vector<uint8_t> keep;
      if (cfg.ignore_close_photometric) {
        keep.resize(depth->val.numel());
        for (std::size_t i = 0; i < keep.size(); ++i)
          keep[i] = depth->val.v[i] >= T(cfg.ignore_close_dist);
      }
      auto [photo, map] = photometric_loss(s.target->image, ctx_imgs, depth,
                                           s.poses_t_to_s, k, cfg.photo, nullptr,
                                           keep.empty() ? nullptr : &keep);
      auto loss = add(photo, scale(smoothness_loss(depth, s.target->image),
                                   T(cfg.smoothness_weight)));
      backward(loss);
      step_loss += static_cast<double>(loss->val.v[0]);
    }
    step_loss /= cfg.batch;
    if (!std::isfinite(step_loss))
      throw std::runtime_error("train_depth_stage1: loss diverged (nan/inf) at step " +
                               std::to_string(step));
    // grads were accumulated over the batch; average them
    for (auto& p : net.params.params)
      for (auto& g : p->grad.v) g /= T(cfg.batch);
    opt.step(net.params);
    curve.loss.push_back(step_loss);
  }
  return {std::move(net), std::move(curve)};
}

// Converts a predicted depth tensor to an all-valid DepthMap.
template <class T>
DepthMap depth_tensor_to_map(const Tensor<T>& t) {
  DepthMap d(t.dim(1), t.dim(2));
  for (std::size_t i = 0; i < t.numel(); ++i) d.set(int(i / t.dim(2)), int(i % t.dim(2)), t.v[i]);
  return d;
}

std::string pseudo_label_path(const std::string& root, int seq_index, int frame_index);

void write_pseudo_label(const std::string& root, int seq_index, int frame_index,
                        const DepthMap& d);

DepthMap read_pseudo_label(const std::string& root, int seq_index, int frame_index);

// Writes one dense 16-bit depth png per frame, mirroring the dataset layout
// under <root>/seq_XXXX/pseudo_depth/NNN.png. Returns the frame count.
template <class T>
long generate_pseudo_labels(const DepthNet<T>& net, const std::vector<Sequence>& data,
                            const std::string& root) {
  long count = 0;
  for (std::size_t s = 0; s < data.size(); ++s)
    for (const Frame& f : data[s].frames) {
      auto depth = net.predict(f.image);
      write_pseudo_label(root, static_cast<int>(s), f.index,
                         depth_tensor_to_map(depth->val));
      ++count;
    }
  return count;
}

// Abs Rel = mean |pred - gt| / gt over pixels selected by the mask.
double abs_rel(const DepthMap& pred, const DepthMap& gt,
               const std::vector<uint8_t>* select = nullptr);

}  // namespace mono3d
