#pragma once

#include "mono3d/autodiff.hpp"
#include "mono3d/geometry.hpp"
#include "mono3d/image.hpp"
#include "mono3d/scenegen.hpp"

// Point-cloud based depth supervision: sparse target rendering, focal-length
// aware rescaling of raw network depth, smoothed-L1 loss and near-field
// masking for pseudo labels.

namespace mono3d {

// smoothed-L1 transition, meters
constexpr double kDepthLossBeta = 1.0;
// reference focal length tying raw depth units to metric depth
constexpr double kFRef = 500.0;
// pseudo-label near-field cutoff, meters
constexpr double kIgnoreCloseDefault = 2.0;

// Projects each point with z > 0 onto the nearest-integer pixel; collisions
// keep the minimum depth.
DepthMap pointcloud_to_depthmap(const PointCloud& pc, const Pose& cam_from_world,
                                const CameraIntrinsics& k, int height, int width);

// valid && depth >= d_min
std::vector<uint8_t> ignore_close_mask(const DepthMap& d, double d_min);

// depth = softplus(raw) * fx_current / f_ref
template <class T>
Var<T> rescale_depth(const Var<T>& raw, T fx_current, T f_ref) {
  if (fx_current <= T(0) || f_ref <= T(0))
    throw std::invalid_argument("rescale_depth: focal lengths must be > 0");
  return scale(softplus(raw), fx_current / f_ref);
}

template <class T>
T rescale_depth_scalar(T raw, T fx_current, T f_ref) {
  if (fx_current <= T(0) || f_ref <= T(0))
    throw std::invalid_argument("rescale_depth: focal lengths must be > 0");
  return softplus_scalar(raw) * fx_current / f_ref;
}

// Mean Huber over masked pixels: e^2/(2*beta) for |e| < beta, |e| - beta/2
// otherwise. Zero masked pixels: returns 0 and sets *no_supervision.
template <class T>
Var<T> smooth_l1_depth_loss(const Var<T>& pred, const Tensor<T>& target,
                            const std::vector<uint8_t>& mask, T beta,
                            bool* no_supervision = nullptr) {
  check_same_shape(pred->val, target, "smooth_l1_depth_loss");
  if (mask.size() != target.numel())
    throw std::invalid_argument("smooth_l1_depth_loss: mask size mismatch");
  if (beta <= T(0)) throw std::invalid_argument("smooth_l1_depth_loss: beta must be > 0");
  long count = 0;
  for (uint8_t m : mask) count += m != 0;
  if (no_supervision) *no_supervision = count == 0;
  if (count == 0) return constant_scalar(T(0));
  Tensor<T> weights(target.shape, T(0));
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) weights.v[i] = T(1) / T(count);
  return weighted_sum(huber(sub(pred, constant(target)), beta), weights);
}

// convenience wrapper against a DepthMap target
template <class T>
Var<T> smooth_l1_depth_loss(const Var<T>& pred, const DepthMap& target, T beta,
                            bool* no_supervision = nullptr) {
  Tensor<T> tgt({1, target.height, target.width});
  for (std::size_t i = 0; i < target.numel(); ++i) tgt.v[i] = static_cast<T>(target.values[i]);
  return smooth_l1_depth_loss(pred, tgt, target.valid, beta, no_supervision);
}

}  // namespace mono3d
