#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "mono3d/depthsup.hpp"

using namespace mono3d;

namespace {
const CameraIntrinsics kCam(100, 100, 64, 48, 128, 96);
}

TEST_CASE("pointcloud_to_depthmap basics") {
  Pose identity;
  PointCloud empty;
  empty.world_frame = false;
  auto d = pointcloud_to_depthmap(empty, identity, kCam, 96, 128);
  CHECK(std::count(d.valid.begin(), d.valid.end(), 1) == 0);

  PointCloud one;
  one.world_frame = false;
  one.points.push_back({0, 0, 5});
  d = pointcloud_to_depthmap(one, identity, kCam, 96, 128);
  CHECK(std::count(d.valid.begin(), d.valid.end(), 1) == 1);
  CHECK(d.at(48, 64) == doctest::Approx(5.0));

  PointCloud two;
  two.world_frame = false;
  two.points.push_back({0, 0, 7});
  two.points.push_back({0, 0, 3});
  d = pointcloud_to_depthmap(two, identity, kCam, 96, 128);
  CHECK(d.at(48, 64) == doctest::Approx(3.0));  // z-buffer keeps the minimum
}

TEST_CASE("pointcloud_to_depthmap ignores behind-camera and out-of-bounds points") {
  Pose identity;
  PointCloud pc;
  pc.world_frame = false;
  pc.points.push_back({0, 0, -5});
  pc.points.push_back({100, 0, 1});
  auto d = pointcloud_to_depthmap(pc, identity, kCam, 96, 128);
  CHECK(std::count(d.valid.begin(), d.valid.end(), 1) == 0);
}

TEST_CASE("duplicating a point changes nothing") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-3, 3), uz(1, 20);
  PointCloud pc;
  pc.world_frame = false;
  for (int i = 0; i < 200; ++i) pc.points.push_back({u(rng), u(rng), uz(rng)});
  Pose identity;
  auto base = pointcloud_to_depthmap(pc, identity, kCam, 96, 128);
  pc.points.push_back(pc.points[17]);
  pc.points.push_back(pc.points[3]);
  auto dup = pointcloud_to_depthmap(pc, identity, kCam, 96, 128);
  CHECK(base.values == dup.values);
  CHECK(base.valid == dup.valid);
}

TEST_CASE("rescale_depth") {
  auto raw = leaf(Tensor<double>({1, 2, 2}, 0.0));
  // fx == f_ref: softplus only; softplus(0) = ln 2
  auto d = rescale_depth(raw, 500.0, 500.0);
  CHECK(d->val.v[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  // doubling fx doubles the output
  auto d2 = rescale_depth(raw, 1000.0, 500.0);
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(d2->val.v[i] == doctest::Approx(2 * d->val.v[i]));
  // invariance under common scaling of both focals
  auto d3 = rescale_depth(raw, 3 * 500.0, 3 * 500.0);
  CHECK(d3->val.v == d->val.v);
  CHECK_THROWS(rescale_depth(raw, -1.0, 500.0));
  CHECK_THROWS(rescale_depth(raw, 500.0, 0.0));

  // monotone and strictly positive
  double prev = 0;
  for (double x : {-20.0, -3.0, -0.5, 0.0, 0.5, 3.0, 20.0}) {
    const double y = rescale_depth_scalar(x, 700.0, 500.0);
    CHECK(y > 0);
    CHECK(y > prev);
    prev = y;
  }
}

TEST_CASE("smooth_l1_depth_loss values") {
  const double beta = 1.0;
  DepthMap target(4, 4);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) target.set(y, x, 5.0);
  Tensor<double> pred_t({1, 4, 4}, 5.0);
  auto pred = leaf(pred_t);
  auto loss = smooth_l1_depth_loss(pred, target, beta);
  CHECK(loss->val.v[0] == doctest::Approx(0.0));

  // single valid pixel with |e| = 2*beta -> loss = 1.5*beta
  DepthMap single(4, 4);
  single.set(1, 1, 3.0);
  Tensor<double> p2({1, 4, 4}, 3.0 + 2 * beta);
  bool no_sup = true;
  auto l2 = smooth_l1_depth_loss(leaf(p2), single, beta, &no_sup);
  CHECK_FALSE(no_sup);
  CHECK(l2->val.v[0] == doctest::Approx(1.5 * beta));

  // zero valid pixels -> loss 0 with flag
  DepthMap none(4, 4);
  auto l3 = smooth_l1_depth_loss(leaf(p2), none, beta, &no_sup);
  CHECK(no_sup);
  CHECK(l3->val.v[0] == 0.0);

  DepthMap bad(3, 4);
  CHECK_THROWS(smooth_l1_depth_loss(leaf(p2), bad, beta));
  CHECK_THROWS(smooth_l1_depth_loss(leaf(p2), single, 0.0));
}

TEST_CASE("smooth_l1_depth_loss matches a scalar reference on random maps") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.5, 20), mask01(0, 1);
  const double beta = 1.0;
  for (int trial = 0; trial < 20; ++trial) {
    DepthMap target(6, 8);
    Tensor<double> pred({1, 6, 8});
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 8; ++x) {
        if (mask01(rng) < 0.7) target.set(y, x, u(rng));
        pred.at(0, y, x) = u(rng);
      }
    auto loss = smooth_l1_depth_loss(leaf(pred), target, beta);
    // independent per-pixel reference
    double want = 0;
    long n = 0;
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 8; ++x) {
        if (!target.is_valid(y, x)) continue;
        const double e = std::abs(pred.at(0, y, x) - target.at(y, x));
        want += e < beta ? e * e / (2 * beta) : e - beta / 2;
        ++n;
      }
    if (n) want /= n;
    CHECK(loss->val.v[0] == doctest::Approx(want).epsilon(1e-9));
  }
}

TEST_CASE("smooth_l1_depth_loss gradient matches central differences") {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(0.5, 20), mask01(0, 1);
  const double beta = 1.0;
  for (int trial = 0; trial < 10; ++trial) {
    DepthMap target(5, 5);
    Tensor<double> pred({1, 5, 5});
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 5; ++x) {
        if (mask01(rng) < 0.8) target.set(y, x, u(rng));
        pred.at(0, y, x) = u(rng);
      }
    auto pl = leaf(pred);
    auto loss = smooth_l1_depth_loss(pl, target, beta);
    backward(loss);
    for (std::size_t i = 0; i < pred.numel(); ++i) {
      const double eps = 1e-6;
      Tensor<double> pp = pred;
      pp.v[i] += eps;
      const double fp = smooth_l1_depth_loss(leaf(pp), target, beta)->val.v[0];
      pp.v[i] = pred.v[i] - eps;
      const double fm = smooth_l1_depth_loss(leaf(pp), target, beta)->val.v[0];
      const double fd = (fp - fm) / (2 * eps);
      CHECK(std::abs(fd - pl->grad.v[i]) <
            1e-4 * std::max({std::abs(fd), std::abs(pl->grad.v[i]), 1e-6}));
    }
  }
}

TEST_CASE("ignore_close_mask") {
  DepthMap d(4, 4);
  d.set(0, 0, 1.0);
  d.set(0, 1, 2.0);
  d.set(2, 3, 9.0);
  auto all = ignore_close_mask(d, 0.0);
  CHECK(all == d.valid);

  auto none = ignore_close_mask(d, 100.0);
  CHECK(std::count(none.begin(), none.end(), 1) == 0);

  CHECK_THROWS(ignore_close_mask(d, -1.0));

  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.5, 20), mask01(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    DepthMap m(8, 8);
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x)
        if (mask01(rng) < 0.6) m.set(y, x, u(rng));
    const double d_min = 5.0;
    auto mask = ignore_close_mask(m, d_min);
    long want = 0;
    for (std::size_t i = 0; i < m.numel(); ++i)
      want += m.valid[i] && m.values[i] >= d_min;
    CHECK(std::count(mask.begin(), mask.end(), 1) == want);
    for (std::size_t i = 0; i < m.numel(); ++i)
      if (mask[i]) CHECK((m.valid[i] && m.values[i] >= d_min));
  }
}
