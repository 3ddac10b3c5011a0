#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <random>

#include "mono3d/selfsup.hpp"

using namespace mono3d;

namespace {

const CameraIntrinsics kCam(110, 110, 48, 32, 96, 64);

Pose level_camera(const Vec3& position, double yaw) {
  Pose world_from_cam;
  world_from_cam.rotation = {std::cos(yaw), 0, std::sin(yaw),
                             0, 1, 0,
                             -std::sin(yaw), 0, std::cos(yaw)};
  world_from_cam.translation = position;
  return world_from_cam.inverse();
}

Image noise_image(int h, int w, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  Image img({3, h, w});
  for (auto& v : img.v) v = u(rng);
  return img;
}

double bilinear(const Image& img, int c, double us, double vs) {
  const int x0 = static_cast<int>(std::floor(us)), y0 = static_cast<int>(std::floor(vs));
  const double fu = us - x0, fv = vs - y0;
  return (1 - fv) * ((1 - fu) * img.at(c, y0, x0) + fu * img.at(c, y0, x0 + 1)) +
         fv * ((1 - fu) * img.at(c, y0 + 1, x0) + fu * img.at(c, y0 + 1, x0 + 1));
}

}  // namespace

TEST_CASE("ssim of an image with itself is 1") {
  auto img = noise_image(16, 20, 1);
  auto a = constant(img);
  auto s = ssim_map(a, a, 3);
  for (double v : s->val.v) CHECK(v == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("ssim of distinct constants has a closed form") {
  // For constants a=0, b=1 all variances/covariances vanish:
  // ssim = (2*mu_a*mu_b + C1) * C2 / ((mu_a^2 + mu_b^2 + C1) * C2) = C1 / (1 + C1)
  const double c1 = 0.01 * 0.01;
  Tensor<double> za({3, 10, 10}, 0.0), ob({3, 10, 10}, 1.0);
  auto s = ssim_map(leaf(za), leaf(ob), 3);
  for (double v : s->val.v) CHECK(v == doctest::Approx(c1 / (1 + c1)).epsilon(1e-9));
}

TEST_CASE("ssim is symmetric and bounded") {
  auto a = constant(noise_image(12, 14, 2));
  auto b = constant(noise_image(12, 14, 3));
  auto s1 = ssim_map(a, b, 3);
  auto s2 = ssim_map(b, a, 3);
  for (std::size_t i = 0; i < s1->val.numel(); ++i) {
    CHECK(s1->val.v[i] == doctest::Approx(s2->val.v[i]).epsilon(1e-12));
    CHECK(s1->val.v[i] <= 1.0 + 1e-9);
    CHECK(s1->val.v[i] >= -1.0 - 1e-9);
  }
}

TEST_CASE("identity warp reproduces the source exactly") {
  auto img = noise_image(kCam.height, kCam.width, 4);
  Tensor<double> depth({1, kCam.height, kCam.width}, 6.0);
  Pose identity;
  auto [synth, mask] = inverse_warp(img, leaf(depth), identity, kCam);
  CHECK(std::count(mask.begin(), mask.end(), 1) == long(mask.size()));
  for (std::size_t i = 0; i < img.numel(); ++i)
    CHECK(synth->val.v[i] == doctest::Approx(img.v[i]).epsilon(1e-5));
}

TEST_CASE("pure z-translation warp matches an analytic pixel mapping") {
  auto img = noise_image(kCam.height, kCam.width, 5);
  const double d = 8.0, tz = 1.0;
  Tensor<double> depth({1, kCam.height, kCam.width}, d);
  Pose fwd;  // camera moved backwards relative to source: q = p + [0,0,tz]
  fwd.translation = {0, 0, tz};
  auto [synth, mask] = inverse_warp(img, leaf(depth), fwd, kCam);
  for (int y = 0; y < kCam.height; ++y)
    for (int x = 0; x < kCam.width; ++x) {
      // unproject, translate, reproject by hand
      const double qx = d * (x - kCam.cx) / kCam.fx;
      const double qy = d * (y - kCam.cy) / kCam.fy;
      const double qz = d + tz;
      const double us = kCam.fx * qx / qz + kCam.cx;
      const double vs = kCam.fy * qy / qz + kCam.cy;
      const bool inside = us >= 0 && us <= kCam.width - 1 && vs >= 0 && vs <= kCam.height - 1;
      CHECK(int(mask[std::size_t(y) * kCam.width + x]) == int(inside));
      if (!inside) continue;
      for (int c = 0; c < 3; ++c) {
        const double want = bilinear(img, c, std::min(us, kCam.width - 1 - 1e-6),
                                     std::min(vs, kCam.height - 1 - 1e-6));
        CHECK(synth->val.at(c, y, x) == doctest::Approx(want).epsilon(1e-9));
      }
    }
}

TEST_CASE("warp gradient wrt depth matches finite differences") {
  const CameraIntrinsics small(40, 40, 8, 6, 16, 12);
  auto img = noise_image(12, 16, 6);
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> ud(4.0, 9.0);
  Tensor<double> depth({1, 12, 16});
  for (auto& v : depth.v) v = ud(rng);
  Pose motion = level_camera({0.2, -1.4, 0.0}, 0.04)
                    .compose(level_camera({0.0, -1.4, -0.5}, 0.0).inverse());

  auto weights = Tensor<double>({3, 12, 16});
  std::uniform_real_distribution<double> uw(-1, 1);
  for (auto& v : weights.v) v = uw(rng);

  auto eval = [&](const Tensor<double>& d) {
    auto [synth, mask] = inverse_warp(img, leaf(d), motion, small);
    (void)mask;
    return weighted_sum(synth, weights);
  };

  auto dl = leaf(depth);
  auto [synth, mask] = inverse_warp(img, dl, motion, small);
  auto loss = weighted_sum(synth, weights);
  backward(loss);

  auto source_cell = [&](const Tensor<double>& d, std::size_t i) {
    // integer bilinear cell the warped sample of pixel i lands in
    auto [synth2, mask2] = inverse_warp(img, leaf(d), motion, small);
    (void)synth2;
    const int y = int(i / 16), x = int(i % 16);
    const double dd = d.v[i];
    const double rx = (x - small.cx) / small.fx, ry = (y - small.cy) / small.fy;
    const auto& r = motion.rotation;
    const auto& t = motion.translation;
    const double qx = dd * (r[0] * rx + r[1] * ry + r[2]) + t[0];
    const double qy = dd * (r[3] * rx + r[4] * ry + r[5]) + t[1];
    const double qz = dd * (r[6] * rx + r[7] * ry + r[8]) + t[2];
    return std::pair<int, int>{int(std::floor(small.fx * qx / qz + small.cx)),
                               int(std::floor(small.fy * qy / qz + small.cy))};
  };

  int checked = 0;
  for (std::size_t i = 0; i < depth.numel(); i += 7) {
    const double eps = 1e-5;
    Tensor<double> dp = depth, dm = depth;
    dp.v[i] += eps;
    dm.v[i] -= eps;
    // a finite-difference probe is only valid if both evaluations stay in the
    // same bilinear cell (the sampled intensity is only piecewise smooth)
    if (source_cell(dp, i) != source_cell(dm, i)) continue;
    const double fd = (eval(dp)->val.v[0] - eval(dm)->val.v[0]) / (2 * eps);
    const double got = dl->grad.v[i];
    ++checked;
    CHECK(std::abs(fd - got) <= 1e-3 * std::max({std::abs(fd), std::abs(got), 1e-3}));
  }
  CHECK(checked > 15);
}

TEST_CASE("photometric loss of a perfectly re-rendered scene is near zero") {
  // identical frames with identity relative pose: warp is exact
  auto img = noise_image(kCam.height, kCam.width, 8);
  Tensor<double> depth({1, kCam.height, kCam.width}, 7.0);
  PhotometricConfig cfg;
  PhotometricResult info;
  auto [loss, map] = photometric_loss(img, {img, img}, leaf(depth),
                                      {Pose{}, Pose{}}, kCam, cfg, &info);
  CHECK(info.valid_pixels == long(kCam.height) * kCam.width);
  CHECK(loss->val.v[0] < 1e-6);
}

TEST_CASE("alpha = 0 reduces the photometric loss to a channel-mean L1") {
  auto target = noise_image(10, 12, 9);
  auto context = noise_image(10, 12, 10);
  const CameraIntrinsics c(30, 30, 6, 5, 12, 10);
  Tensor<double> depth({1, 10, 12}, 5.0);
  PhotometricConfig cfg;
  cfg.alpha = 0.0;
  auto [loss, map] = photometric_loss(target, {context}, leaf(depth), {Pose{}}, c, cfg);
  double want = 0;
  for (std::size_t i = 0; i < target.numel(); ++i)
    want += std::abs(target.v[i] - context.v[i]);
  want /= target.numel();
  CHECK(loss->val.v[0] == doctest::Approx(want).epsilon(1e-5));
}

TEST_CASE("photometric loss config validation") {
  auto img = noise_image(10, 12, 11);
  const CameraIntrinsics c(30, 30, 6, 5, 12, 10);
  Tensor<double> depth({1, 10, 12}, 5.0);
  PhotometricConfig bad;
  bad.alpha = 1.5;
  CHECK_THROWS(photometric_loss(img, {img}, leaf(depth), {Pose{}}, c, bad));
  PhotometricConfig ok;
  CHECK_THROWS(photometric_loss(img, {}, leaf(depth), {}, c, ok));
  CHECK_THROWS(photometric_loss(img, {img, img}, leaf(depth), {Pose{}}, c, ok));
}

TEST_CASE("true depth scores better than corrupted depth on a rendered scene") {
  World world = sample_world(WorldConfig{}, 41);
  const Pose p0 = level_camera({0.1, -1.4, 0.0}, 0.02);
  const Pose pt = level_camera({0.0, -1.4, 0.3}, 0.0);
  const Pose p2 = level_camera({-0.1, -1.4, 0.6}, -0.02);
  Frame f0 = render_frame(world, p0, kCam);
  Frame ft = render_frame(world, pt, kCam);
  Frame f2 = render_frame(world, p2, kCam);

  Tensor<double> gt({1, kCam.height, kCam.width}, 1.0);
  for (int y = 0; y < kCam.height; ++y)
    for (int x = 0; x < kCam.width; ++x)
      if (ft.gt_depth.is_valid(y, x)) gt.at(0, y, x) = ft.gt_depth.at(y, x);
      else gt.at(0, y, x) = 80.0;  // sky
  std::vector<Pose> poses = {p0.compose(pt.inverse()), p2.compose(pt.inverse())};
  PhotometricConfig cfg;

  auto [l_gt, m1] = photometric_loss(ft.image, {f0.image, f2.image}, leaf(gt), poses, kCam, cfg);

  Tensor<double> bad({1, kCam.height, kCam.width}, 4.0);  // flat, wrong everywhere
  auto [l_bad, m2] = photometric_loss(ft.image, {f0.image, f2.image}, leaf(bad), poses, kCam, cfg);

  CHECK(l_gt->val.v[0] < 0.02);
  CHECK(l_bad->val.v[0] > 2.0 * l_gt->val.v[0]);
  CHECK(l_bad->val.v[0] > 0.015);
}

TEST_CASE("min reduction takes the better context per pixel") {
  auto target = noise_image(8, 10, 12);
  auto far_off = noise_image(8, 10, 13);
  const CameraIntrinsics c(30, 30, 5, 4, 10, 8);
  Tensor<double> depth({1, 8, 10}, 5.0);
  PhotometricConfig cfg;
  // contexts: the target itself (perfect) and noise (bad); min picks perfect
  auto [loss, map] = photometric_loss(target, {far_off, target}, leaf(depth),
                                      {Pose{}, Pose{}}, c, cfg);
  CHECK(loss->val.v[0] < 1e-6);
  cfg.reduction = ContextReduction::kMean;
  auto [loss_mean, map2] = photometric_loss(target, {far_off, target}, leaf(depth),
                                            {Pose{}, Pose{}}, c, cfg);
  CHECK(loss_mean->val.v[0] > 0.01);
}

TEST_CASE("diff operators and smoothness loss") {
  Tensor<double> ramp({1, 4, 5});
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 5; ++x) ramp.at(0, y, x) = 2.0 * x + 3.0 * y;
  auto dx = diff_x(leaf(ramp));
  auto dy = diff_y(leaf(ramp));
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) CHECK(dx->val.at(0, y, x) == doctest::Approx(2.0));
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 5; ++x) CHECK(dy->val.at(0, y, x) == doctest::Approx(3.0));

  // constant depth has zero smoothness penalty
  auto img = noise_image(8, 10, 14);
  Tensor<double> flat({1, 8, 10}, 6.0);
  CHECK(smoothness_loss(leaf(flat), img)->val.v[0] == doctest::Approx(0.0));

  // smoothing toward a constant lowers the penalty
  std::mt19937_64 rng(15);
  std::uniform_real_distribution<double> ud(2.0, 9.0);
  Tensor<double> d({1, 8, 10});
  for (auto& v : d.v) v = ud(rng);
  const double rough = smoothness_loss(leaf(d), img)->val.v[0];
  Tensor<double> blended = d;
  for (auto& v : blended.v) v = 0.1 * v + 0.9 * 5.0;
  const double smoother = smoothness_loss(leaf(blended), img)->val.v[0];
  CHECK(rough > 0.0);
  CHECK(smoother < rough);

  auto dl = leaf(d);
  auto loss = smoothness_loss(dl, img);
  backward(loss);
  for (double g : dl->grad.v) CHECK(std::isfinite(g));
}

TEST_CASE("depth net output is bounded and deterministic") {
  DepthNetConfig cfg;
  cfg.width = kCam.width;
  cfg.height = kCam.height;
  DepthNet<double> net(cfg, 21), net2(cfg, 21), net3(cfg, 22);
  auto img = noise_image(kCam.height, kCam.width, 16);
  auto d = net.predict(img);
  CHECK(d->val.dim(0) == 1);
  CHECK(d->val.dim(1) == kCam.height);
  CHECK(d->val.dim(2) == kCam.width);
  for (double v : d->val.v) {
    CHECK(v >= cfg.d_min - 1e-9);
    CHECK(v <= cfg.d_max + 1e-9);
  }
  auto d2 = net2.predict(img);
  CHECK(d->val.v == d2->val.v);
  auto d3 = net3.predict(img);
  CHECK(d->val.v != d3->val.v);
}

TEST_CASE("stage-one training reduces the photometric objective") {
  WorldConfig wc;
  std::vector<Sequence> data;
  for (uint64_t s = 0; s < 2; ++s) {
    World world = sample_world(wc, 100 + s);
    auto traj = sample_trajectory(6, 200 + s);
    data.push_back(generate_sequence(world, traj, kCam));
  }
  DepthTrainConfig cfg;
  cfg.steps = 25;
  cfg.batch = 2;
  cfg.lr = 4e-4;
  cfg.seed = 3;
  auto [net, curve] = train_depth_stage1<double>(data, cfg);
  REQUIRE(curve.loss.size() == 25);
  double head = 0, tail = 0;
  for (int i = 0; i < 5; ++i) head += curve.loss[i];
  for (int i = 20; i < 25; ++i) tail += curve.loss[i];
  CHECK(tail < head);

  // bit-exact rerun with the same seed
  auto [net2, curve2] = train_depth_stage1<double>(data, cfg);
  CHECK(curve.loss == curve2.loss);
  for (std::size_t i = 0; i < net.params.params.size(); ++i)
    CHECK(net.params.params[i]->val.v == net2.params.params[i]->val.v);
}

TEST_CASE("pseudo label round trip") {
  const std::string root = "/tmp/mono3d_pseudo_test";
  std::filesystem::remove_all(root);
  std::filesystem::create_directories(root + "/seq_0003/pseudo_depth");
  DepthMap d(12, 16);
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(0.5, 100);
  for (int y = 0; y < 12; ++y)
    for (int x = 0; x < 16; ++x) d.set(y, x, u(rng));
  write_pseudo_label(root, 3, 7, d);
  CHECK(std::filesystem::exists(root + "/seq_0003/pseudo_depth/007.png"));
  auto back = read_pseudo_label(root, 3, 7);
  REQUIRE(back.height == 12);
  REQUIRE(back.width == 16);
  for (int y = 0; y < 12; ++y)
    for (int x = 0; x < 16; ++x) {
      CHECK(back.is_valid(y, x));
      CHECK(std::abs(back.at(y, x) - d.at(y, x)) <= 1.0 / 512.0 + 1e-12);
    }
  std::filesystem::remove_all(root);
}

TEST_CASE("abs_rel") {
  DepthMap gt(2, 2), pred(2, 2);
  gt.set(0, 0, 10.0);
  gt.set(0, 1, 5.0);
  pred.set(0, 0, 11.0);  // rel err 0.1
  pred.set(0, 1, 4.0);   // rel err 0.2
  CHECK(abs_rel(pred, gt) == doctest::Approx(0.15));
  std::vector<uint8_t> only_first = {1, 0, 0, 0};
  CHECK(abs_rel(pred, gt, &only_first) == doctest::Approx(0.1));
}
