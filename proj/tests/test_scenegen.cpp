#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <random>

#include "mono3d/scenegen.hpp"

using namespace mono3d;
namespace fs = std::filesystem;

namespace {

const CameraIntrinsics kCam(110, 110, 48, 32, 96, 64);

Pose level_camera(double x, double z, double yaw, double height = 1.4) {
  Pose cam = Pose::yaw_about_y(yaw);
  const Vec3 center{x, -height, z};
  const Vec3 rc = cam.rotate(center);
  cam.translation = {-rc[0], -rc[1], -rc[2]};
  return cam;
}

// test-local bilinear sampler (double precision), independent of the library
double sample_bilinear(const Image& img, int c, double u, double v) {
  const int h = img.dim(1), w = img.dim(2);
  u = std::clamp(u, 0.0, w - 1.0);
  v = std::clamp(v, 0.0, h - 1.0);
  const int x0 = static_cast<int>(u), y0 = static_cast<int>(v);
  const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
  const double fu = u - x0, fv = v - y0;
  return (1 - fv) * ((1 - fu) * img.at(c, y0, x0) + fu * img.at(c, y0, x1)) +
         fv * ((1 - fu) * img.at(c, y1, x0) + fu * img.at(c, y1, x1));
}

}  // namespace

TEST_CASE("sample_world: empty range, determinism, non-overlap") {
  WorldConfig cfg;
  cfg.min_obstacles = cfg.max_obstacles = 0;
  CHECK(sample_world(cfg, 1).obstacles.empty());

  WorldConfig full;
  auto a = sample_world(full, 42);
  auto b = sample_world(full, 42);
  REQUIRE(a.obstacles.size() == b.obstacles.size());
  for (std::size_t i = 0; i < a.obstacles.size(); ++i) {
    CHECK(a.obstacles[i].center == b.obstacles[i].center);
    CHECK(a.obstacles[i].yaw == b.obstacles[i].yaw);
  }

  for (uint64_t seed = 0; seed < 100; ++seed) {
    auto w = sample_world(full, seed);
    CHECK(w.obstacles.size() >= std::size_t(full.min_obstacles));
    CHECK(w.obstacles.size() <= std::size_t(full.max_obstacles));
    for (std::size_t i = 0; i < w.obstacles.size(); ++i) {
      CHECK(w.obstacles[i].center[1] == doctest::Approx(-0.5 * w.obstacles[i].h));
      for (std::size_t j = i + 1; j < w.obstacles.size(); ++j)
        CHECK(iou_bev(w.obstacles[i], w.obstacles[j]) == 0.0);
    }
  }
}

TEST_CASE("empty-world render matches the analytic ray-plane depth") {
  World world;
  world.texture_seed = 5;
  const Pose cam = level_camera(0.3, -1.0, 0.05, 1.4);
  Frame f = render_frame(world, cam, kCam);
  for (int y = 0; y < kCam.height; ++y)
    for (int x = 0; x < kCam.width; ++x) {
      // rotation about y keeps the ray's y-slope equal to (v - cy)/fy, so
      // depth = camera_height / slope independently of the renderer
      const double slope = (y - kCam.cy) / kCam.fy;
      if (slope > 1.4 / kFarClip) {
        REQUIRE(f.gt_depth.is_valid(y, x));
        CHECK(std::abs(f.gt_depth.at(y, x) - 1.4 / slope) < 1e-6);
      } else {
        CHECK_FALSE(f.gt_depth.is_valid(y, x));
      }
    }
}

TEST_CASE("box face depth matches the analytic plane depth") {
  World world;
  world.texture_seed = 7;
  Box3D b;
  b.w = 2;
  b.l = 2;
  b.h = 2;
  b.center = {0.5, -1.0, 8.0};
  world.obstacles.push_back(b);
  const Pose cam = level_camera(0, 0, 0);
  Frame f = render_frame(world, cam, kCam);
  // the front face is the fronto-parallel plane z = 7 (camera at world z=0)
  const auto px = project({0.5, -1.0 + 1.4, 7.0}, kCam);
  const int u = static_cast<int>(std::lround(px.u));
  const int v = static_cast<int>(std::lround(px.v));
  REQUIRE(f.gt_depth.is_valid(v, u));
  CHECK(f.instance_at(v, u) == 1);
  CHECK(std::abs(f.gt_depth.at(v, u) - 7.0) < 1e-6);
}

TEST_CASE("rendering is deterministic") {
  auto world = sample_world(WorldConfig{}, 3);
  const Pose cam = level_camera(0, -1, 0.02);
  Frame a = render_frame(world, cam, kCam);
  Frame b = render_frame(world, cam, kCam);
  CHECK(a.image.v == b.image.v);
  CHECK(a.gt_depth.values == b.gt_depth.values);
  CHECK(a.instance_map == b.instance_map);
}

TEST_CASE("every annotated box is visible in the instance map") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    auto world = sample_world(WorldConfig{}, seed);
    Frame f = render_frame(world, level_camera(0, -1, 0), kCam);
    for (int id : f.instance_ids) {
      CHECK(std::count(f.instance_map.begin(), f.instance_map.end(), id) > 0);
    }
  }
}

TEST_CASE("lidar: empty world returns ground points only") {
  World world;
  world.texture_seed = 1;
  const Pose cam = level_camera(0, 0, 0.1);
  auto pc = simulate_lidar(world, cam, kCam, BeamConfig{});
  CHECK(!pc.points.empty());
  for (const auto& p : pc.points) CHECK(std::abs(p[1]) < 1e-6);

  BeamConfig none;
  none.rows = 0;
  CHECK(simulate_lidar(world, cam, kCam, none).points.empty());
}

TEST_CASE("lidar points re-project onto their sampled pixels") {
  auto world = sample_world(WorldConfig{}, 9);
  const Pose cam = level_camera(0.2, -0.5, -0.03);
  auto pc = simulate_lidar(world, cam, kCam, BeamConfig{});
  Frame f = render_frame(world, cam, kCam);
  CHECK(!pc.points.empty());
  for (const auto& pw : pc.points) {
    const Vec3 pcam = cam.apply(pw);
    const auto px = project(pcam, kCam);
    const int u = static_cast<int>(std::lround(px.u));
    const int v = static_cast<int>(std::lround(px.v));
    REQUIRE(f.gt_depth.is_valid(v, u));
    CHECK(std::abs(f.gt_depth.at(v, u) - pcam[2]) < 1e-6);
    // the point lies on the surface the pixel sees
    int inst = -1;
    const double d = raycast_depth(world, cam, kCam, u, v, &inst);
    CHECK(std::abs(d - pcam[2]) < 1e-6);
    CHECK(inst == f.instance_at(v, u));
  }
}

TEST_CASE("generate_sequence basics") {
  auto world = sample_world(WorldConfig{}, 21);
  CHECK_THROWS(generate_sequence(world, {level_camera(0, 0, 0), level_camera(0, 0.3, 0)}, kCam));

  // constant trajectory: all frames identical
  std::vector<Pose> still(3, level_camera(0, -1, 0));
  auto seq = generate_sequence(world, still, kCam);
  CHECK(seq.frames[1].image.v == seq.frames[0].image.v);
  CHECK(seq.frames[2].image.v == seq.frames[0].image.v);

  // stored trajectory reproduces relative poses
  auto traj = sample_trajectory(5, 77);
  for (std::size_t i = 1; i < traj.size(); ++i) {
    const Pose rel = traj[i].compose(traj[i - 1].inverse());
    const Pose check = rel.compose(traj[i - 1]);
    for (int j = 0; j < 9; ++j)
      CHECK(std::abs(check.rotation[j] - traj[i].rotation[j]) < 1e-9);
    for (int j = 0; j < 3; ++j)
      CHECK(std::abs(check.translation[j] - traj[i].translation[j]) < 1e-9);
  }
}

TEST_CASE("pure forward motion makes obstacles loom") {
  World world;
  world.texture_seed = 2;
  Box3D b;
  b.w = 2;
  b.l = 2;
  b.h = 2;
  b.center = {0, -1, 10};
  world.obstacles.push_back(b);
  std::vector<Pose> traj;
  for (int i = 0; i < 6; ++i) traj.push_back(level_camera(0, i * 0.4, 0));
  auto seq = generate_sequence(world, traj, kCam);
  double prev_area = 0;
  for (const auto& f : seq.frames) {
    REQUIRE(f.boxes.size() == 1);
    const double area = projected_keypoint_aabb(f.boxes[0], kCam).area();
    CHECK(area >= prev_area - 1e-9);
    prev_area = area;
  }
}

TEST_CASE("multi-view photo-consistency with gt depth and poses") {
  auto world = sample_world(WorldConfig{}, 31);
  auto traj = sample_trajectory(4, 31);
  auto seq = generate_sequence(world, traj, kCam);
  const Frame& ft = seq.frames[1];
  for (int sidx : {0, 2}) {
    const Frame& fs = seq.frames[sidx];
    const Pose t_to_s = fs.cam_from_world.compose(ft.cam_from_world.inverse());
    double err_sum = 0;
    long n = 0;
    for (int y = 0; y < kCam.height; ++y)
      for (int x = 0; x < kCam.width; ++x) {
        if (!ft.gt_depth.is_valid(y, x)) continue;
        const Vec3 pc = t_to_s.apply(unproject(x, y, ft.gt_depth.at(y, x), kCam));
        if (pc[2] <= 0) continue;
        const auto px = project(pc, kCam);
        if (px.u < 1 || px.u > kCam.width - 2 || px.v < 1 || px.v > kCam.height - 2) continue;
        // occlusion / co-visibility: all 4 bilinear taps must see the same
        // instance at a consistent depth
        const int x0 = static_cast<int>(px.u), y0 = static_cast<int>(px.v);
        bool covis = true;
        for (int dy = 0; dy <= 1 && covis; ++dy)
          for (int dx = 0; dx <= 1 && covis; ++dx) {
            const int yy = y0 + dy, xx = x0 + dx;
            if (fs.instance_at(yy, xx) != ft.instance_at(y, x) ||
                !fs.gt_depth.is_valid(yy, xx) ||
                std::abs(fs.gt_depth.at(yy, xx) - pc[2]) > 0.05 * pc[2] + 0.05)
              covis = false;
          }
        if (!covis) continue;
        for (int c = 0; c < 3; ++c) {
          err_sum += std::abs(sample_bilinear(fs.image, c, px.u, px.v) - ft.image.at(c, y, x));
          ++n;
        }
      }
    REQUIRE(n > 1000);
    CHECK(err_sum / n < 0.02);
  }
}

TEST_CASE("dataset round trip") {
  const fs::path root = fs::temp_directory_path() / "mono3d_ds_test";
  fs::remove_all(root);
  auto world = sample_world(WorldConfig{}, 55);
  auto seq = generate_sequence(world, sample_trajectory(3, 55), kCam);
  write_dataset({seq}, root.string());
  auto back = read_dataset(root.string());
  REQUIRE(back.size() == 1);
  REQUIRE(back[0].frames.size() == 3);

  for (std::size_t i = 0; i < 3; ++i) {
    const Frame& a = seq.frames[i];
    const Frame& b = back[0].frames[i];
    REQUIRE(a.boxes.size() == b.boxes.size());
    for (std::size_t j = 0; j < a.boxes.size(); ++j) {
      CHECK(a.boxes[j].center == b.boxes[j].center);  // exact round trip
      CHECK(a.boxes[j].yaw == b.boxes[j].yaw);
      CHECK(a.boxes[j].w == b.boxes[j].w);
      CHECK(a.boxes[j].class_id == b.boxes[j].class_id);
    }
    for (int j = 0; j < 9; ++j)
      CHECK(a.cam_from_world.rotation[j] == b.cam_from_world.rotation[j]);
    // depth quantization bound: 1/(2*256) m
    for (std::size_t p = 0; p < a.gt_depth.numel(); ++p) {
      CHECK(a.gt_depth.valid[p] == b.gt_depth.valid[p]);
      if (a.gt_depth.valid[p])
        CHECK(std::abs(a.gt_depth.values[p] - b.gt_depth.values[p]) <= 1.0 / 512 + 1e-12);
    }
    REQUIRE(seq.clouds[i].points.size() == back[0].clouds[i].points.size());
  }

  fs::remove(root / "seq_0000" / "poses.json");
  CHECK_THROWS_WITH_AS(read_dataset(root.string()),
                       doctest::Contains("poses.json"), std::runtime_error);
  fs::remove_all(root);
}
