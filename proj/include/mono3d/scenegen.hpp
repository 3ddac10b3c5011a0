#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mono3d/geometry.hpp"
#include "mono3d/image.hpp"

// Deterministic synthetic-world generator and raycasting renderer. World
// frame: x right, y down (ground plane y = 0, up is -y), z forward. Static
// worlds; camera poses are restricted to yaw-about-y rotations so boxes stay
// yaw-parameterized in the camera frame.

namespace mono3d {

struct ClassPrior {
  std::string name;
  double w, l, h;        // mean size, meters
  double size_jitter;    // multiplicative, uniform in [1-j, 1+j] per axis
};

struct WorldConfig {
  int min_obstacles = 2;
  int max_obstacles = 6;
  double extent_x = 7.0;            // placement |x| bound
  double z_min = 4.0, z_max = 11.0; // placement depth band
  double clearance = 0.3;           // min BEV gap between obstacles, meters
  int max_attempts = 200;           // rejection sampling budget per obstacle
  std::vector<ClassPrior> classes = default_classes();

  static std::vector<ClassPrior> default_classes() {
    return {{"block", 1.8, 1.8, 1.8, 0.15},
            {"slab", 1.2, 3.2, 1.2, 0.15},
            {"tower", 1.4, 1.4, 2.6, 0.15}};
  }
};

struct World {
  std::vector<Box3D> obstacles;  // world frame, resting on the ground
  uint64_t texture_seed = 0;
};

struct Frame {
  Image image;                 // [3,H,W], [0,1]
  DepthMap gt_depth;           // valid wherever a surface is hit
  std::vector<int> instance_map;  // H*W, 0 = ground/sky, i+1 = obstacle i
  Pose cam_from_world;
  CameraIntrinsics intrinsics;
  std::vector<Box3D> boxes;       // camera frame, visible instances only
  std::vector<int> instance_ids;  // parallel to boxes, world obstacle index + 1
  int index = 0;

  int instance_at(int y, int x) const { return instance_map[std::size_t(y) * gt_depth.width + x]; }
};

struct PointCloud {
  std::vector<Vec3> points;
  bool world_frame = true;
};

struct BeamConfig {
  int rows = 12;                  // evenly spaced scan rows over the image
  double azimuth_step = 0.015;    // radians between returns within a row
};

struct Sequence {
  World world;
  std::vector<Frame> frames;
  std::vector<Pose> trajectory;       // cam_from_world per frame
  std::vector<PointCloud> clouds;     // world frame, one per frame
};

// beyond this range a ray is treated as a miss (keeps depth in the 16-bit
// png range)
constexpr double kFarClip = 120.0;

World sample_world(const WorldConfig& cfg, uint64_t seed);

Frame render_frame(const World& world, const Pose& cam_from_world,
                   const CameraIntrinsics& k);

PointCloud simulate_lidar(const World& world, const Pose& sensor_from_world,
                          const CameraIntrinsics& k, const BeamConfig& beams);

Sequence generate_sequence(const World& world, const std::vector<Pose>& trajectory,
                           const CameraIntrinsics& k,
                           const BeamConfig& beams = BeamConfig{});

// Forward-dominant ego trajectory with mild lateral/yaw wander.
std::vector<Pose> sample_trajectory(int length, uint64_t seed,
                                    double step = 0.3, double cam_height = 1.4);

// Analytic single-ray depth query (camera-frame z of the nearest hit along
// the ray through pixel (u, v)); < 0 when nothing is hit. Also reports the
// instance id like render_frame does.
double raycast_depth(const World& world, const Pose& cam_from_world,
                     const CameraIntrinsics& k, double u, double v,
                     int* instance_id = nullptr);

// ---- dataset persistence ----
// Layout: root/seq_XXXX/{rgb/NNN.png, depth/NNN.png, lidar/NNN.json,
//                        boxes/NNN.json, poses.json, intrinsics.json}

void write_dataset(const std::vector<Sequence>& sequences, const std::string& root);

// Reads everything back. instance maps and the source World are not
// persisted; reloaded frames carry empty instance_map / world.
std::vector<Sequence> read_dataset(const std::string& root);

}  // namespace mono3d
