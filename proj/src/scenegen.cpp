#include "mono3d/scenegen.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

namespace mono3d {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr double kSkyColor[3] = {0.55, 0.65, 0.80};

uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Band-limited procedural texture: per-channel base color plus three seeded
// sinusoids over face-local coordinates (meters).
struct FaceTexture {
  struct Wave { double amp, ku, kv, phase; };
  double base[3];
  Wave waves[3][3];

  static FaceTexture make(uint64_t seed, double freq_lo, double freq_hi) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> ub(0.30, 0.70), ua(0.02, 0.06),
        uf(freq_lo, freq_hi), up(0, 2 * M_PI), us(-1, 1);
    FaceTexture t;
    for (int c = 0; c < 3; ++c) {
      t.base[c] = ub(rng);
      for (int i = 0; i < 3; ++i) {
        const double f = uf(rng), ang = up(rng);
        t.waves[c][i] = {ua(rng), f * std::cos(ang), f * std::sin(ang), up(rng)};
      }
    }
    return t;
  }

  void sample(double u, double v, double amp_scale, double rgb[3]) const {
    for (int c = 0; c < 3; ++c) {
      double x = base[c];
      for (const auto& w : waves[c])
        x += amp_scale * w.amp * std::sin(2 * M_PI * (w.ku * u + w.kv * v) + w.phase);
      rgb[c] = std::clamp(x, 0.03, 0.97);
    }
  }
};

struct WorldTextures {
  FaceTexture ground;
  std::vector<std::array<FaceTexture, 6>> faces;  // per obstacle

  explicit WorldTextures(const World& w) {
    ground = FaceTexture::make(mix64(w.texture_seed ^ 0xABCDULL), 0.08, 0.20);
    faces.resize(w.obstacles.size());
    for (std::size_t i = 0; i < w.obstacles.size(); ++i)
      for (int f = 0; f < 6; ++f)
        faces[i][f] = FaceTexture::make(
            mix64(w.texture_seed + 1 + i * 6 + f), 0.30, 0.60);
  }
};

struct Hit {
  double t = -1;        // camera-frame depth of the hit
  int instance = 0;     // 0 = ground, i+1 = obstacle i
  int face = -1;        // -1 ground, else 2*axis + (positive side)
  double u = 0, v = 0;  // face-local coordinates, meters
};

// Ray through camera center with world direction d (camera-frame z of d is 1,
// so the ray parameter equals camera depth).
bool trace(const World& world, const Vec3& origin, const Vec3& dir, Hit& best) {
  best = Hit{};
  best.t = kFarClip;
  bool any = false;

  if (dir[1] > 1e-12) {  // y-down: ground plane y = 0 below the camera
    const double t = -origin[1] / dir[1];
    if (t > 1e-9 && t < best.t) {
      const Vec3 p = origin + t * dir;
      best = Hit{t, 0, -1, p[0], p[2]};
      any = true;
    }
  }

  for (std::size_t i = 0; i < world.obstacles.size(); ++i) {
    const Box3D& b = world.obstacles[i];
    const double c = std::cos(b.yaw), s = std::sin(b.yaw);
    const Vec3 rel = origin - b.center;
    // rotate into the box frame (inverse yaw)
    const double px = c * rel[0] - s * rel[2], pz = s * rel[0] + c * rel[2];
    const double dx = c * dir[0] - s * dir[2], dz = s * dir[0] + c * dir[2];
    const double p[3] = {px, rel[1], pz};
    const double d[3] = {dx, dir[1], dz};
    const double ext[3] = {0.5 * b.w, 0.5 * b.h, 0.5 * b.l};

    double t0 = 1e-9, t1 = best.t;
    int enter_axis = -1, enter_sign = 0;
    bool miss = false;
    for (int a = 0; a < 3 && !miss; ++a) {
      if (std::abs(d[a]) < 1e-12) {
        if (std::abs(p[a]) > ext[a]) miss = true;
        continue;
      }
      double ta = (-ext[a] - p[a]) / d[a];
      double tb = (ext[a] - p[a]) / d[a];
      int sign = 0;
      if (ta > tb) {
        std::swap(ta, tb);
        sign = 1;  // entering through the +face
      }
      if (ta > t0) {
        t0 = ta;
        enter_axis = a;
        enter_sign = sign;
      }
      t1 = std::min(t1, tb);
      if (t0 > t1) miss = true;
    }
    if (miss || enter_axis < 0 || t0 >= best.t) continue;

    const double hit[3] = {p[0] + t0 * d[0], p[1] + t0 * d[1], p[2] + t0 * d[2]};
    Hit h;
    h.t = t0;
    h.instance = static_cast<int>(i) + 1;
    h.face = 2 * enter_axis + enter_sign;
    switch (enter_axis) {
      case 0: h.u = hit[2]; h.v = hit[1]; break;
      case 1: h.u = hit[0]; h.v = hit[2]; break;
      default: h.u = hit[0]; h.v = hit[1]; break;
    }
    best = h;
    any = true;
  }
  return any && best.t < kFarClip;
}

double cam_yaw_of(const Pose& cam_from_world) {
  return std::atan2(cam_from_world.rotation[2], cam_from_world.rotation[0]);
}

}  // namespace

World sample_world(const WorldConfig& cfg, uint64_t seed) {
  if (cfg.min_obstacles > cfg.max_obstacles || cfg.min_obstacles < 0)
    throw std::invalid_argument("sample_world: bad obstacle count range");
  if (cfg.classes.empty()) throw std::invalid_argument("sample_world: no classes");
  std::mt19937_64 rng(mix64(seed));
  std::uniform_int_distribution<int> ucount(cfg.min_obstacles, cfg.max_obstacles);
  std::uniform_int_distribution<int> uclass(0, static_cast<int>(cfg.classes.size()) - 1);
  std::uniform_real_distribution<double> ux(-cfg.extent_x, cfg.extent_x),
      uz(cfg.z_min, cfg.z_max), uyaw(-M_PI, M_PI), ujit(-1, 1), u01(0, 1);

  World world;
  world.texture_seed = mix64(seed ^ 0x7ea7u);
  const int count = ucount(rng);
  for (int i = 0; i < count; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < cfg.max_attempts && !placed; ++attempt) {
      const ClassPrior& cls = cfg.classes[uclass(rng)];
      Box3D b;
      b.class_id = static_cast<int>(&cls - cfg.classes.data());
      b.w = cls.w * (1 + cls.size_jitter * ujit(rng));
      b.l = cls.l * (1 + cls.size_jitter * ujit(rng));
      b.h = cls.h * (1 + cls.size_jitter * ujit(rng));
      b.yaw = wrap_angle(uyaw(rng));
      b.center = {ux(rng), -0.5 * b.h, uz(rng)};
      // clearance enforced by testing inflated footprints for contact
      Box3D infl = b;
      infl.w += cfg.clearance;
      infl.l += cfg.clearance;
      bool clash = false;
      for (const auto& o : world.obstacles) {
        Box3D oi = o;
        oi.w += cfg.clearance;
        oi.l += cfg.clearance;
        if (iou_bev(infl, oi) > 0) {
          clash = true;
          break;
        }
      }
      if (!clash) {
        world.obstacles.push_back(b);
        placed = true;
      }
    }
    if (!placed) throw std::runtime_error("sample_world: placement failed");
  }
  return world;
}

double raycast_depth(const World& world, const Pose& cam_from_world,
                     const CameraIntrinsics& k, double u, double v,
                     int* instance_id) {
  const Pose world_from_cam = cam_from_world.inverse();
  const Vec3 origin = world_from_cam.translation;
  const Vec3 dir = world_from_cam.rotate({(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0});
  Hit h;
  if (!trace(world, origin, dir, h)) {
    if (instance_id) *instance_id = 0;
    return -1;
  }
  if (instance_id) *instance_id = h.instance;
  return h.t;
}

Frame render_frame(const World& world, const Pose& cam_from_world,
                   const CameraIntrinsics& k) {
  const Pose world_from_cam = cam_from_world.inverse();
  if (world_from_cam.translation[1] >= 0)
    throw std::invalid_argument("render_frame: camera must be above the ground");

  WorldTextures tex(world);
  Frame f;
  f.intrinsics = k;
  f.cam_from_world = cam_from_world;
  f.image = Image({3, k.height, k.width});
  f.gt_depth = DepthMap(k.height, k.width);
  f.instance_map.assign(std::size_t(k.height) * k.width, 0);

  const Vec3 origin = world_from_cam.translation;
  std::vector<int> pixel_count(world.obstacles.size(), 0);

  for (int y = 0; y < k.height; ++y)
    for (int x = 0; x < k.width; ++x) {
      const Vec3 dir = world_from_cam.rotate({(x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0});
      Hit h;
      double rgb[3] = {kSkyColor[0], kSkyColor[1], kSkyColor[2]};
      if (trace(world, origin, dir, h)) {
        f.gt_depth.set(y, x, h.t);
        f.instance_map[std::size_t(y) * k.width + x] = h.instance;
        if (h.instance == 0) {
          // fade ground texture with radial distance to keep it band-limited
          // relative to the growing pixel footprint near the horizon
          const double r2 = h.u * h.u + h.v * h.v;
          tex.ground.sample(h.u, h.v, 1.0 / (1.0 + r2 / 225.0), rgb);
        } else {
          tex.faces[h.instance - 1][h.face].sample(h.u, h.v, 1.0, rgb);
        }
      }
      for (int c = 0; c < 3; ++c) f.image.at(c, y, x) = rgb[c];
      if (h.instance > 0) ++pixel_count[h.instance - 1];
    }

  const double cam_yaw = cam_yaw_of(cam_from_world);
  for (std::size_t i = 0; i < world.obstacles.size(); ++i) {
    if (pixel_count[i] == 0) continue;
    Box3D b = world.obstacles[i];
    b.center = cam_from_world.apply(b.center);
    b.yaw = wrap_angle(b.yaw + cam_yaw);
    const auto corners = box_corners(b);
    const double min_z = std::min_element(corners.begin(), corners.end(),
        [](const Vec3& a, const Vec3& c) { return a[2] < c[2]; })->at(2);
    if (min_z <= kNearPlane) continue;  // near-plane clippers are not annotated
    f.boxes.push_back(b);
    f.instance_ids.push_back(static_cast<int>(i) + 1);
  }
  return f;
}

PointCloud simulate_lidar(const World& world, const Pose& sensor_from_world,
                          const CameraIntrinsics& k, const BeamConfig& beams) {
  PointCloud pc;
  pc.world_frame = true;
  if (beams.rows <= 0) return pc;
  const Pose world_from_cam = sensor_from_world.inverse();
  const double az_min = std::atan(-k.cx / k.fx);
  const double az_max = std::atan((k.width - 1 - k.cx) / k.fx);
  int prev_u = -1;
  for (int r = 0; r < beams.rows; ++r) {
    const int v = std::clamp(static_cast<int>(std::lround((r + 0.5) * k.height / beams.rows)),
                             0, k.height - 1);
    prev_u = -1;
    for (double az = az_min; az <= az_max; az += beams.azimuth_step) {
      const int u = static_cast<int>(std::lround(k.fx * std::tan(az) + k.cx));
      if (u < 0 || u >= k.width || u == prev_u) continue;
      prev_u = u;
      const double depth = raycast_depth(world, sensor_from_world, k, u, v);
      if (depth <= 0) continue;
      pc.points.push_back(world_from_cam.apply(unproject(u, v, depth, k)));
    }
  }
  return pc;
}

Sequence generate_sequence(const World& world, const std::vector<Pose>& trajectory,
                           const CameraIntrinsics& k, const BeamConfig& beams) {
  if (trajectory.size() < 3)
    throw std::invalid_argument("generate_sequence: trajectory must have >= 3 poses");
  Sequence seq;
  seq.world = world;
  seq.trajectory = trajectory;
  for (std::size_t i = 0; i < trajectory.size(); ++i) {
    Frame f = render_frame(world, trajectory[i], k);
    f.index = static_cast<int>(i);
    seq.frames.push_back(std::move(f));
    seq.clouds.push_back(simulate_lidar(world, trajectory[i], k, beams));
  }
  return seq;
}

std::vector<Pose> sample_trajectory(int length, uint64_t seed, double step,
                                    double cam_height) {
  std::mt19937_64 rng(mix64(seed ^ 0x7a11u));
  std::uniform_real_distribution<double> ux(-0.8, 0.8), uz(-1.5, 0.0),
      uyaw(-0.08, 0.08), udrift(-0.02, 0.02);
  double yaw = uyaw(rng);
  Vec3 pos{ux(rng), -cam_height, uz(rng)};
  std::vector<Pose> out;
  for (int i = 0; i < length; ++i) {
    Pose cam = Pose::yaw_about_y(yaw);
    // t = -R * C so that x_cam = R x_world + t
    const Vec3 rc = cam.rotate(pos);
    cam.translation = {-rc[0], -rc[1], -rc[2]};
    out.push_back(cam);
    pos = pos + step * Vec3{-std::sin(yaw), 0.0, std::cos(yaw)};
    yaw += udrift(rng);
  }
  return out;
}

// ---- persistence ----

namespace {

std::string frame_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%03d", i);
  return buf;
}

json pose_to_json(const Pose& p) {
  return {{"rotation", p.rotation}, {"translation", p.translation}};
}

Pose pose_from_json(const json& j) {
  Pose p;
  auto r = j.at("rotation").get<std::vector<double>>();
  auto t = j.at("translation").get<std::vector<double>>();
  std::copy(r.begin(), r.end(), p.rotation.begin());
  std::copy(t.begin(), t.end(), p.translation.begin());
  return p;
}

json load_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("dataset: missing or unreadable file: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("dataset: malformed json in " + path.string() + ": " + e.what());
  }
  return j;
}

void save_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("dataset: cannot write " + path.string());
  out << j.dump(1) << "\n";
}

}  // namespace

void write_dataset(const std::vector<Sequence>& sequences, const std::string& root) {
  fs::create_directories(root);
  for (std::size_t s = 0; s < sequences.size(); ++s) {
    const Sequence& seq = sequences[s];
    char name[32];
    std::snprintf(name, sizeof name, "seq_%04zu", s);
    const fs::path dir = fs::path(root) / name;
    for (const char* sub : {"rgb", "depth", "lidar", "boxes"})
      fs::create_directories(dir / sub);

    json poses = json::array();
    for (const auto& p : seq.trajectory) poses.push_back(pose_to_json(p));
    save_json(dir / "poses.json", {{"frames", poses}});

    const CameraIntrinsics& k = seq.frames.at(0).intrinsics;
    save_json(dir / "intrinsics.json",
              {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy},
               {"width", k.width}, {"height", k.height}});

    for (std::size_t i = 0; i < seq.frames.size(); ++i) {
      const Frame& f = seq.frames[i];
      const std::string n = frame_name(static_cast<int>(i));
      write_png_rgb((dir / "rgb" / (n + ".png")).string(), f.image);
      write_png_depth16((dir / "depth" / (n + ".png")).string(), f.gt_depth);

      json boxes = json::array();
      for (std::size_t b = 0; b < f.boxes.size(); ++b) {
        const Box3D& box = f.boxes[b];
        boxes.push_back({{"center", box.center},
                         {"size", {box.w, box.l, box.h}},
                         {"yaw", box.yaw},
                         {"class_id", box.class_id},
                         {"instance_id", f.instance_ids[b]}});
      }
      save_json(dir / "boxes" / (n + ".json"), boxes);

      json pts = json::array();
      for (const auto& p : seq.clouds.at(i).points) pts.push_back(p);
      save_json(dir / "lidar" / (n + ".json"), {{"frame", "world"}, {"points", pts}});
    }
  }
}

std::vector<Sequence> read_dataset(const std::string& root) {
  if (!fs::is_directory(root))
    throw std::runtime_error("dataset: missing or unreadable file: " + root);
  std::vector<fs::path> seq_dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && e.path().filename().string().rfind("seq_", 0) == 0)
      seq_dirs.push_back(e.path());
  std::sort(seq_dirs.begin(), seq_dirs.end());

  std::vector<Sequence> out;
  for (const auto& dir : seq_dirs) {
    Sequence seq;
    const json poses = load_json(dir / "poses.json");
    for (const auto& jp : poses.at("frames")) seq.trajectory.push_back(pose_from_json(jp));

    const json jk = load_json(dir / "intrinsics.json");
    const CameraIntrinsics k(jk.at("fx"), jk.at("fy"), jk.at("cx"), jk.at("cy"),
                             jk.at("width"), jk.at("height"));

    for (std::size_t i = 0; i < seq.trajectory.size(); ++i) {
      const std::string n = frame_name(static_cast<int>(i));
      Frame f;
      f.index = static_cast<int>(i);
      f.intrinsics = k;
      f.cam_from_world = seq.trajectory[i];
      f.image = read_png_rgb((dir / "rgb" / (n + ".png")).string());
      f.gt_depth = read_png_depth16((dir / "depth" / (n + ".png")).string());

      for (const auto& jb : load_json(dir / "boxes" / (n + ".json"))) {
        Box3D b;
        auto c = jb.at("center").get<std::vector<double>>();
        auto sz = jb.at("size").get<std::vector<double>>();
        b.center = {c[0], c[1], c[2]};
        b.w = sz[0];
        b.l = sz[1];
        b.h = sz[2];
        b.yaw = jb.at("yaw");
        b.class_id = jb.at("class_id");
        f.boxes.push_back(b);
        f.instance_ids.push_back(jb.at("instance_id"));
      }
      seq.frames.push_back(std::move(f));

      PointCloud pc;
      const json jl = load_json(dir / "lidar" / (n + ".json"));
      pc.world_frame = jl.at("frame") == "world";
      for (const auto& jp : jl.at("points"))
        pc.points.push_back({jp[0], jp[1], jp[2]});
      seq.clouds.push_back(std::move(pc));
    }
    out.push_back(std::move(seq));
  }
  return out;
}

}  // namespace mono3d
