#include "mono3d/pipeline.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace mono3d {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- config ----

void ExperimentConfig::validate() const {
  static const std::set<std::string> known = {"E1", "E2", "E3", "E4", "E5", "E6"};
  if (!known.count(strategy))
    throw std::invalid_argument("config: unknown strategy '" + strategy + "'");
  if (train_sequences < 1 || frames_per_sequence < 2 || eval_sequences < 1 ||
      eval_frames_per_sequence < 1)
    throw std::invalid_argument("config: dataset sizes must be positive (>=2 frames/seq)");
  if (image_width % 32 != 0 || image_height % 32 != 0)
    throw std::invalid_argument("config: image size must be divisible by 32");
  if (focal <= 0) throw std::invalid_argument("config: focal must be > 0");
  if (seeds.empty()) throw std::invalid_argument("config: at least one seed required");
  if (lambda_depth < 0) throw std::invalid_argument("config: lambda_depth must be >= 0");
  if (det_steps < 1 || det_batch < 1 || depth_steps < 1 || depth_batch < 1)
    throw std::invalid_argument("config: step/batch counts must be positive");
  if (det_lr <= 0 || depth_lr <= 0)
    throw std::invalid_argument("config: learning rates must be > 0");
  if (ignore_close_stage != 1 && ignore_close_stage != 2)
    throw std::invalid_argument("config: ignore_close_stage must be 1 or 2");
  if (ignore_close_dist < 0)
    throw std::invalid_argument("config: ignore_close_dist must be >= 0");
  if (out_dir.empty()) throw std::invalid_argument("config: out_dir required");
}

TrainMode ExperimentConfig::mode() const {
  if (strategy == "E1") return TrainMode::kDetOnly;
  if (strategy == "E2") return TrainMode::kLidar;
  if (strategy == "E3" || strategy == "E4") return TrainMode::kSelfsupSingleStage;
  return TrainMode::kPseudoTwoStage;
}

bool ExperimentConfig::ignore_close() const {
  return strategy == "E4" || strategy == "E6";
}

CameraIntrinsics ExperimentConfig::intrinsics() const {
  return CameraIntrinsics(focal, focal, image_width / 2.0, image_height / 2.0,
                          image_width, image_height);
}

std::string ExperimentConfig::to_text() const {
  std::ostringstream os;
  os << "# experiment configuration (key = value)\n";
  os << "strategy = " << strategy << "\n";
  os << "train_sequences = " << train_sequences << "\n";
  os << "frames_per_sequence = " << frames_per_sequence << "\n";
  os << "eval_sequences = " << eval_sequences << "\n";
  os << "eval_frames_per_sequence = " << eval_frames_per_sequence << "\n";
  os << "data_seed = " << data_seed << "\n";
  os << "image_width = " << image_width << "\n";
  os << "image_height = " << image_height << "\n";
  os << "focal = " << focal << "\n";
  os << "seeds = ";
  for (std::size_t i = 0; i < seeds.size(); ++i) os << (i ? "," : "") << seeds[i];
  os << "\n";
  os << "lambda_depth = " << lambda_depth << "\n";
  os << "det_steps = " << det_steps << "\n";
  os << "det_batch = " << det_batch << "\n";
  os << "det_lr = " << det_lr << "\n";
  os << "det_channels = " << det_channels << "\n";
  os << "det_head_layers = " << det_head_layers << "\n";
  os << "depth_steps = " << depth_steps << "\n";
  os << "depth_batch = " << depth_batch << "\n";
  os << "depth_lr = " << depth_lr << "\n";
  os << "ignore_close_stage = " << ignore_close_stage << "\n";
  os << "ignore_close_dist = " << ignore_close_dist << "\n";
  os << "out = " << out_dir << "\n";
  return os.str();
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<uint64_t> parse_seed_list(const std::string& s) {
  std::vector<uint64_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(std::stoull(item));
  }
  return out;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_text(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    try {
      if (key == "strategy") cfg.strategy = val;
      else if (key == "train_sequences") cfg.train_sequences = std::stoi(val);
      else if (key == "frames_per_sequence") cfg.frames_per_sequence = std::stoi(val);
      else if (key == "eval_sequences") cfg.eval_sequences = std::stoi(val);
      else if (key == "eval_frames_per_sequence") cfg.eval_frames_per_sequence = std::stoi(val);
      else if (key == "data_seed") cfg.data_seed = std::stoull(val);
      else if (key == "image_width") cfg.image_width = std::stoi(val);
      else if (key == "image_height") cfg.image_height = std::stoi(val);
      else if (key == "focal") cfg.focal = std::stod(val);
      else if (key == "seeds") cfg.seeds = parse_seed_list(val);
      else if (key == "lambda_depth") cfg.lambda_depth = std::stod(val);
      else if (key == "det_steps") cfg.det_steps = std::stoi(val);
      else if (key == "det_batch") cfg.det_batch = std::stoi(val);
      else if (key == "det_lr") cfg.det_lr = std::stod(val);
      else if (key == "det_channels") cfg.det_channels = std::stoi(val);
      else if (key == "det_head_layers") cfg.det_head_layers = std::stoi(val);
      else if (key == "depth_steps") cfg.depth_steps = std::stoi(val);
      else if (key == "depth_batch") cfg.depth_batch = std::stoi(val);
      else if (key == "depth_lr") cfg.depth_lr = std::stod(val);
      else if (key == "ignore_close_stage") cfg.ignore_close_stage = std::stoi(val);
      else if (key == "ignore_close_dist") cfg.ignore_close_dist = std::stod(val);
      else if (key == "out") cfg.out_dir = val;
      else
        throw std::invalid_argument("unknown key '" + key + "'");
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": " +
                                  e.what());
    }
  }
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("config: cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return from_text(ss.str());
}

// ---- dataset ----

std::vector<Sequence> generate_benchmark(const ExperimentConfig& cfg, bool eval_split) {
  const CameraIntrinsics k = cfg.intrinsics();
  const int n_seq = eval_split ? cfg.eval_sequences : cfg.train_sequences;
  const int n_frames = eval_split ? cfg.eval_frames_per_sequence : cfg.frames_per_sequence;
  // disjoint seed streams for the two splits
  const uint64_t base = cfg.data_seed + (eval_split ? 0x9e3779b97f4a7c15ULL : 0);
  std::vector<Sequence> out;
  out.reserve(n_seq);
  for (int i = 0; i < n_seq; ++i) {
    const uint64_t s = base + uint64_t(i) * 2654435761ULL;
    World world = sample_world(WorldConfig{}, s);
    auto traj = sample_trajectory(n_frames, s ^ 0xabcdef12ULL);
    out.push_back(generate_sequence(world, traj, k));
  }
  return out;
}

namespace {

struct Fnv1a {
  uint64_t h = 14695981039346656037ULL;
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  }
  void f64(double v) { bytes(&v, sizeof v); }
  void i64(long long v) { bytes(&v, sizeof v); }
};

}  // namespace

std::string dataset_fingerprint(const std::vector<Sequence>& data) {
  Fnv1a fnv;
  fnv.i64(static_cast<long long>(data.size()));
  for (const Sequence& seq : data) {
    fnv.i64(static_cast<long long>(seq.world.obstacles.size()));
    for (const Box3D& b : seq.world.obstacles) {
      for (double v : b.center) fnv.f64(v);
      fnv.f64(b.w);
      fnv.f64(b.l);
      fnv.f64(b.h);
      fnv.f64(b.yaw);
      fnv.i64(b.class_id);
    }
    for (const Pose& p : seq.trajectory) {
      for (double v : p.rotation) fnv.f64(v);
      for (double v : p.translation) fnv.f64(v);
    }
    for (const Frame& f : seq.frames)
      fnv.bytes(f.image.v.data(), f.image.v.size() * sizeof(double));
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv.h));
  return buf;
}

// ---- helpers ----

namespace {

template <class F>
auto run_stage(const std::string& name, F&& f) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << text;
}

// minimal static plot: loss curve as a polyline on a white canvas
void write_curve_png(const std::string& path, const std::vector<double>& ys) {
  const int h = 120, w = 240;
  Image img({3, h, w}, 1.0);
  if (!ys.empty()) {
    double lo = ys[0], hi = ys[0];
    for (double y : ys) {
      lo = std::min(lo, y);
      hi = std::max(hi, y);
    }
    const double span = std::max(hi - lo, 1e-12);
    int prev = -1;
    for (int x = 0; x < w; ++x) {
      const std::size_t i = std::min<std::size_t>(
          ys.size() - 1, std::size_t(double(x) / w * ys.size()));
      const int py = std::clamp(int((1.0 - (ys[i] - lo) / span) * (h - 1)), 0, h - 1);
      const int from = prev < 0 ? py : std::min(prev, py);
      const int to = prev < 0 ? py : std::max(prev, py);
      for (int y = from; y <= to; ++y) {
        img.at(0, y, x) = 0.1;
        img.at(1, y, x) = 0.3;
        img.at(2, y, x) = 0.8;
      }
      prev = py;
    }
  }
  write_png_rgb(path, img);
}

void mean_std(const std::vector<double>& v, double* mean, double* sd) {
  double m = 0;
  for (double x : v) m += x;
  m /= std::max<std::size_t>(1, v.size());
  double var = 0;
  for (double x : v) var += (x - m) * (x - m);
  var /= std::max<std::size_t>(1, v.size());
  *mean = m;
  *sd = std::sqrt(var);
}

std::string seed_dir_name(uint64_t seed) { return "seed_" + std::to_string(seed); }

}  // namespace

// ---- evaluation ----

MetricsReport evaluate_detector(const DetectorNet<float>& net,
                                const std::vector<Sequence>& eval_data) {
  const CameraIntrinsics& k = net.intrinsics;
  auto levels = build_anchor_sets(net.cfg, k.height, k.width);
  FrameBoxes dets, gts;
  for (const Sequence& seq : eval_data)
    for (const Frame& f : seq.frames) {
      dets.push_back(infer(net, f.image, levels));
      gts.push_back(f.boxes);
    }
  std::vector<std::string> names;
  for (const ClassPrior& p : net.cfg.priors()) names.push_back(p.name);
  return evaluate(dets, gts, names);
}

// ---- experiment run ----

namespace {

// trains one detector for (cfg, seed) and returns it with its eval report;
// assumes out dir exists. pseudo-labels/checkpoints land in seed_dir.
MetricsReport run_one_seed(const ExperimentConfig& cfg,
                           const std::vector<Sequence>& train,
                           const std::vector<Sequence>& eval_data, uint64_t seed,
                           const std::string& seed_dir) {
  const TrainMode mode = cfg.mode();

  DetectorConfig dcfg;
  dcfg.channels = cfg.det_channels;
  dcfg.head_layers = cfg.det_head_layers;

  DetTrainConfig tcfg;
  tcfg.steps = cfg.det_steps;
  tcfg.batch = cfg.det_batch;
  tcfg.lr = cfg.det_lr;
  tcfg.lambda_depth = cfg.lambda_depth;
  tcfg.ignore_close_dist = cfg.ignore_close_dist;
  tcfg.seed = seed;

  std::string pseudo_root;
  if (mode == TrainMode::kPseudoTwoStage) {
    DepthTrainConfig dtc;
    dtc.steps = cfg.depth_steps;
    dtc.batch = cfg.depth_batch;
    dtc.lr = cfg.depth_lr;
    dtc.seed = seed;
    if (cfg.ignore_close() && cfg.ignore_close_stage == 1) {
      dtc.ignore_close_photometric = true;
      dtc.ignore_close_dist = cfg.ignore_close_dist;
    }
    auto [dnet, dcurve] = run_stage("train-depth", [&] {
      return train_depth_stage1<float>(train, dtc);
    });
    write_curve_png(seed_dir + "/depth_loss.png", dcurve.loss);
    pseudo_root = seed_dir + "/pseudo";
    run_stage("make-pseudo", [&] {
      return generate_pseudo_labels(dnet, train, pseudo_root);
    });
    if (cfg.ignore_close() && cfg.ignore_close_stage == 2) tcfg.ignore_close = true;
  } else if (mode == TrainMode::kSelfsupSingleStage && cfg.ignore_close()) {
    // single-stage has no depth targets to mask; ignore-close acts on the
    // photometric loss there under either placement
    tcfg.ignore_close_photometric = true;
  }

  auto [net, rec] = run_stage("train-det", [&] {
    return train_detector<float>(train, mode, dcfg, tcfg, pseudo_root);
  });
  write_curve_png(seed_dir + "/det_loss.png", rec.total);
  save_checkpoint(net, tcfg.steps, seed_dir + "/detector.json");

  return run_stage("eval", [&] {
    auto report = evaluate_detector(net, eval_data);
    write_text(seed_dir + "/report.json", report.to_json());
    write_text(seed_dir + "/report.txt", report.table());
    return report;
  });
}

ExperimentSummary summarize(const std::string& strategy,
                            std::vector<SeedResult> per_seed) {
  ExperimentSummary s;
  s.strategy = strategy;
  std::vector<double> maps, ndss;
  for (const auto& r : per_seed) {
    maps.push_back(r.report.map);
    ndss.push_back(r.report.nds8);
  }
  s.per_seed = std::move(per_seed);
  mean_std(maps, &s.map_mean, &s.map_std);
  mean_std(ndss, &s.nds_mean, &s.nds_std);
  return s;
}

}  // namespace

ExperimentSummary run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  fs::create_directories(cfg.out_dir);
  write_text(cfg.out_dir + "/config.txt", cfg.to_text());

  auto train = run_stage("gen-data", [&] { return generate_benchmark(cfg, false); });
  auto eval_data = run_stage("gen-data", [&] { return generate_benchmark(cfg, true); });
  write_text(cfg.out_dir + "/fingerprint.txt",
             "train " + dataset_fingerprint(train) + "\neval " +
                 dataset_fingerprint(eval_data) + "\n");

  std::vector<SeedResult> per_seed;
  for (uint64_t seed : cfg.seeds) {
    const std::string seed_dir = cfg.out_dir + "/" + seed_dir_name(seed);
    fs::create_directories(seed_dir);
    SeedResult r;
    r.seed = seed;
    r.report = run_one_seed(cfg, train, eval_data, seed, seed_dir);
    per_seed.push_back(std::move(r));
  }

  auto summary = summarize(cfg.strategy, std::move(per_seed));
  write_text(cfg.out_dir + "/summary.json", summary.to_json());
  return summary;
}

std::string ExperimentSummary::to_json() const {
  json j;
  j["format"] = "mono3d-summary-v1";
  j["strategy"] = strategy;
  j["map_mean"] = map_mean;
  j["map_std"] = map_std;
  j["nds_mean"] = nds_mean;
  j["nds_std"] = nds_std;
  j["per_seed"] = json::array();
  for (const auto& r : per_seed) {
    json e;
    e["seed"] = r.seed;
    e["report"] = json::parse(r.report.to_json());
    j["per_seed"].push_back(std::move(e));
  }
  return j.dump(2);
}

// ---- heterogeneity report ----

HeterogeneityStats heterogeneity_report(const Frame& target,
                                        const std::vector<Image>& contexts,
                                        const std::vector<Pose>& poses_t_to_s,
                                        double depth_offset,
                                        const std::string& out_dir) {
  if (contexts.empty())
    throw std::invalid_argument("heterogeneity_report: context frames required");
  if (contexts.size() != poses_t_to_s.size())
    throw std::invalid_argument("heterogeneity_report: contexts/poses mismatch");
  const CameraIntrinsics& k = target.intrinsics;
  const int h = k.height, w = k.width;
  const std::size_t npix = std::size_t(h) * w;

  // perturbed prediction; pixels without gt depth get a far fill value so the
  // warp stays defined, but are excluded from every statistic
  Tensor<double> pred({1, h, w}, kFarClip);
  std::vector<double> l1(npix, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (target.gt_depth.is_valid(y, x)) {
        const double d = std::max(0.05, target.gt_depth.at(y, x) + depth_offset);
        pred.at(0, y, x) = d;
        l1[std::size_t(y) * w + x] = std::abs(d - target.gt_depth.at(y, x));
      }

  auto depth_var = leaf(pred);
  PhotometricConfig pcfg;
  auto [loss, map] = photometric_loss(target.image, contexts, depth_var,
                                      poses_t_to_s, k, pcfg);

  // coverage: warp-valid in at least one context
  std::vector<uint8_t> covered(npix, 0);
  for (std::size_t s = 0; s < contexts.size(); ++s) {
    auto [synth, mask] = inverse_warp(contexts[s], depth_var, poses_t_to_s[s], k);
    for (std::size_t i = 0; i < npix; ++i) covered[i] |= mask[i];
  }

  HeterogeneityStats st;
  std::vector<double> l1_vals, ph_vals;
  for (std::size_t i = 0; i < npix; ++i) {
    if (!target.gt_depth.valid[i]) continue;
    l1_vals.push_back(l1[i]);
    if (covered[i]) ph_vals.push_back(map->val.v[i]);
  }
  st.l1_pixels = long(l1_vals.size());
  st.photo_pixels = long(ph_vals.size());
  mean_std(l1_vals, &st.l1_mean, &st.l1_std);
  mean_std(ph_vals, &st.photo_mean, &st.photo_std);

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    // side-by-side panel: RGB | distance-loss map | photometric map
    Image panel({3, h, 3 * w}, 0.0);
    double l1_max = 1e-12, ph_max = 1e-12;
    for (std::size_t i = 0; i < npix; ++i) {
      l1_max = std::max(l1_max, l1[i]);
      ph_max = std::max(ph_max, map->val.v[i]);
    }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const std::size_t i = std::size_t(y) * w + x;
        for (int c = 0; c < 3; ++c) {
          panel.at(c, y, x) = target.image.at(c, y, x);
          panel.at(c, y, w + x) = l1[i] / l1_max;
          panel.at(c, y, 2 * w + x) = map->val.v[i] / ph_max;
        }
      }
    write_png_rgb(out_dir + "/heterogeneity.png", panel);
    json j;
    j["depth_offset"] = depth_offset;
    j["l1_mean"] = st.l1_mean;
    j["l1_std"] = st.l1_std;
    j["l1_pixels"] = st.l1_pixels;
    j["photo_mean"] = st.photo_mean;
    j["photo_std"] = st.photo_std;
    j["photo_pixels"] = st.photo_pixels;
    write_text(out_dir + "/heterogeneity.json", j.dump(2));
  }
  return st;
}

// ---- lambda sweep ----

std::vector<LambdaRow> lambda_sweep(const ExperimentConfig& cfg,
                                    std::vector<double> values) {
  cfg.validate();
  if (cfg.mode() == TrainMode::kDetOnly)
    throw std::invalid_argument("lambda_sweep: strategy must provide depth supervision");
  if (values.empty()) values = {0.0, 0.45, 10.0};
  std::sort(values.begin(), values.end());
  values.erase(std::unique(values.begin(), values.end()), values.end());

  std::vector<LambdaRow> rows;
  for (double lam : values) {
    ExperimentConfig c = cfg;
    c.lambda_depth = lam;
    std::ostringstream dir;
    dir << cfg.out_dir << "/lambda_" << lam;
    c.out_dir = dir.str();
    auto summary = run_experiment(c);
    LambdaRow row;
    row.lambda = lam;
    row.map_mean = summary.map_mean;
    row.map_std = summary.map_std;
    row.nds_mean = summary.nds_mean;
    row.nds_std = summary.nds_std;
    rows.push_back(row);
  }
  write_text(cfg.out_dir + "/lambda_table.txt", lambda_table(rows));
  return rows;
}

std::string lambda_table(const std::vector<LambdaRow>& rows) {
  std::ostringstream os;
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-10s %-18s %-18s\n", "lambda", "mAP (mean+/-std)",
                "NDS (mean+/-std)");
  os << buf;
  for (const LambdaRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%-10.4g %-8.4f +/- %-6.4f %-8.4f +/- %-6.4f\n",
                  r.lambda, r.map_mean, r.map_std, r.nds_mean, r.nds_std);
    os << buf;
  }
  return os.str();
}

}  // namespace mono3d
