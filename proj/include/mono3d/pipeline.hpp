#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "mono3d/detector.hpp"
#include "mono3d/metrics.hpp"

// Experiment orchestration: the ablation matrix (strategies E1-E6), the loss
// heterogeneity report, and the lambda sensitivity sweep. Every run directory
// is self-contained (config copy, dataset fingerprint, checkpoints, reports)
// and bit-reproducible for a fixed config + seed.

namespace mono3d {

// Thrown when a pipeline stage fails; carries the stage name so the CLI can
// report it and exit nonzero.
struct StageError : std::runtime_error {
  std::string stage;
  StageError(const std::string& st, const std::string& msg)
      : std::runtime_error("stage '" + st + "' failed: " + msg), stage(st) {}
};

// Strategy matrix:
//   E1 det_only | E2 lidar | E3/E4 selfsup single-stage (E4 + ignore close)
//   E5/E6 pseudo two-stage (E6 + ignore close)
struct ExperimentConfig {
  std::string strategy = "E1";

  // dataset
  int train_sequences = 40;
  int frames_per_sequence = 50;
  int eval_sequences = 10;
  int eval_frames_per_sequence = 50;
  uint64_t data_seed = 9000;
  int image_width = 96, image_height = 64;
  double focal = 110.0;

  // training schedule
  std::vector<uint64_t> seeds = {1, 2, 3};
  double lambda_depth = 0.45;
  int det_steps = 1500, det_batch = 2;
  double det_lr = 2e-3;
  int det_channels = 12, det_head_layers = 2;
  int depth_steps = 600, depth_batch = 4;
  double depth_lr = 2e-4;

  // "ignore close" placement: 2 (default) masks the depth supervision targets
  // in the multi-task stage; 1 masks the photometric loss of the
  // self-supervised stage instead.
  int ignore_close_stage = 2;
  double ignore_close_dist = kIgnoreCloseDefault;

  std::string out_dir = "run";

  void validate() const;
  TrainMode mode() const;          // strategy -> supervision regime
  bool ignore_close() const;       // true for E4 / E6
  CameraIntrinsics intrinsics() const;

  // documented key = value text format ('#' comments, unknown keys rejected)
  std::string to_text() const;
  static ExperimentConfig from_text(const std::string& text);
  static ExperimentConfig load(const std::string& path);
};

// ---- dataset ----

// Deterministic synthetic benchmark; the eval split draws from an independent
// seed stream so train/eval worlds never coincide.
std::vector<Sequence> generate_benchmark(const ExperimentConfig& cfg, bool eval_split);

// Order-sensitive FNV-1a hash over world boxes, trajectories and image bytes.
std::string dataset_fingerprint(const std::vector<Sequence>& data);

// ---- experiment runs ----

struct SeedResult {
  uint64_t seed = 0;
  MetricsReport report;
};

struct ExperimentSummary {
  std::string strategy;
  std::vector<SeedResult> per_seed;
  double map_mean = 0, map_std = 0;
  double nds_mean = 0, nds_std = 0;

  std::string to_json() const;
};

// Runs inference over every eval frame and scores against the frame boxes.
MetricsReport evaluate_detector(const DetectorNet<float>& net,
                                const std::vector<Sequence>& eval_data);

// Full pipeline for cfg.strategy: dataset -> (stage-I depth + pseudo labels
// for E5/E6) -> detector training -> evaluation, once per seed. Writes
// config.txt, fingerprint.txt, per-seed checkpoints/reports/loss plots and
// summary.json under cfg.out_dir. Throws StageError on any stage failure.
ExperimentSummary run_experiment(const ExperimentConfig& cfg);

// ---- heterogeneity report ----

struct HeterogeneityStats {
  double l1_mean = 0, l1_std = 0;        // |pred - gt| over valid gt pixels
  double photo_mean = 0, photo_std = 0;  // photometric map over covered pixels
  long l1_pixels = 0, photo_pixels = 0;
};

// Perturbs the frame's ground-truth depth by depth_offset everywhere and
// contrasts the per-pixel distance loss with the per-pixel photometric loss.
// When out_dir is non-empty, writes a side-by-side map image and a JSON stats
// file there.
HeterogeneityStats heterogeneity_report(const Frame& target,
                                        const std::vector<Image>& contexts,
                                        const std::vector<Pose>& poses_t_to_s,
                                        double depth_offset,
                                        const std::string& out_dir = "");

// ---- lambda sweep ----

struct LambdaRow {
  double lambda = 0;
  double map_mean = 0, map_std = 0;
  double nds_mean = 0, nds_std = 0;
};

// Trains cfg.strategy once per (lambda, seed) and tabulates mean/std metrics,
// sorted by lambda ascending. Empty `values` defaults to {0, 0.45, 10}.
std::vector<LambdaRow> lambda_sweep(const ExperimentConfig& cfg,
                                    std::vector<double> values = {});

std::string lambda_table(const std::vector<LambdaRow>& rows);

}  // namespace mono3d
