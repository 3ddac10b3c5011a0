#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "mono3d/metrics.hpp"

using namespace mono3d;

namespace {

Box3D make_box(double x, double z, double score, int cls = 0, double yaw = 0,
               double w = 2, double l = 2, double h = 2) {
  Box3D b;
  b.center = {x, 0, z};
  b.w = w;
  b.l = l;
  b.h = h;
  b.yaw = yaw;
  b.class_id = cls;
  b.score = score;
  return b;
}

// test-local oracle: explicit P-R enumeration with the same greedy matching,
// written independently of the library's envelope code
double oracle_nuscenes_ap(const FrameBoxes& dets, const FrameBoxes& gts,
                          int cls, double thr) {
  long n_gt = 0;
  for (const auto& f : gts)
    for (const auto& g : f) n_gt += g.class_id == cls;
  if (n_gt == 0) return 0;
  struct D {
    double score;
    int frame, idx;
  };
  std::vector<D> order;
  for (int f = 0; f < int(dets.size()); ++f)
    for (int i = 0; i < int(dets[f].size()); ++i)
      if (dets[f][i].class_id == cls) order.push_back({dets[f][i].score, f, i});
  std::sort(order.begin(), order.end(),
            [](const D& a, const D& b) { return a.score > b.score; });
  std::vector<std::vector<bool>> used(gts.size());
  for (std::size_t f = 0; f < gts.size(); ++f) used[f].assign(gts[f].size(), false);
  std::vector<double> prec, rec;
  long tp = 0, fp = 0;
  for (const D& d : order) {
    const Box3D& det = dets[d.frame][d.idx];
    int best = -1;
    double bd = thr;
    for (int g = 0; g < int(gts[d.frame].size()); ++g) {
      if (used[d.frame][g] || gts[d.frame][g].class_id != cls) continue;
      const double dist = std::hypot(det.center[0] - gts[d.frame][g].center[0],
                                     det.center[2] - gts[d.frame][g].center[2]);
      if (dist <= bd) {
        bd = dist;
        best = g;
      }
    }
    if (best >= 0) {
      used[d.frame][best] = true;
      ++tp;
    } else {
      ++fp;
    }
    prec.push_back(double(tp) / (tp + fp));
    rec.push_back(double(tp) / n_gt);
  }
  double acc = 0;
  int n_pts = 0;
  for (int i = 11; i <= 100; ++i) {
    const double r = i / 100.0;
    double p = 0;
    for (std::size_t j = 0; j < prec.size(); ++j)
      if (rec[j] >= r - 1e-12) p = std::max(p, prec[j]);
    acc += std::max(0.0, p - 0.1);
    ++n_pts;
  }
  return acc / n_pts / 0.9;
}

double oracle_kitti_ap(const FrameBoxes& dets, const FrameBoxes& gts, int cls,
                       double thr, KittiMode mode) {
  long n_gt = 0;
  for (const auto& f : gts)
    for (const auto& g : f) n_gt += g.class_id == cls;
  if (n_gt == 0) return 0;
  struct D {
    double score;
    int frame, idx;
  };
  std::vector<D> order;
  for (int f = 0; f < int(dets.size()); ++f)
    for (int i = 0; i < int(dets[f].size()); ++i)
      if (dets[f][i].class_id == cls) order.push_back({dets[f][i].score, f, i});
  std::sort(order.begin(), order.end(),
            [](const D& a, const D& b) { return a.score > b.score; });
  std::vector<std::vector<bool>> used(gts.size());
  for (std::size_t f = 0; f < gts.size(); ++f) used[f].assign(gts[f].size(), false);
  std::vector<double> prec, rec;
  long tp = 0, fp = 0;
  for (const D& d : order) {
    const Box3D& det = dets[d.frame][d.idx];
    int best = -1;
    double bi = thr;
    for (int g = 0; g < int(gts[d.frame].size()); ++g) {
      if (used[d.frame][g] || gts[d.frame][g].class_id != cls) continue;
      const double v = mode == KittiMode::k3D ? iou_3d(det, gts[d.frame][g])
                                              : iou_bev(det, gts[d.frame][g]);
      if (v >= bi) {
        bi = v;
        best = g;
      }
    }
    if (best >= 0) {
      used[d.frame][best] = true;
      ++tp;
    } else {
      ++fp;
    }
    prec.push_back(double(tp) / (tp + fp));
    rec.push_back(double(tp) / n_gt);
  }
  double acc = 0;
  for (int i = 1; i <= 40; ++i) {
    const double r = i / 40.0;
    double p = 0;
    for (std::size_t j = 0; j < prec.size(); ++j)
      if (rec[j] >= r - 1e-12) p = std::max(p, prec[j]);
    acc += p;
  }
  return acc / 40.0;
}

FrameBoxes random_scene(std::mt19937_64& rng, int frames, int max_boxes,
                        bool scored) {
  std::uniform_real_distribution<double> ux(-8, 8), uz(3, 15), us(0, 1);
  std::uniform_real_distribution<double> uyaw(-M_PI, M_PI), usz(0.8, 3.0);
  std::uniform_int_distribution<int> ucls(0, 2), un(0, max_boxes);
  FrameBoxes out(frames);
  for (auto& f : out) {
    const int n = un(rng);
    for (int i = 0; i < n; ++i)
      f.push_back(make_box(ux(rng), uz(rng), scored ? us(rng) : -1, ucls(rng),
                           uyaw(rng), usz(rng), usz(rng), usz(rng)));
  }
  return out;
}

}  // namespace

TEST_CASE("ap_center_distance basics") {
  FrameBoxes gts = {{make_box(0, 10, -1)}};
  FrameBoxes perfect = {{make_box(0, 10, 0.9)}};
  CHECK(ap_center_distance(perfect, gts, 0, 2.0) == doctest::Approx(1.0));

  FrameBoxes none = {{}};
  CHECK(ap_center_distance(none, gts, 0, 2.0) == doctest::Approx(0.0));

  // no gts and no dets -> defined as 0
  CHECK(ap_center_distance(none, none, 0, 2.0) == doctest::Approx(0.0));

  // far-off detection is a false positive
  FrameBoxes far = {{make_box(20, 10, 0.9)}};
  CHECK(ap_center_distance(far, gts, 0, 2.0) == doctest::Approx(0.0));

  // class mismatch never matches
  FrameBoxes wrong_cls = {{make_box(0, 10, 0.9, 1)}};
  CHECK(ap_center_distance(wrong_cls, gts, 0, 2.0) == doctest::Approx(0.0));

  CHECK_THROWS(ap_center_distance(perfect, FrameBoxes{}, 0, 2.0));
}

TEST_CASE("ap matches brute-force oracle on random scenes") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    auto gts = random_scene(rng, 3, 4, false);
    auto dets = random_scene(rng, 3, 4, true);
    for (double thr : {0.5, 1.0, 2.0, 4.0})
      for (int cls = 0; cls < 3; ++cls)
        CHECK(ap_center_distance(dets, gts, cls, thr) ==
              doctest::Approx(oracle_nuscenes_ap(dets, gts, cls, thr)).epsilon(1e-12));
  }
}

TEST_CASE("ap monotonicity and tie invariance") {
  std::mt19937_64 rng(11);
  auto gts = random_scene(rng, 2, 4, false);
  auto dets = random_scene(rng, 2, 4, true);
  // give two detections identical scores, permute them, AP unchanged
  if (dets[0].size() >= 2) {
    dets[0][0].score = dets[0][1].score = 0.5;
    const double before = ap_center_distance(dets, gts, 0, 2.0);
    std::swap(dets[0][0], dets[0][1]);
    CHECK(ap_center_distance(dets, gts, 0, 2.0) == doctest::Approx(before).epsilon(1e-15));
  }

  // adding a top-scored true positive never lowers AP
  FrameBoxes gts2 = {{make_box(0, 10, -1), make_box(5, 10, -1)}};
  FrameBoxes some = {{make_box(0, 10, 0.6), make_box(20, 10, 0.5)}};
  const double base = ap_center_distance(some, gts2, 0, 2.0);
  FrameBoxes more = some;
  more[0].push_back(make_box(5, 10, 0.9));
  CHECK(ap_center_distance(more, gts2, 0, 2.0) >= base);

  // removing a false positive never lowers AP
  FrameBoxes fewer = {{some[0][0]}};
  CHECK(ap_center_distance(fewer, gts2, 0, 2.0) >= base);
}

TEST_CASE("tp_errors") {
  FrameBoxes gts = {{make_box(0, 10, -1, 0, 0.3)}};
  FrameBoxes perfect = {{make_box(0, 10, 0.9, 0, 0.3)}};
  auto e = tp_errors(perfect, gts, 0);
  CHECK(e.valid);
  CHECK(e.ate == doctest::Approx(0.0));
  CHECK(e.ase == doctest::Approx(0.0));
  CHECK(e.aoe == doctest::Approx(0.0));

  // same size, yaw off by pi/2
  FrameBoxes rot = {{make_box(0, 10, 0.9, 0, 0.3 + M_PI / 2)}};
  e = tp_errors(rot, gts, 0);
  CHECK(e.aoe == doctest::Approx(M_PI / 2));
  CHECK(e.ase == doctest::Approx(0.0));

  // sizes (2,2,2) vs (1,1,1): ASE = 1 - 1/8
  FrameBoxes small_gt = {{make_box(0, 10, -1, 0, 0, 1, 1, 1)}};
  FrameBoxes big_det = {{make_box(0, 10, 0.9, 0, 0, 2, 2, 2)}};
  e = tp_errors(big_det, small_gt, 0);
  CHECK(e.ase == doctest::Approx(1.0 - 1.0 / 8.0));

  // translation error within the 2 m gate
  FrameBoxes shifted = {{make_box(1.5, 10, 0.9)}};
  e = tp_errors(shifted, gts, 0);
  CHECK(e.ate == doctest::Approx(1.5));

  // no TPs: worst-case defaults, flagged invalid
  FrameBoxes far = {{make_box(30, 10, 0.9)}};
  e = tp_errors(far, gts, 0);
  CHECK_FALSE(e.valid);
  CHECK(e.ate == doctest::Approx(1.0));
  CHECK(e.ase == doctest::Approx(1.0));
  CHECK(e.aoe == doctest::Approx(1.0));
}

TEST_CASE("nds formula") {
  TPErrors zero;
  zero.ate = zero.ase = zero.aoe = 0;
  zero.valid = true;
  CHECK(nds(1.0, zero) == doctest::Approx(1.0));

  TPErrors worst;  // every error saturates
  worst.ate = 10;
  worst.ase = 2;
  worst.aoe = 5;
  CHECK(nds(0.0, worst) == doctest::Approx(0.0));

  // mAP 0.4, normalized errors (0.5, 0.25, 0.3) -> (2 + 0.5 + 0.75 + 0.7)/8
  TPErrors mid;
  mid.ate = 0.5 * kAteNorm;
  mid.ase = 0.25;
  mid.aoe = 0.3 * M_PI;
  CHECK(nds(0.4, mid) == doctest::Approx(0.49375));

  // affine in mAP with slope 5/8
  const double d = nds(0.8, mid) - nds(0.4, mid);
  CHECK(d == doctest::Approx(0.4 * 5.0 / 8.0));

  CHECK_THROWS(nds(1.5, mid));
}

TEST_CASE("kitti_ap basics") {
  FrameBoxes gts = {{make_box(0, 10, -1)}};
  FrameBoxes perfect = {{make_box(0, 10, 0.9)}};
  CHECK(kitti_ap(perfect, gts, 0, 0.5, KittiMode::k3D) == doctest::Approx(1.0));
  CHECK(kitti_ap(perfect, gts, 0, 0.5, KittiMode::kBEV) == doctest::Approx(1.0));

  // IoU just below the threshold -> 0
  // 2x2x2 boxes, x-shift 1.0: inter 1*2*2=4, union 16-4=12, IoU = 1/3 < 0.5
  FrameBoxes low = {{make_box(1.0, 10, 0.9)}};
  CHECK(kitti_ap(low, gts, 0, 0.5, KittiMode::k3D) == doctest::Approx(0.0));
  // but passes at a 0.3 threshold
  CHECK(kitti_ap(low, gts, 0, 0.3, KittiMode::k3D) == doctest::Approx(1.0));

  CHECK(kitti_ap(FrameBoxes{{}}, gts, 0, 0.5, KittiMode::k3D) == doctest::Approx(0.0));
}

TEST_CASE("kitti_ap matches brute-force oracle") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 30; ++trial) {
    auto gts = random_scene(rng, 2, 4, false);
    auto dets = random_scene(rng, 2, 4, true);
    for (auto mode : {KittiMode::k3D, KittiMode::kBEV})
      for (int cls = 0; cls < 3; ++cls)
        CHECK(kitti_ap(dets, gts, cls, 0.3, mode) ==
              doctest::Approx(oracle_kitti_ap(dets, gts, cls, 0.3, mode)).epsilon(1e-12));
  }
}

TEST_CASE("evaluate aggregates and serializes") {
  std::mt19937_64 rng(17);
  auto gts = random_scene(rng, 4, 5, false);
  FrameBoxes dets(gts.size());
  std::uniform_real_distribution<double> noise(-0.3, 0.3), us(0.5, 1.0);
  for (std::size_t f = 0; f < gts.size(); ++f)
    for (const auto& g : gts[f]) {
      Box3D d = g;
      d.center[0] += noise(rng);
      d.center[2] += noise(rng);
      d.score = us(rng);
      dets[f].push_back(d);
    }
  auto rep = evaluate(dets, gts, {"block", "slab", "tower"});
  CHECK(rep.map > 0.5);
  CHECK(rep.map <= 1.0);
  CHECK(rep.nds8 > 0.5);
  CHECK(rep.nds8 <= 1.0);
  CHECK(rep.ate < 0.5);
  for (const auto& cm : rep.per_class) {
    for (const auto& [thr, ap] : cm.ap_by_dist) {
      CHECK(ap >= 0.0);
      CHECK(ap <= 1.0);
    }
  }

  // JSON round trip
  auto text = rep.to_json();
  auto back = MetricsReport::from_json(text);
  CHECK(back.map == doctest::Approx(rep.map).epsilon(1e-12));
  CHECK(back.nds8 == doctest::Approx(rep.nds8).epsilon(1e-12));
  REQUIRE(back.per_class.size() == rep.per_class.size());
  for (std::size_t c = 0; c < rep.per_class.size(); ++c) {
    CHECK(back.per_class[c].ap_mean == doctest::Approx(rep.per_class[c].ap_mean));
    CHECK(back.per_class[c].kitti_ap3d ==
          doctest::Approx(rep.per_class[c].kitti_ap3d));
  }

  // fixed-width table mentions every class and the mean row
  auto tbl = rep.table();
  CHECK(tbl.find("block") != std::string::npos);
  CHECK(tbl.find("tower") != std::string::npos);
  CHECK(tbl.find("mean") != std::string::npos);

  // NDS affine-in-mAP property through the aggregate path
  TPErrors agg;
  agg.ate = rep.ate;
  agg.ase = rep.ase;
  agg.aoe = rep.aoe;
  CHECK(rep.nds8 == doctest::Approx(nds(rep.map, agg)).epsilon(1e-12));
}
