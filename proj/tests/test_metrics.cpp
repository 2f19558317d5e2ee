#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "test_support.hpp"

using namespace erfcond;

namespace {

using Poly = std::vector<Point2>;

// Pixel-center distance to densely sampled points along the polyline.
std::int64_t sampled_stroke_count(const Poly& pts, int h, int w, double stroke) {
  std::vector<Point2> dense;
  for (std::size_t s = 1; s < pts.size(); ++s) {
    const int n = 2000;
    for (int i = 0; i <= n; ++i) {
      const double t = static_cast<double>(i) / n;
      dense.push_back({pts[s - 1].x + t * (pts[s].x - pts[s - 1].x), pts[s - 1].y + t * (pts[s].y - pts[s - 1].y)});
    }
  }
  const double r2 = stroke * stroke / 4.0;
  std::int64_t count = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      bool in = false;
      for (const auto& p : dense) {
        const double dx = x + 0.5 - p.x, dy = y + 0.5 - p.y;
        if (dx * dx + dy * dy <= r2) {
          in = true;
          break;
        }
      }
      count += in;
    }
  return count;
}

// Maximum number of one-to-one pairs with IoU >= thr, by enumerating every
// assignment of predictions to distinct gts (or none).
std::int64_t exhaustive_max_matches(const std::vector<std::vector<double>>& iou, std::size_t ng, double thr) {
  std::int64_t best = 0;
  std::vector<bool> used(ng, false);
  auto rec = [&](auto&& self, std::size_t i, std::int64_t k) -> void {
    if (i == iou.size()) {
      best = std::max(best, k);
      return;
    }
    self(self, i + 1, k);
    for (std::size_t j = 0; j < ng; ++j) {
      if (used[j] || iou[i][j] < thr) continue;
      used[j] = true;
      self(self, i + 1, k + 1);
      used[j] = false;
    }
  };
  rec(rec, 0, 0);
  return best;
}

}  // namespace

TEST(Rasterize, HorizontalSegmentArea) {
  const auto m = rasterize_lane({{50, 100}, {150, 100}}, 200, 200, 30.0);
  const double area = 100.0 * 30.0 + std::numbers::pi * 15.0 * 15.0;
  EXPECT_NEAR(static_cast<double>(m.count()), area, 0.02 * area);
  EXPECT_EQ(m.count(), sampled_stroke_count({{50, 100}, {150, 100}}, 200, 200, 30.0));
}

TEST(Rasterize, MatchesSampledOracle) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> x(-10.0, 90.0), y(-10.0, 70.0);
  for (int trial = 0; trial < 6; ++trial) {
    Poly p{{x(rng), y(rng)}, {x(rng), y(rng)}, {x(rng), y(rng)}};
    const double stroke = trial % 2 ? 30.0 : 7.0;
    const auto m = rasterize_lane(p, 60, 80, stroke);
    const auto ref = sampled_stroke_count(p, 60, 80, stroke);
    // Dense sampling can only miss pixels right on the boundary.
    EXPECT_NEAR(static_cast<double>(m.count()), static_cast<double>(ref), 0.01 * ref + 2) << trial;
  }
}

TEST(Rasterize, SmallCases) {
  const auto tiny = rasterize_lane({{2.5, 3.5}, {3.5, 3.5}}, 8, 8, 1.0);
  EXPECT_EQ(tiny.count(), 2);
  EXPECT_EQ(tiny.pixels[3 * 8 + 2], 1);
  EXPECT_EQ(tiny.pixels[3 * 8 + 3], 1);
  EXPECT_EQ(rasterize_lane({{-100, -100}, {-50, -80}}, 20, 20).count(), 0);
  EXPECT_THROW(rasterize_lane({{1, 1}}, 20, 20), Error);
}

TEST(LaneIoU, Examples) {
  const auto a = rasterize_lane({{-100, 50}, {300, 50}}, 120, 200);
  const auto b = rasterize_lane({{-100, 65}, {300, 65}}, 120, 200);
  EXPECT_DOUBLE_EQ(lane_iou(a, b), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(lane_iou(a, a), 1.0);
  const auto far = rasterize_lane({{-100, 110}, {300, 110}}, 120, 200, 10.0);
  EXPECT_DOUBLE_EQ(lane_iou(a, far), 0.0);
  const LaneMask empty{120, 200, std::vector<std::uint8_t>(120 * 200, 0)};
  EXPECT_DOUBLE_EQ(lane_iou(empty, empty), 0.0);
  EXPECT_THROW(lane_iou(a, rasterize_lane({{0, 0}, {5, 5}}, 10, 10)), ShapeError);
}

TEST(Matching, Examples) {
  std::vector<LaneMask> gts;
  for (double x : {40.0, 100.0, 160.0}) gts.push_back(rasterize_lane({{x, 0}, {x, 99}}, 100, 200));
  auto r = match_lanes(gts, gts);
  EXPECT_EQ(r.tp, 3);
  EXPECT_EQ(r.fp, 0);
  EXPECT_EQ(r.fn, 0);
  r = match_lanes({}, gts);
  EXPECT_EQ(r.fn, 3);
  EXPECT_EQ(r.tp, 0);

  // One wide prediction overlapping two close gts above threshold.
  std::vector<LaneMask> close{rasterize_lane({{95, 0}, {95, 99}}, 100, 200),
                              rasterize_lane({{105, 0}, {105, 99}}, 100, 200)};
  const std::vector<LaneMask> one{rasterize_lane({{100, 0}, {100, 99}}, 100, 200)};
  ASSERT_GE(lane_iou(one[0], close[0]), 0.5);
  ASSERT_GE(lane_iou(one[0], close[1]), 0.5);
  r = match_lanes(one, close);
  EXPECT_EQ(r.tp, 1);
  EXPECT_EQ(r.fn, 1);
  EXPECT_THROW(match_lanes(one, close, 0.0), Error);
}

TEST(Matching, AgreesWithExhaustiveEnumeration) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> x(20.0, 180.0), dx(-40.0, 40.0), jitter(-12.0, 12.0);
  std::uniform_int_distribution<int> count(0, 4);
  int trials_with_ambiguity = 0;
  for (int trial = 0; trial < 150; ++trial) {
    const int ng = count(rng), np = count(rng);
    std::vector<Poly> gl;
    for (int i = 0; i < ng; ++i) {
      const double x0 = x(rng);
      gl.push_back({{x0, 99}, {x0 + dx(rng), 0}});
    }
    std::vector<LaneMask> gts, preds;
    for (const auto& g : gl) gts.push_back(rasterize_lane(g, 100, 200));
    for (int i = 0; i < np; ++i) {
      Poly p = ng > 0 && i < ng ? gl[static_cast<std::size_t>(i)] : Poly{{x(rng), 99}, {x(rng), 0}};
      for (auto& q : p) q.x += jitter(rng);
      preds.push_back(rasterize_lane(p, 100, 200));
    }
    std::vector<std::vector<double>> iou(preds.size(), std::vector<double>(gts.size()));
    int above = 0;
    for (std::size_t i = 0; i < preds.size(); ++i)
      for (std::size_t j = 0; j < gts.size(); ++j) {
        iou[i][j] = lane_iou(preds[i], gts[j]);
        above += iou[i][j] >= 0.5;
      }
    trials_with_ambiguity += above > std::min(np, ng);
    const auto r = match_lanes(preds, gts);
    EXPECT_EQ(r.tp, exhaustive_max_matches(iou, gts.size(), 0.5)) << "trial " << trial;
    EXPECT_EQ(r.tp + r.fp, np);
    EXPECT_EQ(r.tp + r.fn, ng);
    for (const auto& pr : r.pairs) EXPECT_GE(pr.iou, 0.5);

    // Swapping roles swaps precision and recall.
    const auto s = match_lanes(gts, preds);
    EXPECT_EQ(s.tp, r.tp);
    const auto a = prf1(r.tp, r.fp, r.fn), b = prf1(s.tp, s.fp, s.fn);
    EXPECT_DOUBLE_EQ(a.precision, b.recall);
    EXPECT_DOUBLE_EQ(a.f1, b.f1);
  }
  EXPECT_GT(trials_with_ambiguity, 0);
}

TEST(Prf1, Examples) {
  EXPECT_NEAR(prf1_from_pr(0.8168, 0.388).f1, 0.526, 0.001);
  EXPECT_DOUBLE_EQ(prf1(5, 0, 0).f1, 1.0);
  EXPECT_DOUBLE_EQ(prf1(0, 3, 4).f1, 0.0);
  const auto z = prf1(0, 0, 0);
  EXPECT_EQ(z.precision, 1.0);
  EXPECT_EQ(z.recall, 1.0);
  EXPECT_EQ(z.f1, 1.0);
  const auto only_fn = prf1(0, 0, 2);
  EXPECT_EQ(only_fn.precision, 0.0);
  EXPECT_EQ(only_fn.f1, 0.0);
  const auto m = prf1(3, 1, 2);
  EXPECT_DOUBLE_EQ(m.precision, 0.75);
  EXPECT_DOUBLE_EQ(m.recall, 0.6);
  EXPECT_DOUBLE_EQ(m.f1, 2 * 0.75 * 0.6 / 1.35);
  EXPECT_THROW(prf1(-1, 0, 0), Error);
}

TEST(Prf1, RangeProperty) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> d(0, 50);
  for (int i = 0; i < 1000; ++i) {
    const auto s = prf1(d(rng), d(rng), d(rng));
    for (double v : {s.precision, s.recall, s.f1}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Evaluator, AccumulatesPerCategory) {
  LaneEvaluator ev;
  const std::vector<Point2> lane{{50, 0}, {60, 99}};
  EXPECT_EQ(ev.add_frame({lane}, {lane}, 100, 200, "night").tp, 1);
  ev.add_frame({}, {lane}, 100, 200, "night");
  ev.add_frame({lane}, {}, 100, 200, "curve");
  ev.add_frame({}, {}, 100, 200, "curve");
  const auto rep = ev.report();
  EXPECT_EQ(rep.counts.tp, 1);
  EXPECT_EQ(rep.counts.fp, 1);
  EXPECT_EQ(rep.counts.fn, 1);
  EXPECT_DOUBLE_EQ(rep.score.f1, 0.5);
  EXPECT_DOUBLE_EQ(rep.category_score("night").recall, 0.5);
  EXPECT_DOUBLE_EQ(rep.category_score("curve").precision, 0.0);
}

TEST(PixelIoU, Examples) {
  std::vector<std::uint8_t> a{1, 1, 0, 0}, b{0, 1, 1, 0}, c{0, 0, 1, 1}, e(4, 0);
  EXPECT_DOUBLE_EQ(pixel_iou(a, a), 100.0);
  EXPECT_DOUBLE_EQ(pixel_iou(a, c), 0.0);
  EXPECT_NEAR(pixel_iou(a, b), 33.3, 0.05);
  EXPECT_DOUBLE_EQ(pixel_iou(e, e), 100.0);
  EXPECT_THROW(pixel_iou(a, {1, 0}), ShapeError);
}

TEST(TuSimpleAccuracy, Examples) {
  const std::vector<std::vector<double>> gt{{-2, 100, 110, 120, 130}};
  EXPECT_DOUBLE_EQ(tusimple_accuracy(gt, gt), 1.0);
  EXPECT_DOUBLE_EQ(tusimple_accuracy({{-2, 130, 140, 150, 160}}, gt), 0.0);
  EXPECT_DOUBLE_EQ(tusimple_accuracy({{-2, 105, 115, 150, 160}}, gt), 0.5);
  EXPECT_DOUBLE_EQ(tusimple_accuracy({}, gt), 0.0);
  EXPECT_DOUBLE_EQ(tusimple_accuracy({{1, 2}}, {}), 1.0);
  EXPECT_THROW(tusimple_accuracy({{1, 2}}, gt), ShapeError);
}
