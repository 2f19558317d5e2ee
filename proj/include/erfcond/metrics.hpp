#pragma once

// CULane-style lane F1 (30 px strokes, IoU matching), pixel IoU and TuSimple
// point accuracy.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "erfcond/datasets.hpp"

namespace erfcond {

struct LaneMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;  // row-major, 0/1

  std::int64_t count() const {
    std::int64_t n = 0;
    for (auto v : pixels) n += v;
    return n;
  }
};

// Pixel (c, r) has its center at (c + 0.5, r + 0.5) and is set when that
// center lies within width/2 of some segment (round caps and joins).
inline LaneMask rasterize_lane(const std::vector<Point2>& points, int height, int width, double stroke = 30.0) {
  if (points.size() < 2) throw Error("rasterize_lane: need at least 2 points, got " + std::to_string(points.size()));
  if (height < 1 || width < 1) throw ShapeError("rasterize_lane: degenerate canvas");
  LaneMask m{height, width, std::vector<std::uint8_t>(static_cast<std::size_t>(height) * width, 0)};
  const double r = stroke / 2.0, r2 = r * r;
  for (std::size_t s = 1; s < points.size(); ++s) {
    const Point2 a = points[s - 1], b = points[s];
    const int x0 = std::max(0, static_cast<int>(std::floor(std::min(a.x, b.x) - r - 1)));
    const int x1 = std::min(width - 1, static_cast<int>(std::ceil(std::max(a.x, b.x) + r)));
    const int y0 = std::max(0, static_cast<int>(std::floor(std::min(a.y, b.y) - r - 1)));
    const int y1 = std::min(height - 1, static_cast<int>(std::ceil(std::max(a.y, b.y) + r)));
    const double dx = b.x - a.x, dy = b.y - a.y, len2 = dx * dx + dy * dy;
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double px = x + 0.5 - a.x, py = y + 0.5 - a.y;
        const double t = len2 > 0.0 ? std::clamp((px * dx + py * dy) / len2, 0.0, 1.0) : 0.0;
        const double ex = px - t * dx, ey = py - t * dy;
        if (ex * ex + ey * ey <= r2) m.pixels[static_cast<std::size_t>(y) * width + x] = 1;
      }
    }
  }
  return m;
}

// |A and B| / |A or B|; 0 when the union is empty.
inline double lane_iou(const LaneMask& a, const LaneMask& b) {
  if (a.height != b.height || a.width != b.width) throw ShapeError("lane_iou: mask dims differ");
  std::int64_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    inter += a.pixels[i] & b.pixels[i];
    uni += a.pixels[i] | b.pixels[i];
  }
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

struct MatchedPair {
  int pred = 0;
  int gt = 0;
  double iou = 0.0;
};

struct MatchResult {
  std::int64_t tp = 0, fp = 0, fn = 0;
  std::vector<MatchedPair> pairs;
};

// Greedy one-to-one assignment over pairs with IoU >= threshold, highest
// IoU first (ties: lower prediction index, then lower gt index).
inline MatchResult match_lanes(const std::vector<LaneMask>& preds, const std::vector<LaneMask>& gts,
                               double iou_threshold = 0.5) {
  if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) throw Error("match_lanes: threshold must lie in (0,1]");
  std::vector<MatchedPair> candidates;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    for (std::size_t j = 0; j < gts.size(); ++j) {
      const double iou = lane_iou(preds[i], gts[j]);
      if (iou >= iou_threshold) candidates.push_back({static_cast<int>(i), static_cast<int>(j), iou});
    }
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const MatchedPair& a, const MatchedPair& b) { return a.iou > b.iou; });
  std::vector<bool> pred_used(preds.size(), false), gt_used(gts.size(), false);
  MatchResult r;
  for (const auto& c : candidates) {
    if (pred_used[c.pred] || gt_used[c.gt]) continue;
    pred_used[c.pred] = gt_used[c.gt] = true;
    r.pairs.push_back(c);
  }
  r.tp = static_cast<std::int64_t>(r.pairs.size());
  r.fp = static_cast<std::int64_t>(preds.size()) - r.tp;
  r.fn = static_cast<std::int64_t>(gts.size()) - r.tp;
  return r;
}

struct Counts {
  std::int64_t tp = 0, fp = 0, fn = 0;
  Counts& operator+=(const Counts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
};

struct PRF1 {
  double precision = 0.0, recall = 0.0, f1 = 0.0;
};

inline PRF1 prf1_from_pr(double p, double r) { return {p, r, p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0}; }

// A zero denominator gives 0, except that no predictions and no ground truth
// at all scores 1 everywhere.
inline PRF1 prf1(std::int64_t tp, std::int64_t fp, std::int64_t fn) {
  if (tp < 0 || fp < 0 || fn < 0) throw Error("prf1: counts must be nonnegative");
  if (tp == 0 && fp == 0 && fn == 0) return {1.0, 1.0, 1.0};
  const double p = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  const double r = tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  return prf1_from_pr(p, r);
}

struct EvalReport {
  Counts counts;
  PRF1 score;
  std::map<std::string, Counts> per_category;

  PRF1 category_score(const std::string& c) const {
    const auto& k = per_category.at(c);
    return prf1(k.tp, k.fp, k.fn);
  }
};

// Accumulates lane-level matches over frames on their original canvases.
class LaneEvaluator {
 public:
  explicit LaneEvaluator(double stroke = 30.0, double iou_threshold = 0.5)
      : stroke_(stroke), threshold_(iou_threshold) {}

  Counts add_frame(const std::vector<std::vector<Point2>>& preds, const std::vector<std::vector<Point2>>& gts,
                   int height, int width, const std::string& category = "none") {
    std::vector<LaneMask> pm, gm;
    for (const auto& p : preds) {
      if (p.size() >= 2) pm.push_back(rasterize_lane(p, height, width, stroke_));
    }
    for (const auto& g : gts) {
      if (g.size() >= 2) gm.push_back(rasterize_lane(g, height, width, stroke_));
    }
    const auto m = match_lanes(pm, gm, threshold_);
    const Counts c{m.tp, m.fp, m.fn};
    report_.counts += c;
    report_.per_category[category] += c;
    return c;
  }

  EvalReport report() const {
    EvalReport r = report_;
    r.score = prf1(r.counts.tp, r.counts.fp, r.counts.fn);
    return r;
  }

 private:
  double stroke_, threshold_;
  EvalReport report_;
};

// Foreground IoU in percent; two empty masks count as identical (100).
inline double pixel_iou(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt) {
  if (pred.size() != gt.size()) throw ShapeError("pixel_iou: mask sizes differ");
  std::int64_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] != 0, b = gt[i] != 0;
    inter += a && b;
    uni += a || b;
  }
  return uni > 0 ? 100.0 * static_cast<double>(inter) / static_cast<double>(uni) : 100.0;
}

// Lanes are x values on the shared h_samples grid, negative = absent. Each gt
// lane takes the prediction with the most points within px_threshold on the
// same rows; result = matched points / gt points.
inline double tusimple_accuracy(const std::vector<std::vector<double>>& preds,
                                const std::vector<std::vector<double>>& gts, double px_threshold = 20.0) {
  std::int64_t total = 0, hit = 0;
  for (const auto& g : gts) {
    std::int64_t n = 0;
    for (double x : g) n += x >= 0.0;
    total += n;
    std::int64_t best = 0;
    for (const auto& p : preds) {
      if (p.size() != g.size()) throw ShapeError("tusimple_accuracy: lanes must share the h_samples grid");
      std::int64_t k = 0;
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (g[i] >= 0.0 && p[i] >= 0.0 && std::abs(p[i] - g[i]) <= px_threshold) ++k;
      }
      best = std::max(best, k);
    }
    hit += best;
  }
  return total > 0 ? static_cast<double>(hit) / static_cast<double>(total) : 1.0;
}

}  // namespace erfcond
