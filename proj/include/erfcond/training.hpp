#pragma once

// Training loop and evaluation over annotated frames.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "erfcond/condlane.hpp"
#include "erfcond/datasets.hpp"
#include "erfcond/losses.hpp"
#include "erfcond/metrics.hpp"
#include "erfcond/optim.hpp"

namespace erfcond {

struct LossWeights {
  double heatmap = 1.0;
  double location = 1.0;
  double range = 0.4;
};

struct LossBundle {
  double heatmap_loss = 0.0;
  double location_loss = 0.0;
  double range_loss = 0.0;
  double total = 0.0;
};

struct TrainConfig {
  int iterations = 500;
  int batch_size = 4;
  AdamConfig adam;
  LossWeights weights;
  bool hflip = true;
  double sigma = 2.0;  // heatmap Gaussian, in stride-16 cells
};

// Preprocessed image with lanes already in model coordinates.
struct TrainSample {
  Tensor<float> image;  // [3,H,W]
  std::vector<LanePolyline> lanes;
};

inline std::vector<TrainSample> prepare_samples(const std::vector<AnnotatedFrame>& frames, int height, int width) {
  std::vector<TrainSample> out;
  out.reserve(frames.size());
  for (const auto& f : frames) {
    auto p = preprocess_frame(f, height, width);
    out.push_back({std::move(p.image), std::move(p.lanes)});
  }
  return out;
}

template <typename T>
struct LossOutput {
  Tensor<T> total;
  LossBundle parts;
};

// Losses for one forward pass. Lane terms average over all lane targets in
// the batch; a batch without lanes contributes only the heatmap term.
template <typename T>
LossOutput<T> compute_losses(const HeadOutputs<T>& out, const std::vector<FrameTargets>& targets,
                             const Tensor<T>& range_coeffs, const LossWeights& w) {
  const auto n = out.heatmap_logits.dim(0);
  if (static_cast<std::int64_t>(targets.size()) != n) throw ShapeError("compute_losses: one target per image needed");
  std::vector<float> heat;
  for (const auto& t : targets) heat.insert(heat.end(), t.heatmap.begin(), t.heatmap.end());
  const auto hm = focal_heatmap_loss(sigmoid(out.heatmap_logits), heat);

  Tensor<T> loc_sum, range_sum;
  std::int64_t lanes = 0;
  for (std::int64_t b = 0; b < n; ++b) {
    for (const auto& lt : targets[static_cast<std::size_t>(b)].lanes) {
      const auto kernel = regress_dynamic_kernels(out.kernel_map, b, Proposal{lt.anchor_row, lt.anchor_col, 1.0});
      const auto maps = conditional_shape_forward(out.shape_feature, b, kernel, range_coeffs);
      const auto l = rowwise_location_loss(maps.location_logits, std::span<const int>(lt.columns),
                                           std::span<const std::uint8_t>(lt.mask));
      const auto r = vertical_range_loss(maps.range_logits, std::span<const std::uint8_t>(lt.mask));
      loc_sum = loc_sum.defined() ? add(loc_sum, l) : l;
      range_sum = range_sum.defined() ? add(range_sum, r) : r;
      ++lanes;
    }
  }
  LossOutput<T> res;
  res.parts.heatmap_loss = static_cast<double>(hm.item());
  res.total = scale(hm, static_cast<T>(w.heatmap));
  if (lanes > 0) {
    const auto loc = scale(loc_sum, static_cast<T>(1.0 / lanes));
    const auto rng = scale(range_sum, static_cast<T>(1.0 / lanes));
    res.parts.location_loss = static_cast<double>(loc.item());
    res.parts.range_loss = static_cast<double>(rng.item());
    res.total = add(res.total, add(scale(loc, static_cast<T>(w.location)), scale(rng, static_cast<T>(w.range))));
  }
  res.parts.total = static_cast<double>(res.total.item());
  return res;
}

struct EpochResult {
  double mean_loss = 0.0;
  int iterations = 0;
};

// Owns the optimizer state and every random stream of a run: batch order,
// flips and dropout all derive from `seed`.
template <typename T>
class Trainer {
 public:
  Trainer(CondLaneNet<T>& model, TrainConfig cfg, std::uint64_t seed)
      : model_(model), cfg_(cfg), order_rng_(seed * 4 + 1), flip_rng_(seed * 4 + 2), dropout_rng_(seed * 4 + 3) {
    if (cfg.batch_size < 1) throw Error("train: batch_size must be >= 1");
    if (cfg.iterations < 0) throw Error("train: iterations must be >= 0");
    geometry_.height = model.config().backbone.input_height;
    geometry_.width = model.config().backbone.input_width;
    geometry_.sigma = cfg.sigma;
  }

  LossBundle step(const std::vector<const TrainSample*>& batch) {
    if (batch.empty()) throw Error("train step: empty batch");
    const auto h = geometry_.height, w = geometry_.width;
    Tensor<T> images(Shape{static_cast<std::int64_t>(batch.size()), 3, h, w});
    std::vector<FrameTargets> targets;
    const std::size_t per = static_cast<std::size_t>(3) * h * w;
    std::bernoulli_distribution coin(0.5);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto& s = *batch[i];
      if (s.image.rank() != 3 || s.image.dim(1) != h || s.image.dim(2) != w) {
        throw ShapeError("train step: sample image " + shape_str(s.image.shape()) + " does not match model input");
      }
      Tensor<float> img = s.image;
      std::vector<LanePolyline> lanes = s.lanes;
      if (cfg_.hflip && coin(flip_rng_)) {
        img = s.image.clone();
        hflip(img, lanes);
      }
      std::copy(img.data().begin(), img.data().end(), images.data().begin() + static_cast<std::ptrdiff_t>(i * per));
      targets.push_back(build_targets(lanes, geometry_));
    }
    model_.registry().zero_grad();
    const auto out = model_.forward(images, ForwardContext{true, &dropout_rng_});
    auto loss = compute_losses(out, targets, model_.head().range_coeffs(), cfg_.weights);
    if (!std::isfinite(loss.parts.total)) throw NumericError("train step: non-finite loss");
    backward(loss.total);
    adam_step(params(), state_, cfg_.adam);
    return loss.parts;
  }

  // Continues the shuffled pass over `data` for n iterations; returns the
  // per-iteration total loss.
  std::vector<double> run(const std::vector<TrainSample>& data, int iterations) {
    if (data.empty()) throw Error("train: empty dataset");
    std::vector<double> trace;
    trace.reserve(static_cast<std::size_t>(std::max(iterations, 0)));
    for (int it = 0; it < iterations; ++it) trace.push_back(step(next_batch(data)).total);
    return trace;
  }

  // One full pass: ceil(|data| / batch) iterations.
  EpochResult train_epoch(const std::vector<TrainSample>& data) {
    if (data.empty()) throw Error("train_epoch: empty dataset");
    reshuffle(data.size());
    EpochResult r;
    double sum = 0.0;
    while (cursor_ < perm_.size()) {
      sum += step(next_batch(data)).total;
      ++r.iterations;
    }
    r.mean_loss = sum / r.iterations;
    return r;
  }

  const AdamState<T>& optimizer_state() const { return state_; }

 private:
  const std::vector<NamedTensor<T>>& params() {
    if (params_.empty()) params_ = model_.registry().parameters();
    return params_;
  }

  void reshuffle(std::size_t n) {
    perm_.resize(n);
    std::iota(perm_.begin(), perm_.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(perm_[i - 1], perm_[pick(order_rng_)]);
    }
    cursor_ = 0;
  }

  std::vector<const TrainSample*> next_batch(const std::vector<TrainSample>& data) {
    if (perm_.size() != data.size() || cursor_ >= perm_.size()) reshuffle(data.size());
    std::vector<const TrainSample*> batch;
    while (batch.size() < static_cast<std::size_t>(cfg_.batch_size) && cursor_ < perm_.size()) {
      batch.push_back(&data[perm_[cursor_++]]);
    }
    return batch;
  }

  CondLaneNet<T>& model_;
  TrainConfig cfg_;
  TargetGeometry geometry_;
  Rng order_rng_, flip_rng_, dropout_rng_;
  AdamState<T> state_;
  std::vector<NamedTensor<T>> params_;
  std::vector<std::size_t> perm_;
  std::size_t cursor_ = 0;
};

// Detects lanes on each frame at model resolution and scores them on the
// frame's original canvas.
template <typename T>
EvalReport evaluate_model(CondLaneNet<T>& model, const std::vector<AnnotatedFrame>& frames, double stroke = 30.0,
                          double iou_threshold = 0.5) {
  const int h = model.config().backbone.input_height, w = model.config().backbone.input_width;
  LaneEvaluator ev(stroke, iou_threshold);
  for (const auto& f : frames) {
    const auto p = preprocess_frame(f, h, w);
    DecodeTransform tf;
    tf.scale_x = p.transform.scale_x;
    tf.scale_y = p.transform.scale_y;
    tf.crop_x = p.transform.crop_x;
    tf.crop_y = p.transform.crop_y;
    tf.image_width = f.width;
    tf.image_height = f.height;
    const auto image = p.image.template cast<T>().reshape(Shape{1, 3, h, w});
    std::vector<std::vector<Point2>> preds, gts;
    for (const auto& lane : predict_lanes(model, image, tf)) {
      std::vector<Point2> pts;
      for (const auto& q : lane.points) pts.push_back({q.x, static_cast<double>(q.y)});
      preds.push_back(std::move(pts));
    }
    for (const auto& lane : f.lanes) gts.push_back(lane.points);
    ev.add_frame(preds, gts, f.height, f.width, f.category);
  }
  return ev.report();
}

}  // namespace erfcond
