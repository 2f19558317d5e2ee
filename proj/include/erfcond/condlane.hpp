#pragma once

// Conditional lane detection head: proposal heatmap at stride 16, a dynamic
// kernel regressed per proposal, a 1x1 conditional convolution over the
// stride-4 shape feature, and row-wise decoding into polylines.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "erfcond/backbone.hpp"

namespace erfcond {

struct HeadConfig {
  int hidden_channels = 128;  // proposal / kernel branches
  int shape_channels = 60;    // learned channels of the shape feature
  double proposal_threshold = 0.4;
  int nms_kernel = 3;
  double heatmap_prior = 0.1;  // initial heatmap probability
};

// Fixed coordinate basis appended to the learned shape feature: x, y, x^2, x*y.
inline constexpr int kShapeCoordBasis = 4;

struct ModelConfig {
  BackboneConfig backbone;
  HeadConfig head;
};

struct Proposal {
  int row = 0;
  int col = 0;
  double score = 0.0;
};

template <typename T>
struct RowWiseMaps {
  Tensor<T> location_logits;  // [H_f, W_f]
  Tensor<T> range_logits;     // [H_f]
};

struct LanePoint {
  double x = 0.0;
  int y = 0;
};

struct LanePrediction {
  std::vector<LanePoint> points;  // rows strictly increasing
  double score = 0.0;
};

// Maps feature-grid coordinates to original-image pixels:
// model pixel = stride * cell + (stride - 1) / 2, then the inverse of the
// preprocessing scale/crop.
struct DecodeTransform {
  int stride = 4;
  double scale_x = 1.0, scale_y = 1.0;  // original -> model
  double crop_x = 0.0, crop_y = 0.0;    // subtracted before scaling
  int image_width = 0, image_height = 0;  // original image bounds
};

// Local maxima of a heatmap under k x k suppression, score >= threshold,
// sorted by score (ties: row, then column).
inline std::vector<Proposal> generate_proposals(std::span<const float> heat, int height, int width, double threshold,
                                                int nms_kernel = 3) {
  if (static_cast<std::int64_t>(heat.size()) != static_cast<std::int64_t>(height) * width) {
    throw ShapeError("generate_proposals: heatmap size does not match " + std::to_string(height) + "x" +
                     std::to_string(width));
  }
  if (nms_kernel < 1 || nms_kernel % 2 == 0) throw Error("generate_proposals: nms kernel must be odd and positive");
  const int r = nms_kernel / 2;
  std::vector<Proposal> out;
  for (int i = 0; i < height; ++i) {
    for (int j = 0; j < width; ++j) {
      const float v = heat[static_cast<std::size_t>(i * width + j)];
      if (!(v >= threshold)) continue;
      bool is_max = true;
      for (int di = -r; di <= r && is_max; ++di) {
        for (int dj = -r; dj <= r; ++dj) {
          const int y = i + di, x = j + dj;
          if ((di == 0 && dj == 0) || y < 0 || y >= height || x < 0 || x >= width) continue;
          const float u = heat[static_cast<std::size_t>(y * width + x)];
          // Plateaus resolve to their first cell in raster order.
          if (u > v || (u == v && (y < i || (y == i && x < j)))) {
            is_max = false;
            break;
          }
        }
      }
      if (is_max) out.push_back({i, j, v});
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const Proposal& a, const Proposal& b) { return a.score > b.score; });
  return out;
}

// Shape feature [N,C,H,W] with the coordinate basis in its last 4 channels.
template <typename T>
Tensor<T> shape_coord_basis(std::int64_t n, std::int64_t h, std::int64_t w) {
  Tensor<T> out(Shape{n, kShapeCoordBasis, h, w});
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t r = 0; r < h; ++r) {
      for (std::int64_t c = 0; c < w; ++c) {
        const T x = w > 1 ? T(2) * static_cast<T>(c) / static_cast<T>(w - 1) - T(1) : T(0);
        const T y = h > 1 ? T(2) * static_cast<T>(r) / static_cast<T>(h - 1) - T(1) : T(0);
        const T vals[kShapeCoordBasis] = {x, y, x * x, x * y};
        for (int k = 0; k < kShapeCoordBasis; ++k) out[((b * kShapeCoordBasis + k) * h + r) * w + c] = vals[k];
      }
    }
  }
  return out;
}

template <typename T>
struct HeadOutputs {
  Tensor<T> heatmap_logits;  // [N,1,H16,W16]
  Tensor<T> kernel_map;      // [N,C+1,H16,W16]
  Tensor<T> shape_feature;   // [N,C,H4,W4]
};

template <typename T>
class CondLaneHead {
 public:
  CondLaneHead() = default;
  CondLaneHead(const HeadConfig& cfg, int s4_channels, int s16_channels, Rng& rng) : cfg_(cfg) {
    if (cfg.hidden_channels < 1 || cfg.shape_channels < 1) throw Error("head: channel counts must be >= 1");
    if (!(cfg.proposal_threshold > 0.0 && cfg.proposal_threshold < 1.0)) {
      throw Error("head: proposal_threshold must lie in (0,1)");
    }
    if (!(cfg.heatmap_prior > 0.0 && cfg.heatmap_prior < 1.0)) throw Error("head: heatmap_prior must lie in (0,1)");
    const int h = cfg.hidden_channels, s = cfg.shape_channels;
    const int c = shape_channels();
    prop1_ = Conv2dLayer<T>(s16_channels + 2, h, 3, 3, Conv2dOptions::square(1, 1), true, rng);
    prop2_ = Conv2dLayer<T>(h, 1, 1, 1, {}, true, rng);
    std::fill(prop2_.bias.data().begin(), prop2_.bias.data().end(),
              static_cast<T>(std::log(cfg.heatmap_prior / (1.0 - cfg.heatmap_prior))));
    kern1_ = Conv2dLayer<T>(s16_channels + 2, h, 3, 3, Conv2dOptions::square(1, 1), true, rng);
    kern2_ = Conv2dLayer<T>(h, c + 1, 1, 1, {}, true, rng);
    // Small initial kernels keep the first location distributions near uniform.
    for (auto& v : kern2_.weight.data()) v *= T(0.1);
    shape1_ = Conv2dLayer<T>(s4_channels + 2, s, 3, 3, Conv2dOptions::square(1, 1), true, rng);
    shape2_ = Conv2dLayer<T>(s, s, 3, 3, Conv2dOptions::square(1, 1), true, rng);
    range_ = Tensor<T>(Shape{3}, std::vector<T>{T(1), T(-1), T(0)}).set_requires_grad();

    layers_.push_back({"head.proposal.0", LayerKind::conv, LayerOrigin::head, s16_channels + 2, h, 16, 1, 1});
    layers_.push_back({"head.proposal.1", LayerKind::conv, LayerOrigin::head, h, 1, 16, 1, 1});
    layers_.push_back({"head.kernel.0", LayerKind::conv, LayerOrigin::head, s16_channels + 2, h, 16, 1, 1});
    layers_.push_back({"head.kernel.1", LayerKind::conv, LayerOrigin::head, h, c + 1, 16, 1, 1});
    layers_.push_back({"head.shape.0", LayerKind::conv, LayerOrigin::head, s4_channels + 2, s, 4, 1, 1});
    layers_.push_back({"head.shape.1", LayerKind::conv, LayerOrigin::head, s, s, 4, 1, 1});
  }

  // Channel count C of the shape feature the dynamic kernels act on.
  int shape_channels() const { return cfg_.shape_channels + kShapeCoordBasis; }
  const HeadConfig& config() const { return cfg_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  const Tensor<T>& range_coeffs() const { return range_; }

  HeadOutputs<T> forward(const FeaturePyramid<T>& p) const {
    HeadOutputs<T> out;
    const auto n = p.s16.dim(0);
    const auto s16 = concat_channels<T>({p.s16, coord_channels<T>(n, p.s16.dim(2), p.s16.dim(3))});
    out.heatmap_logits = prop2_(relu(prop1_(s16)));
    out.kernel_map = kern2_(relu(kern1_(s16)));
    const auto s4 = concat_channels<T>({p.s4, coord_channels<T>(n, p.s4.dim(2), p.s4.dim(3))});
    const auto learned = shape2_(relu(shape1_(s4)));
    out.shape_feature = concat_channels<T>({learned, shape_coord_basis<T>(n, p.s4.dim(2), p.s4.dim(3))});
    return out;
  }

  void collect(const std::string& prefix, ParamRegistry<T>& reg) const {
    prop1_.collect(prefix + ".proposal.0", prefix + ".proposal.0", reg);
    prop2_.collect(prefix + ".proposal.1", prefix + ".proposal.1", reg);
    kern1_.collect(prefix + ".kernel.0", prefix + ".kernel.0", reg);
    kern2_.collect(prefix + ".kernel.1", prefix + ".kernel.1", reg);
    shape1_.collect(prefix + ".shape.0", prefix + ".shape.0", reg);
    shape2_.collect(prefix + ".shape.1", prefix + ".shape.1", reg);
    reg.add(prefix + ".range.coeffs", prefix + ".range", range_, ParamKind::trainable);
  }

 private:
  HeadConfig cfg_;
  Conv2dLayer<T> prop1_, prop2_, kern1_, kern2_, shape1_, shape2_;
  Tensor<T> range_;
  std::vector<LayerSpec> layers_;
};

// Dynamic kernel [C+1] of sample `batch` at a stride-16 proposal cell.
template <typename T>
Tensor<T> regress_dynamic_kernels(const Tensor<T>& kernel_map, std::int64_t batch, const Proposal& at) {
  if (kernel_map.rank() != 4 || at.row < 0 || at.row >= kernel_map.dim(2) || at.col < 0 ||
      at.col >= kernel_map.dim(3)) {
    throw ShapeError("regress_dynamic_kernels: proposal (" + std::to_string(at.row) + "," + std::to_string(at.col) +
                     ") outside kernel map " + shape_str(kernel_map.shape()));
  }
  return gather_pixel(kernel_map, batch, at.row, at.col);
}

// location_logits[r,c] = <kernel weights, feature[:,r,c]> + bias; the range
// branch pools each row of the location map.
template <typename T>
RowWiseMaps<T> conditional_shape_forward(const Tensor<T>& shape_feature, std::int64_t batch, const Tensor<T>& kernel,
                                         const Tensor<T>& range_coeffs) {
  RowWiseMaps<T> maps;
  maps.location_logits = conditional_conv(shape_feature, batch, kernel);
  maps.range_logits = row_pool_affine(maps.location_logits, range_coeffs);
  return maps;
}

// Expected column sum_j softmax(row)_j * j for every row of a [H,W] map.
template <typename T>
std::vector<double> row_expectations(const Tensor<T>& location_logits) {
  const auto h = location_logits.dim(0), w = location_logits.dim(1);
  std::vector<double> out(static_cast<std::size_t>(h));
  for (std::int64_t r = 0; r < h; ++r) {
    const T* row = location_logits.data().data() + r * w;
    const double mx = *std::max_element(row, row + w);
    double z = 0.0, e = 0.0;
    for (std::int64_t j = 0; j < w; ++j) {
      const double p = std::exp(static_cast<double>(row[j]) - mx);
      z += p;
      e += p * static_cast<double>(j);
    }
    out[static_cast<std::size_t>(r)] = e / z;
  }
  return out;
}

template <typename T>
LanePrediction rowwise_decode(const RowWiseMaps<T>& maps, double score, const DecodeTransform& tf) {
  LanePrediction lane;
  lane.score = score;
  const auto h = maps.location_logits.dim(0);
  const auto xs = row_expectations(maps.location_logits);
  const double half = (tf.stride - 1) / 2.0;
  int last_y = -1;
  for (std::int64_t r = 0; r < h; ++r) {
    const double logit = static_cast<double>(maps.range_logits[r]);
    if (!(1.0 / (1.0 + std::exp(-logit)) > 0.5)) continue;
    const double xm = tf.stride * xs[static_cast<std::size_t>(r)] + half;
    const double ym = tf.stride * static_cast<double>(r) + tf.stride / 2.0;
    double x = xm / tf.scale_x + tf.crop_x;
    int y = static_cast<int>(std::lround(ym / tf.scale_y + tf.crop_y));
    if (tf.image_width > 0) x = std::clamp(x, 0.0, tf.image_width - 1.0);
    if (tf.image_height > 0) y = std::clamp(y, 0, tf.image_height - 1);
    if (y <= last_y) continue;
    lane.points.push_back({x, y});
    last_y = y;
  }
  if (lane.points.size() < 2) lane.points.clear();
  return lane;
}

// Backbone + head with one registry over both.
template <typename T>
class CondLaneNet {
 public:
  CondLaneNet(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    Rng rng(seed);
    backbone_ = build_backbone<T>(cfg.backbone, rng);
    const auto ch = backbone_->pyramid_channels();
    head_ = CondLaneHead<T>(cfg.head, ch[0], ch[2], rng);
    for (const auto& e : backbone_->registry().entries()) {
      registry_.add("backbone." + e.name, "backbone." + e.layer, e.tensor, e.kind);
    }
    head_.collect("head", registry_);
    layers_ = backbone_->layers();
    layers_.insert(layers_.end(), head_.layers().begin(), head_.layers().end());
  }

  CondLaneNet(const CondLaneNet&) = delete;
  CondLaneNet& operator=(const CondLaneNet&) = delete;

  HeadOutputs<T> forward(const Tensor<T>& images, const ForwardContext& ctx) {
    check_input(images);
    return head_.forward(backbone_->forward(images, ctx));
  }

  void check_input(const Tensor<T>& images) const {
    if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != cfg_.backbone.input_height ||
        images.dim(3) != cfg_.backbone.input_width) {
      throw ShapeError("model expects [N,3," + std::to_string(cfg_.backbone.input_height) + "," +
                       std::to_string(cfg_.backbone.input_width) + "], got " + shape_str(images.shape()));
    }
  }

  const ModelConfig& config() const { return cfg_; }
  Backbone<T>& backbone() { return *backbone_; }
  const CondLaneHead<T>& head() const { return head_; }
  const ParamRegistry<T>& registry() const { return registry_; }
  ParamRegistry<T>& registry() { return registry_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }

 private:
  ModelConfig cfg_;
  std::unique_ptr<Backbone<T>> backbone_;
  CondLaneHead<T> head_;
  ParamRegistry<T> registry_;
  std::vector<LayerSpec> layers_;
};

// Full inference on one preprocessed image [1,3,H,W]: proposals, per-instance
// kernels and maps, decoded lanes in original-image coordinates.
template <typename T>
std::vector<LanePrediction> predict_lanes(CondLaneNet<T>& model, const Tensor<T>& image, DecodeTransform tf = {}) {
  if (image.rank() != 4 || image.dim(0) != 1) {
    throw ShapeError("predict_lanes: expected a single image [1,3,H,W], got " + shape_str(image.shape()));
  }
  NoGradGuard no_grad;
  const auto out = model.forward(image, ForwardContext{false, nullptr});
  const auto h16 = static_cast<int>(out.heatmap_logits.dim(2)), w16 = static_cast<int>(out.heatmap_logits.dim(3));
  std::vector<float> heat(out.heatmap_logits.data().size());
  for (std::size_t i = 0; i < heat.size(); ++i) {
    heat[i] = static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(out.heatmap_logits.storage()[i]))));
  }
  const auto& hc = model.config().head;
  const auto proposals = generate_proposals(heat, h16, w16, hc.proposal_threshold, hc.nms_kernel);
  tf.stride = static_cast<int>(image.dim(2) / out.shape_feature.dim(2));
  std::vector<LanePrediction> lanes;
  for (const auto& p : proposals) {
    const auto kernel = regress_dynamic_kernels(out.kernel_map, 0, p);
    const auto maps = conditional_shape_forward(out.shape_feature, 0, kernel, model.head().range_coeffs());
    auto lane = rowwise_decode(maps, p.score, tf);
    if (!lane.points.empty()) lanes.push_back(std::move(lane));
  }
  return lanes;
}

}  // namespace erfcond
