#pragma once

// Residual building blocks: the factorized non-bottleneck-1D block, the
// ERFNet downsampler, and the ResNet basic block.

#include <cstdint>
#include <string>

#include "erfcond/nn.hpp"

namespace erfcond {

struct FactorizationSavings {
  std::int64_t full_weights = 0;        // k*k*C*C for one k x k conv
  std::int64_t factorized_weights = 0;  // 2*k*C*C for the k x 1 + 1 x k pair
  double ratio = 0.0;                   // factorized / full == 2/k
};

inline FactorizationSavings factorization_savings(std::int64_t k, std::int64_t channels) {
  if (k < 1 || channels < 1) throw Error("factorization_savings: kernel size and channels must be >= 1");
  FactorizationSavings s;
  s.full_weights = k * k * channels * channels;
  s.factorized_weights = 2 * k * channels * channels;
  s.ratio = static_cast<double>(s.factorized_weights) / static_cast<double>(s.full_weights);
  return s;
}

struct NonBt1DSpec {
  int channels = 64;
  int dilation = 1;
  double dropout_prob = 0.0;
};

// x -> 3x1 -> relu -> 1x3 -> norm -> relu -> 3x1(d) -> relu -> 1x3(d) -> norm
//   -> dropout -> + x -> relu
template <typename T>
class NonBt1D {
 public:
  NonBt1D() = default;
  NonBt1D(const NonBt1DSpec& spec, Rng& rng) : spec_(spec) {
    if (spec.channels < 1 || spec.dilation < 1) throw Error("non_bt_1d: channels and dilation must be >= 1");
    if (spec.dropout_prob < 0.0 || spec.dropout_prob >= 1.0) throw Error("non_bt_1d: dropout must lie in [0,1)");
    const int c = spec.channels, d = spec.dilation;
    conv3x1_1 = Conv2dLayer<T>(c, c, 3, 1, {1, 1, 1, 0, 1, 1}, true, rng);
    conv1x3_1 = Conv2dLayer<T>(c, c, 1, 3, {1, 1, 0, 1, 1, 1}, true, rng);
    bn1 = BatchNorm2dLayer<T>(c);
    conv3x1_2 = Conv2dLayer<T>(c, c, 3, 1, {1, 1, d, 0, d, 1}, true, rng);
    conv1x3_2 = Conv2dLayer<T>(c, c, 1, 3, {1, 1, 0, d, 1, d}, true, rng);
    bn2 = BatchNorm2dLayer<T>(c);
  }

  Tensor<T> forward(const Tensor<T>& x, const ForwardContext& ctx) {
    if (x.rank() != 4 || x.dim(1) != spec_.channels) {
      throw ShapeError("non_bt_1d: expected " + std::to_string(spec_.channels) + " channels, got " +
                       shape_str(x.shape()));
    }
    auto y = relu(conv3x1_1(x));
    y = relu(bn1(conv1x3_1(y), ctx.training));
    y = relu(conv3x1_2(y));
    y = bn2(conv1x3_2(y), ctx.training);
    if (ctx.training && spec_.dropout_prob > 0.0) {
      if (!ctx.rng) throw Error("non_bt_1d: dropout in training mode needs an rng");
      y = dropout(y, spec_.dropout_prob, *ctx.rng, true);
    }
    return relu(add(y, x));
  }

  void collect(const std::string& prefix, ParamRegistry<T>& reg) const {
    conv3x1_1.collect(prefix + ".conv3x1_1", prefix, reg);
    conv1x3_1.collect(prefix + ".conv1x3_1", prefix, reg);
    bn1.collect(prefix + ".bn1", prefix, reg);
    conv3x1_2.collect(prefix + ".conv3x1_2", prefix, reg);
    conv1x3_2.collect(prefix + ".conv1x3_2", prefix, reg);
    bn2.collect(prefix + ".bn2", prefix, reg);
  }

  LayerSpec spec(std::string name, LayerOrigin origin, int stride) const {
    return {std::move(name), LayerKind::non_bt_1d, origin, spec_.channels, spec_.channels, stride, 1, 4};
  }

  const NonBt1DSpec& config() const { return spec_; }

  Conv2dLayer<T> conv3x1_1, conv1x3_1, conv3x1_2, conv1x3_2;
  BatchNorm2dLayer<T> bn1, bn2;

 private:
  NonBt1DSpec spec_;
};

struct DownsamplerSpec {
  int in_channels = 3;
  int out_channels = 16;
};

// concat(conv3x3 stride 2 with out-in filters, maxpool2(x)) -> norm -> relu.
template <typename T>
class Downsampler {
 public:
  Downsampler() = default;
  Downsampler(const DownsamplerSpec& spec, Rng& rng) : spec_(spec) {
    if (spec.in_channels < 1 || spec.out_channels <= spec.in_channels) {
      throw Error("downsampler: out_channels (" + std::to_string(spec.out_channels) +
                  ") must exceed in_channels (" + std::to_string(spec.in_channels) + ")");
    }
    conv = Conv2dLayer<T>(spec.in_channels, spec.out_channels - spec.in_channels, 3, 3, Conv2dOptions::square(2, 1),
                          true, rng);
    bn = BatchNorm2dLayer<T>(spec.out_channels);
  }

  // Channel concat before the norm; exposed for inspection.
  Tensor<T> branches(const Tensor<T>& x) const {
    if (x.rank() != 4 || x.dim(1) != spec_.in_channels) {
      throw ShapeError("downsampler: expected " + std::to_string(spec_.in_channels) + " channels, got " +
                       shape_str(x.shape()));
    }
    if (x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0) {
      throw ShapeError("downsampler: spatial dims must be even, got " + shape_str(x.shape()));
    }
    return concat_channels<T>({conv(x), maxpool2(x)});
  }

  Tensor<T> forward(const Tensor<T>& x, const ForwardContext& ctx) { return relu(bn(branches(x), ctx.training)); }

  void collect(const std::string& prefix, ParamRegistry<T>& reg) const {
    conv.collect(prefix + ".conv", prefix, reg);
    bn.collect(prefix + ".bn", prefix, reg);
  }

  LayerSpec spec(std::string name, LayerOrigin origin, int stride) const {
    return {std::move(name), LayerKind::downsampler, origin, spec_.in_channels, spec_.out_channels, stride, 1, 1};
  }

  Conv2dLayer<T> conv;
  BatchNorm2dLayer<T> bn;

 private:
  DownsamplerSpec spec_;
};

struct BasicBlockSpec {
  int in_channels = 64;
  int out_channels = 64;
  int stride = 1;
  int dilation = 1;
};

// conv3x3 -> norm -> relu -> conv3x3 -> norm -> + shortcut -> relu. The
// shortcut is a 1x1 projection when stride or channel count changes.
template <typename T>
class BasicBlock {
 public:
  BasicBlock() = default;
  BasicBlock(const BasicBlockSpec& spec, Rng& rng) : spec_(spec) {
    if (spec.in_channels < 1 || spec.out_channels < 1 || spec.stride < 1 || spec.dilation < 1) {
      throw Error("basic_block: channels, stride and dilation must be >= 1");
    }
    const int d = spec.dilation;
    conv1 = Conv2dLayer<T>(spec.in_channels, spec.out_channels, 3, 3, Conv2dOptions::square(spec.stride, d, d),
                           false, rng);
    bn1 = BatchNorm2dLayer<T>(spec.out_channels, T(1e-5));
    conv2 = Conv2dLayer<T>(spec.out_channels, spec.out_channels, 3, 3, Conv2dOptions::square(1, d, d), false, rng);
    bn2 = BatchNorm2dLayer<T>(spec.out_channels, T(1e-5));
    if (has_projection()) {
      proj = Conv2dLayer<T>(spec.in_channels, spec.out_channels, 1, 1, Conv2dOptions::square(spec.stride, 0),
                            false, rng);
      proj_bn = BatchNorm2dLayer<T>(spec.out_channels, T(1e-5));
    }
  }

  bool has_projection() const { return spec_.stride != 1 || spec_.in_channels != spec_.out_channels; }

  Tensor<T> forward(const Tensor<T>& x, const ForwardContext& ctx) {
    if (x.rank() != 4 || x.dim(1) != spec_.in_channels) {
      throw ShapeError("basic_block: expected " + std::to_string(spec_.in_channels) + " channels, got " +
                       shape_str(x.shape()));
    }
    auto y = relu(bn1(conv1(x), ctx.training));
    y = bn2(conv2(y), ctx.training);
    const Tensor<T> shortcut = has_projection() ? proj_bn(proj(x), ctx.training) : x;
    return relu(add(y, shortcut));
  }

  void collect(const std::string& prefix, ParamRegistry<T>& reg) const {
    conv1.collect(prefix + ".conv1", prefix, reg);
    bn1.collect(prefix + ".bn1", prefix, reg);
    conv2.collect(prefix + ".conv2", prefix, reg);
    bn2.collect(prefix + ".bn2", prefix, reg);
    if (has_projection()) {
      proj.collect(prefix + ".proj", prefix, reg);
      proj_bn.collect(prefix + ".proj_bn", prefix, reg);
    }
  }

  LayerSpec spec(std::string name, LayerOrigin origin, int stride) const {
    return {std::move(name), LayerKind::basic_block, origin,  spec_.in_channels,
            spec_.out_channels, stride,               2,      has_projection() ? 3 : 2};
  }

  Conv2dLayer<T> conv1, conv2, proj;
  BatchNorm2dLayer<T> bn1, bn2, proj_bn;

 private:
  BasicBlockSpec spec_;
};

}  // namespace erfcond
