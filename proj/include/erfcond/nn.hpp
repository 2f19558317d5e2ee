#pragma once

// Parameterized layers, the named-parameter registry, and layer descriptors.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "erfcond/ops.hpp"
#include "erfcond/tensor.hpp"

namespace erfcond {

enum class ParamKind { trainable, buffer };

template <typename T>
struct NamedTensor {
  std::string name;
  std::string layer;
  Tensor<T> tensor;
  ParamKind kind = ParamKind::trainable;
};

// Ordered table of every tensor a model owns. Entries alias the layers'
// tensors, so writing through the registry updates the model.
template <typename T>
class ParamRegistry {
 public:
  void add(std::string name, std::string layer, Tensor<T> tensor, ParamKind kind) {
    entries_.push_back({std::move(name), std::move(layer), std::move(tensor), kind});
  }

  const std::vector<NamedTensor<T>>& entries() const { return entries_; }

  std::vector<NamedTensor<T>> select(ParamKind kind) const {
    std::vector<NamedTensor<T>> out;
    for (const auto& e : entries_) {
      if (e.kind == kind) out.push_back(e);
    }
    return out;
  }
  std::vector<NamedTensor<T>> parameters() const { return select(ParamKind::trainable); }
  std::vector<NamedTensor<T>> buffers() const { return select(ParamKind::buffer); }

  std::int64_t count(ParamKind kind) const {
    std::int64_t n = 0;
    for (const auto& e : entries_) {
      if (e.kind == kind) n += e.tensor.numel();
    }
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

 private:
  std::vector<NamedTensor<T>> entries_;
};

enum class LayerKind { conv, deconv, downsampler, non_bt_1d, basic_block };
enum class LayerOrigin { base, repair, head };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::deconv: return "deconv";
    case LayerKind::downsampler: return "downsampler";
    case LayerKind::non_bt_1d: return "non_bt_1d";
    case LayerKind::basic_block: return "basic_block";
  }
  return "?";
}

inline const char* to_string(LayerOrigin o) {
  switch (o) {
    case LayerOrigin::base: return "base";
    case LayerOrigin::repair: return "repair";
    case LayerOrigin::head: return "head";
  }
  return "?";
}

// One entry of a model graph's layer listing. `numbered_layers` follows the
// reference architectures' layer numbering (an ERFNet block is one layer, a
// ResNet basic block is two); `conv_ops` counts individual convolutions.
struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::conv;
  LayerOrigin origin = LayerOrigin::base;
  int in_channels = 0;
  int out_channels = 0;
  int stride = 1;  // output stride relative to the network input
  int numbered_layers = 1;
  int conv_ops = 1;
};

struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;  // dropout masks; required when training with dropout
};

namespace detail {
template <typename T>
Tensor<T> kaiming_tensor(Shape shape, double fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / std::max(fan_in, 1.0)));
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}
}  // namespace detail

template <typename T>
class Conv2dLayer {
 public:
  Conv2dLayer() = default;
  Conv2dLayer(int in_channels, int out_channels, int kh, int kw, Conv2dOptions opt, bool with_bias, Rng& rng)
      : opt_(opt) {
    weight = detail::kaiming_tensor<T>(Shape{out_channels, in_channels, kh, kw},
                                       static_cast<double>(in_channels) * kh * kw, rng);
    weight.set_requires_grad();
    if (with_bias) bias = Tensor<T>::zeros(Shape{out_channels}).set_requires_grad();
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, opt_); }

  void collect(const std::string& prefix, const std::string& layer, ParamRegistry<T>& reg) const {
    reg.add(prefix + ".weight", layer, weight, ParamKind::trainable);
    if (bias.defined()) reg.add(prefix + ".bias", layer, bias, ParamKind::trainable);
  }

  std::int64_t param_count() const { return weight.numel() + (bias.defined() ? bias.numel() : 0); }
  const Conv2dOptions& options() const { return opt_; }

  Tensor<T> weight;
  Tensor<T> bias;

 private:
  Conv2dOptions opt_;
};

template <typename T>
class ConvTranspose2dLayer {
 public:
  ConvTranspose2dLayer() = default;
  ConvTranspose2dLayer(int in_channels, int out_channels, int k, ConvTranspose2dOptions opt, bool with_bias,
                       Rng& rng)
      : opt_(opt) {
    const double fan = static_cast<double>(in_channels) * k * k / (opt.stride_h * opt.stride_w);
    weight = detail::kaiming_tensor<T>(Shape{in_channels, out_channels, k, k}, fan, rng);
    weight.set_requires_grad();
    if (with_bias) bias = Tensor<T>::zeros(Shape{out_channels}).set_requires_grad();
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv_transpose2d(x, weight, bias, opt_); }

  void collect(const std::string& prefix, const std::string& layer, ParamRegistry<T>& reg) const {
    reg.add(prefix + ".weight", layer, weight, ParamKind::trainable);
    if (bias.defined()) reg.add(prefix + ".bias", layer, bias, ParamKind::trainable);
  }

  Tensor<T> weight;
  Tensor<T> bias;

 private:
  ConvTranspose2dOptions opt_;
};

template <typename T>
class BatchNorm2dLayer {
 public:
  BatchNorm2dLayer() = default;
  explicit BatchNorm2dLayer(int channels, T eps = T(1e-3), T momentum = T(0.1)) : eps_(eps), momentum_(momentum) {
    gamma = Tensor<T>::ones(Shape{channels}).set_requires_grad();
    beta = Tensor<T>::zeros(Shape{channels}).set_requires_grad();
    running_mean = Tensor<T>::zeros(Shape{channels});
    running_var = Tensor<T>::ones(Shape{channels});
  }

  Tensor<T> operator()(const Tensor<T>& x, bool training) {
    return batch_norm2d(x, gamma, beta, running_mean, running_var, eps_, momentum_, training);
  }

  void collect(const std::string& prefix, const std::string& layer, ParamRegistry<T>& reg) const {
    reg.add(prefix + ".gamma", layer, gamma, ParamKind::trainable);
    reg.add(prefix + ".beta", layer, beta, ParamKind::trainable);
    reg.add(prefix + ".running_mean", layer, running_mean, ParamKind::buffer);
    reg.add(prefix + ".running_var", layer, running_var, ParamKind::buffer);
  }

  Tensor<T> gamma, beta, running_mean, running_var;

 private:
  T eps_ = T(1e-3);
  T momentum_ = T(0.1);
};

// Transposed 3x3 stride-2 convolution + norm + ReLU; doubles spatial dims.
template <typename T>
class UpsamplerBlock {
 public:
  UpsamplerBlock() = default;
  UpsamplerBlock(int in_channels, int out_channels, Rng& rng)
      : in_(in_channels),
        out_(out_channels),
        deconv_(in_channels, out_channels, 3, ConvTranspose2dOptions::square(2, 1, 1), true, rng),
        bn_(out_channels) {}

  Tensor<T> forward(const Tensor<T>& x, const ForwardContext& ctx) { return relu(bn_(deconv_(x), ctx.training)); }

  void collect(const std::string& prefix, ParamRegistry<T>& reg) const {
    deconv_.collect(prefix + ".deconv", prefix, reg);
    bn_.collect(prefix + ".bn", prefix, reg);
  }

  LayerSpec spec(std::string name, LayerOrigin origin, int stride) const {
    return {std::move(name), LayerKind::deconv, origin, in_, out_, stride, 1, 1};
  }

 private:
  int in_ = 0, out_ = 0;
  ConvTranspose2dLayer<T> deconv_;
  BatchNorm2dLayer<T> bn_;
};

}  // namespace erfcond
