#pragma once

// Backbones (repaired ERFNet and the ResNet comparison trunk), their layer
// census, and the parameter audit.

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "erfcond/blocks.hpp"

namespace erfcond {

enum class BackboneVariant { erf_modified, resnet_basic };

inline const char* to_string(BackboneVariant v) {
  return v == BackboneVariant::erf_modified ? "erf_modified" : "resnet_basic";
}

inline BackboneVariant parse_backbone_variant(const std::string& s) {
  if (s == "erf_modified") return BackboneVariant::erf_modified;
  if (s == "resnet_basic") return BackboneVariant::resnet_basic;
  throw Error("unknown backbone variant '" + s + "' (expected erf_modified or resnet_basic)");
}

struct BackboneConfig {
  BackboneVariant variant = BackboneVariant::erf_modified;
  double width_multiplier = 1.0;
  // erf_modified: [down1, down2, down3, extra stage]; resnet_basic: [stage1..stage4].
  // Empty selects the variant defaults.
  std::vector<int> stage_channels;
  std::vector<int> blocks_per_stage;  // resnet_basic only; empty selects [3,4,6,3]
  int input_height = 320;
  int input_width = 800;
  int extra_blocks = 8;
  int extra_deconvs = 2;
  int extra_down = 1;
  int extra_up = 1;
  double dropout_low = 0.03;  // stride-4 encoder blocks
  double dropout_high = 0.3;  // stride-8 and extra-stage blocks

  static BackboneConfig erf_default() { return {}; }
  static BackboneConfig resnet_default() {
    BackboneConfig c;
    c.variant = BackboneVariant::resnet_basic;
    return c;
  }

  std::vector<int> resolved_stage_channels() const {
    std::vector<int> base = stage_channels;
    if (base.empty()) {
      base = variant == BackboneVariant::erf_modified ? std::vector<int>{16, 64, 128, 256}
                                                      : std::vector<int>{64, 128, 256, 512};
    }
    for (auto& c : base) c = std::max(1, static_cast<int>(std::lround(c * width_multiplier)));
    return base;
  }

  std::vector<int> resolved_blocks() const {
    return blocks_per_stage.empty() ? std::vector<int>{3, 4, 6, 3} : blocks_per_stage;
  }
};

inline void validate(const BackboneConfig& c) {
  if (!(c.width_multiplier > 0.0) || !std::isfinite(c.width_multiplier)) {
    throw Error("backbone: width_multiplier must be positive, got " + std::to_string(c.width_multiplier));
  }
  if (c.input_height < 16 || c.input_width < 16) throw Error("backbone: input geometry must be at least 16x16");
  for (int v : c.stage_channels) {
    if (v < 1) throw Error("backbone: stage channels must be positive");
  }
  const auto ch = c.resolved_stage_channels();
  if (ch.size() != 4) throw Error("backbone: stage_channels must list 4 stages");
  if (c.variant == BackboneVariant::erf_modified) {
    if (ch[0] <= 3) throw Error("backbone: invalid channel progression, first stage must exceed 3 channels");
    for (std::size_t i = 1; i < ch.size(); ++i) {
      if (ch[i] <= ch[i - 1]) {
        throw Error("backbone: invalid channel progression, downsamplers need increasing channels (" +
                    std::to_string(ch[i - 1]) + " -> " + std::to_string(ch[i]) + ")");
      }
    }
    if (c.extra_blocks < 0 || c.extra_deconvs < 0) throw Error("backbone: extra layer counts must be >= 0");
    if (c.extra_down != c.extra_up || c.extra_down < 0 || c.extra_down > 1) {
      throw Error("backbone: invalid channel progression, extra_down_up must be (0,0) or (1,1)");
    }
    if (c.dropout_low < 0.0 || c.dropout_low >= 1.0 || c.dropout_high < 0.0 || c.dropout_high >= 1.0) {
      throw Error("backbone: dropout must lie in [0,1)");
    }
  } else {
    const auto blocks = c.resolved_blocks();
    if (blocks.size() != 4) throw Error("backbone: blocks_per_stage must list 4 stages");
    for (int b : blocks) {
      if (b < 1) throw Error("backbone: every resnet stage needs at least one block");
    }
  }
}

template <typename T>
struct FeaturePyramid {
  Tensor<T> s4, s8, s16;
};

template <typename T>
class Backbone {
 public:
  virtual ~Backbone() = default;

  // image [N,3,H,W] with H, W divisible by 16.
  virtual FeaturePyramid<T> forward(const Tensor<T>& image, const ForwardContext& ctx) = 0;

  // Channels at strides 4, 8, 16.
  virtual std::array<int, 3> pyramid_channels() const = 0;

  const BackboneConfig& config() const { return config_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  const ParamRegistry<T>& registry() const { return registry_; }

 protected:
  static void check_geometry(const Tensor<T>& image) {
    if (image.rank() != 4 || image.dim(1) != 3) {
      throw ShapeError("backbone: expected image [N,3,H,W], got " + shape_str(image.shape()));
    }
    if (image.dim(2) % 16 != 0 || image.dim(3) % 16 != 0) {
      throw ShapeError("backbone: input " + std::to_string(image.dim(2)) + "x" + std::to_string(image.dim(3)) +
                       " is not divisible by 16");
    }
  }

  BackboneConfig config_;
  std::vector<LayerSpec> layers_;
  ParamRegistry<T> registry_;
};

// ERFNet with the repair additions: an extra downsampler + non-bt-1D stage
// after the base encoder (stride 16), an extra upsampler opening the decoder,
// and extra stride-1 deconvolutions closing it.
template <typename T>
class ErfBackbone final : public Backbone<T> {
 public:
  ErfBackbone(const BackboneConfig& config, Rng& rng) {
    validate(config);
    this->config_ = config;
    ch_ = config.resolved_stage_channels();
    const int c0 = ch_[0], c1 = ch_[1], c2 = ch_[2], c3 = ch_[3];
    auto& L = this->layers_;

    down1_ = Downsampler<T>({3, c0}, rng);
    L.push_back(down1_.spec("enc.down1", LayerOrigin::base, 2));
    down2_ = Downsampler<T>({c0, c1}, rng);
    L.push_back(down2_.spec("enc.down2", LayerOrigin::base, 4));
    for (int i = 0; i < 5; ++i) {
      s4_blocks_.emplace_back(NonBt1DSpec{c1, 1, config.dropout_low}, rng);
      L.push_back(s4_blocks_.back().spec("enc.s4." + std::to_string(i), LayerOrigin::base, 4));
    }
    down3_ = Downsampler<T>({c1, c2}, rng);
    L.push_back(down3_.spec("enc.down3", LayerOrigin::base, 8));
    const int base_dil[] = {2, 4, 8, 16};
    for (int i = 0; i < 8; ++i) {
      s8_blocks_.emplace_back(NonBt1DSpec{c2, base_dil[i % 4], config.dropout_high}, rng);
      L.push_back(s8_blocks_.back().spec("enc.s8." + std::to_string(i), LayerOrigin::base, 8));
    }

    const bool adapter = config.extra_down == 1;
    const int extra_c = adapter ? c3 : c2;
    const int extra_stride = adapter ? 16 : 8;
    if (adapter) {
      extra_down_ = Downsampler<T>({c2, c3}, rng);
      L.push_back(extra_down_.spec("repair.down", LayerOrigin::repair, 16));
    }
    const int extra_dil[] = {1, 2, 4, 8};
    for (int i = 0; i < config.extra_blocks; ++i) {
      extra_blocks_.emplace_back(NonBt1DSpec{extra_c, extra_dil[i % 4], config.dropout_high}, rng);
      L.push_back(extra_blocks_.back().spec("repair.block." + std::to_string(i), LayerOrigin::repair, extra_stride));
    }
    if (adapter) {
      extra_up_ = UpsamplerBlock<T>(c3, c2, rng);
      L.push_back(extra_up_.spec("repair.up", LayerOrigin::repair, 8));
    }

    dec_up1_ = UpsamplerBlock<T>(c2, c1, rng);
    L.push_back(dec_up1_.spec("dec.up1", LayerOrigin::base, 4));
    for (int i = 0; i < 2; ++i) {
      dec_s4_.emplace_back(NonBt1DSpec{c1, 1, 0.0}, rng);
      L.push_back(dec_s4_.back().spec("dec.s4." + std::to_string(i), LayerOrigin::base, 4));
    }
    dec_up2_ = UpsamplerBlock<T>(c1, c0, rng);
    L.push_back(dec_up2_.spec("dec.up2", LayerOrigin::base, 2));
    for (int i = 0; i < 2; ++i) {
      dec_s2_.emplace_back(NonBt1DSpec{c0, 1, 0.0}, rng);
      L.push_back(dec_s2_.back().spec("dec.s2." + std::to_string(i), LayerOrigin::base, 2));
    }
    const int out_c = config.extra_deconvs > 0 ? c0 : 1;
    output_ = ConvTranspose2dLayer<T>(c0, out_c, 2, ConvTranspose2dOptions::square(2, 0, 0), true, rng);
    L.push_back({"dec.output", LayerKind::deconv, LayerOrigin::base, c0, out_c, 1, 1, 1});
    for (int i = 0; i < config.extra_deconvs; ++i) {
      const int oc = i + 1 == config.extra_deconvs ? 1 : c0;
      tail_.emplace_back(c0, oc, 3, ConvTranspose2dOptions::square(1, 1, 0), true, rng);
      L.push_back({"repair.tail." + std::to_string(i), LayerKind::deconv, LayerOrigin::repair, c0, oc, 1, 1, 1});
    }

    auto& reg = this->registry_;
    down1_.collect("enc.down1", reg);
    down2_.collect("enc.down2", reg);
    for (std::size_t i = 0; i < s4_blocks_.size(); ++i) s4_blocks_[i].collect("enc.s4." + std::to_string(i), reg);
    down3_.collect("enc.down3", reg);
    for (std::size_t i = 0; i < s8_blocks_.size(); ++i) s8_blocks_[i].collect("enc.s8." + std::to_string(i), reg);
    if (adapter) extra_down_.collect("repair.down", reg);
    for (std::size_t i = 0; i < extra_blocks_.size(); ++i) {
      extra_blocks_[i].collect("repair.block." + std::to_string(i), reg);
    }
    if (adapter) extra_up_.collect("repair.up", reg);
    dec_up1_.collect("dec.up1", reg);
    for (std::size_t i = 0; i < dec_s4_.size(); ++i) dec_s4_[i].collect("dec.s4." + std::to_string(i), reg);
    dec_up2_.collect("dec.up2", reg);
    for (std::size_t i = 0; i < dec_s2_.size(); ++i) dec_s2_[i].collect("dec.s2." + std::to_string(i), reg);
    output_.collect("dec.output", "dec.output", reg);
    for (std::size_t i = 0; i < tail_.size(); ++i) {
      const std::string name = "repair.tail." + std::to_string(i);
      tail_[i].collect(name, name, reg);
    }
  }

  FeaturePyramid<T> forward(const Tensor<T>& image, const ForwardContext& ctx) override {
    this->check_geometry(image);
    if (this->config_.extra_down != 1) {
      throw ShapeError("erf backbone without the stride-16 adapter pair cannot emit a stride-16 feature");
    }
    FeaturePyramid<T> p;
    auto x = down2_.forward(down1_.forward(image, ctx), ctx);
    for (auto& b : s4_blocks_) x = b.forward(x, ctx);
    x = down3_.forward(x, ctx);
    for (auto& b : s8_blocks_) x = b.forward(x, ctx);
    x = extra_down_.forward(x, ctx);
    for (auto& b : extra_blocks_) x = b.forward(x, ctx);
    p.s16 = x;
    p.s8 = extra_up_.forward(x, ctx);
    x = dec_up1_.forward(p.s8, ctx);
    for (auto& b : dec_s4_) x = b.forward(x, ctx);
    p.s4 = x;
    return p;
  }

  // Full-resolution lane segmentation logits [N,1,H,W], continuing the
  // decoder past the stride-4 tap.
  Tensor<T> forward_segmentation(const FeaturePyramid<T>& pyramid, const ForwardContext& ctx) {
    auto x = dec_up2_.forward(pyramid.s4, ctx);
    for (auto& b : dec_s2_) x = b.forward(x, ctx);
    x = output_(x);
    for (std::size_t i = 0; i < tail_.size(); ++i) x = tail_[i](relu(x));
    return x;
  }

  std::array<int, 3> pyramid_channels() const override {
    return {ch_[1], ch_[2], this->config_.extra_down == 1 ? ch_[3] : ch_[2]};
  }

 private:
  std::vector<int> ch_;
  Downsampler<T> down1_, down2_, down3_, extra_down_;
  std::vector<NonBt1D<T>> s4_blocks_, s8_blocks_, extra_blocks_, dec_s4_, dec_s2_;
  UpsamplerBlock<T> extra_up_, dec_up1_, dec_up2_;
  ConvTranspose2dLayer<T> output_;
  std::vector<ConvTranspose2dLayer<T>> tail_;
};

// ResNet trunk of basic blocks. The last stage keeps stride 16 and dilates
// instead, so the three taps land on strides 4, 8 and 16.
template <typename T>
class ResNetBackbone final : public Backbone<T> {
 public:
  ResNetBackbone(const BackboneConfig& config, Rng& rng) {
    validate(config);
    this->config_ = config;
    ch_ = config.resolved_stage_channels();
    const auto blocks = config.resolved_blocks();
    auto& L = this->layers_;
    auto& reg = this->registry_;

    stem_ = Conv2dLayer<T>(3, ch_[0], 7, 7, Conv2dOptions::square(2, 3), false, rng);
    stem_bn_ = BatchNorm2dLayer<T>(ch_[0], T(1e-5));
    L.push_back({"stem", LayerKind::conv, LayerOrigin::base, 3, ch_[0], 2, 1, 1});
    stem_.collect("stem.conv", "stem", reg);
    stem_bn_.collect("stem.bn", "stem", reg);

    const int strides[] = {1, 2, 2, 1};
    const int dilations[] = {1, 1, 1, 2};
    const int out_stride[] = {4, 8, 16, 16};
    int in_c = ch_[0];
    for (int s = 0; s < 4; ++s) {
      stages_.emplace_back();
      for (int b = 0; b < blocks[static_cast<std::size_t>(s)]; ++b) {
        BasicBlockSpec spec{in_c, ch_[static_cast<std::size_t>(s)], b == 0 ? strides[s] : 1, dilations[s]};
        stages_.back().emplace_back(spec, rng);
        const std::string name = "layer" + std::to_string(s + 1) + "." + std::to_string(b);
        L.push_back(stages_.back().back().spec(name, LayerOrigin::base, out_stride[s]));
        stages_.back().back().collect(name, reg);
        in_c = spec.out_channels;
      }
    }
  }

  FeaturePyramid<T> forward(const Tensor<T>& image, const ForwardContext& ctx) override {
    this->check_geometry(image);
    auto x = maxpool2(relu(stem_bn_(stem_(image), ctx.training)));
    FeaturePyramid<T> p;
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      for (auto& b : stages_[s]) x = b.forward(x, ctx);
      if (s == 0) p.s4 = x;
      if (s == 1) p.s8 = x;
    }
    p.s16 = x;
    return p;
  }

  std::array<int, 3> pyramid_channels() const override { return {ch_[0], ch_[1], ch_[3]}; }

 private:
  std::vector<int> ch_;
  Conv2dLayer<T> stem_;
  BatchNorm2dLayer<T> stem_bn_;
  std::vector<std::vector<BasicBlock<T>>> stages_;
};

template <typename T>
std::unique_ptr<Backbone<T>> build_backbone(const BackboneConfig& config, Rng& rng) {
  validate(config);
  if (config.variant == BackboneVariant::erf_modified) return std::make_unique<ErfBackbone<T>>(config, rng);
  return std::make_unique<ResNetBackbone<T>>(config, rng);
}

template <typename T>
FeaturePyramid<T> forward_backbone(Backbone<T>& backbone, const Tensor<T>& image, const ForwardContext& ctx = {}) {
  return backbone.forward(image, ctx);
}

// base_layers uses the reference layer numbering; repair additions are
// counted per convolution.
struct LayerCensus {
  int base_layers = 0;
  int repair_convs = 0;
  int conv_ops = 0;
  int total() const { return base_layers + repair_convs; }
};

inline LayerCensus census(const std::vector<LayerSpec>& layers) {
  LayerCensus c;
  for (const auto& l : layers) {
    if (l.origin == LayerOrigin::head) continue;
    if (l.origin == LayerOrigin::base) c.base_layers += l.numbered_layers;
    if (l.origin == LayerOrigin::repair) c.repair_convs += l.conv_ops;
    c.conv_ops += l.conv_ops;
  }
  return c;
}

struct ParamRow {
  std::string name;
  std::string layer;
  Shape shape;
  std::int64_t count = 0;
};

struct ParamReport {
  std::int64_t total_params = 0;
  std::vector<ParamRow> per_layer;
  std::int64_t header_bytes = 0;
  std::int64_t serialized_bytes_estimate = 0;  // 4 * total_params + header_bytes
};

// Bytes a checkpoint spends outside the f32 payload (see checkpoint.hpp).
inline std::int64_t checkpoint_header_bytes(const std::vector<std::pair<std::string, std::size_t>>& name_and_rank) {
  std::int64_t bytes = 4 + 4 + 4;
  for (const auto& [name, rank] : name_and_rank) {
    bytes += 4 + static_cast<std::int64_t>(name.size()) + 1 + 4 * static_cast<std::int64_t>(rank);
  }
  return bytes;
}

template <typename T>
ParamReport audit_parameters(const ParamRegistry<T>& registry) {
  ParamReport r;
  std::vector<std::pair<std::string, std::size_t>> header;
  for (const auto& e : registry.parameters()) {
    r.per_layer.push_back({e.name, e.layer, e.tensor.shape(), e.tensor.numel()});
    r.total_params += e.tensor.numel();
    header.emplace_back(e.name, e.tensor.rank());
  }
  r.header_bytes = checkpoint_header_bytes(header);
  r.serialized_bytes_estimate = 4 * r.total_params + r.header_bytes;
  return r;
}

template <typename T>
ParamReport audit_parameters(const Backbone<T>& backbone) {
  return audit_parameters(backbone.registry());
}

struct ComparisonRow {
  std::string layer;
  std::int64_t count_a = 0;
  std::int64_t count_b = 0;
};

struct ComparisonReport {
  std::string label_a, label_b;
  std::int64_t total_a = 0, total_b = 0;
  std::int64_t bytes_a = 0, bytes_b = 0;
  double param_ratio = 0.0;  // total_a / total_b
  double byte_ratio = 0.0;   // bytes_a / bytes_b
  std::vector<ComparisonRow> rows;

  std::string to_markdown() const {
    std::ostringstream os;
    os << "| Layer | " << label_a << " | " << label_b << " |\n|---|---:|---:|\n";
    for (const auto& r : rows) os << "| " << r.layer << " | " << r.count_a << " | " << r.count_b << " |\n";
    os << "| **total params** | " << total_a << " | " << total_b << " |\n";
    os << "| **checkpoint bytes** | " << bytes_a << " | " << bytes_b << " |\n";
    os << "\nparameter ratio " << label_a << "/" << label_b << ": " << param_ratio << "\n";
    os << "byte ratio " << label_a << "/" << label_b << ": " << byte_ratio << "\n";
    return os.str();
  }
};

// Side-by-side per-layer counts of two registries, rows keyed by layer name
// in first-appearance order (A's layers, then B-only layers).
template <typename T>
ComparisonReport compare_registries(const ParamRegistry<T>& a, const ParamRegistry<T>& b, std::string label_a,
                                    std::string label_b) {
  ComparisonReport rep;
  rep.label_a = std::move(label_a);
  rep.label_b = std::move(label_b);
  std::vector<std::string> order;
  std::map<std::string, ComparisonRow> rows;
  auto fill = [&](const ParamRegistry<T>& reg, bool first) {
    for (const auto& e : reg.parameters()) {
      auto [it, inserted] = rows.try_emplace(e.layer, ComparisonRow{e.layer, 0, 0});
      if (inserted) order.push_back(e.layer);
      (first ? it->second.count_a : it->second.count_b) += e.tensor.numel();
    }
  };
  fill(a, true);
  fill(b, false);
  for (const auto& name : order) rep.rows.push_back(rows[name]);
  const auto ra = audit_parameters(a), rb = audit_parameters(b);
  rep.total_a = ra.total_params;
  rep.total_b = rb.total_params;
  rep.bytes_a = ra.serialized_bytes_estimate;
  rep.bytes_b = rb.serialized_bytes_estimate;
  rep.param_ratio = rep.total_b ? static_cast<double>(rep.total_a) / static_cast<double>(rep.total_b) : 0.0;
  rep.byte_ratio = rep.bytes_b ? static_cast<double>(rep.bytes_a) / static_cast<double>(rep.bytes_b) : 0.0;
  return rep;
}

inline ComparisonReport compare_backbones(const BackboneConfig& a, const BackboneConfig& b, std::uint64_t seed = 0) {
  Rng ra(seed), rb(seed);
  auto ga = build_backbone<float>(a, ra);
  auto gb = build_backbone<float>(b, rb);
  return compare_registries(ga->registry(), gb->registry(), to_string(a.variant), to_string(b.variant));
}

}  // namespace erfcond
