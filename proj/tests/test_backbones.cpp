#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "test_support.hpp"

using namespace erfcond;
using testutil::random_tensor;

namespace {

BackboneConfig small(BackboneVariant v, int h = 64, int w = 32) {
  auto c = v == BackboneVariant::erf_modified ? BackboneConfig::erf_default() : BackboneConfig::resnet_default();
  c.input_height = h;
  c.input_width = w;
  c.width_multiplier = 0.25;
  return c;
}

}  // namespace

TEST(Census, ErfDefaultHas59ConvLayers) {
  Rng rng(1);
  auto b = build_backbone<float>(BackboneConfig::erf_default(), rng);
  const auto c = census(b->layers());
  EXPECT_EQ(c.base_layers, 23);
  EXPECT_EQ(c.repair_convs, 8 * 4 + 2 + 1 + 1);
  EXPECT_EQ(c.total(), 59);

  int added_blocks = 0, deconvs = 0, downs = 0, ups = 0;
  for (const auto& l : b->layers()) {
    if (l.origin != LayerOrigin::repair) continue;
    if (l.kind == LayerKind::non_bt_1d) ++added_blocks;
    if (l.kind == LayerKind::downsampler) ++downs;
    if (l.kind == LayerKind::deconv && l.name == "repair.up") ++ups;
    if (l.kind == LayerKind::deconv && l.name != "repair.up") ++deconvs;
  }
  EXPECT_EQ(added_blocks, 8);
  EXPECT_EQ(deconvs, 2);
  EXPECT_EQ(downs, 1);
  EXPECT_EQ(ups, 1);
}

TEST(Census, ExtraLayerCountsAreConfigurable) {
  auto cfg = small(BackboneVariant::erf_modified);
  cfg.extra_blocks = 3;
  cfg.extra_deconvs = 1;
  Rng rng(2);
  auto b = build_backbone<float>(cfg, rng);
  EXPECT_EQ(census(b->layers()).total(), 23 + 3 * 4 + 1 + 1 + 1);
}

TEST(Pyramid, ErfShapesAtToyGeometry) {
  auto cfg = small(BackboneVariant::erf_modified, 256, 128);
  Rng rng(3);
  auto b = build_backbone<float>(cfg, rng);
  std::mt19937_64 g(4);
  const auto p = forward_backbone(*b, random_tensor<float>(Shape{1, 3, 256, 128}, g));
  const auto ch = b->pyramid_channels();
  EXPECT_EQ(p.s4.shape(), (Shape{1, ch[0], 64, 32}));
  EXPECT_EQ(p.s8.shape(), (Shape{1, ch[1], 32, 16}));
  EXPECT_EQ(p.s16.shape(), (Shape{1, ch[2], 16, 8}));
}

TEST(Pyramid, ResNetShapes) {
  auto cfg = small(BackboneVariant::resnet_basic, 64, 48);
  cfg.blocks_per_stage = {1, 1, 1, 1};
  Rng rng(5);
  auto b = build_backbone<float>(cfg, rng);
  std::mt19937_64 g(6);
  const auto p = forward_backbone(*b, random_tensor<float>(Shape{2, 3, 64, 48}, g));
  const auto ch = b->pyramid_channels();
  EXPECT_EQ(p.s4.shape(), (Shape{2, ch[0], 16, 12}));
  EXPECT_EQ(p.s8.shape(), (Shape{2, ch[1], 8, 6}));
  EXPECT_EQ(p.s16.shape(), (Shape{2, ch[2], 4, 3}));
}

TEST(Backbone, SegmentationHeadIsFullResolution) {
  auto cfg = small(BackboneVariant::erf_modified);
  Rng rng(7);
  ErfBackbone<float> b(cfg, rng);
  std::mt19937_64 g(8);
  const auto p = b.forward(random_tensor<float>(Shape{1, 3, 64, 32}, g), {});
  EXPECT_EQ(b.forward_segmentation(p, {}).shape(), (Shape{1, 1, 64, 32}));
}

TEST(Backbone, ConfigurationErrors) {
  Rng rng(9);
  auto bad_width = small(BackboneVariant::erf_modified);
  bad_width.width_multiplier = 0.0;
  EXPECT_THROW(build_backbone<float>(bad_width, rng), Error);

  auto bad_prog = small(BackboneVariant::erf_modified);
  bad_prog.stage_channels = {16, 64, 32, 128};
  try {
    build_backbone<float>(bad_prog, rng);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("invalid channel progression"), std::string::npos);
  }

  auto bad_adapter = small(BackboneVariant::erf_modified);
  bad_adapter.extra_down = 1;
  bad_adapter.extra_up = 0;
  EXPECT_THROW(build_backbone<float>(bad_adapter, rng), Error);

  auto bad_blocks = small(BackboneVariant::resnet_basic);
  bad_blocks.blocks_per_stage = {1, 0, 1, 1};
  EXPECT_THROW(build_backbone<float>(bad_blocks, rng), Error);
}

TEST(Backbone, GeometryErrors) {
  Rng rng(10);
  auto b = build_backbone<float>(small(BackboneVariant::erf_modified), rng);
  std::mt19937_64 g(11);
  EXPECT_THROW(forward_backbone(*b, random_tensor<float>(Shape{1, 3, 60, 32}, g)), ShapeError);
  EXPECT_THROW(forward_backbone(*b, random_tensor<float>(Shape{1, 1, 64, 32}, g)), ShapeError);

  auto no_adapter = small(BackboneVariant::erf_modified);
  no_adapter.extra_down = no_adapter.extra_up = 0;
  auto nb = build_backbone<float>(no_adapter, rng);
  EXPECT_THROW(forward_backbone(*nb, random_tensor<float>(Shape{1, 3, 64, 32}, g)), ShapeError);
}

TEST(Audit, TotalsMatchRegistryAndCheckpointPayload) {
  Rng rng(12);
  auto b = build_backbone<float>(small(BackboneVariant::erf_modified), rng);
  const auto rep = audit_parameters(*b);
  std::int64_t sum = 0;
  for (const auto& r : rep.per_layer) {
    EXPECT_EQ(r.count, shape_numel(r.shape));
    sum += r.count;
  }
  EXPECT_EQ(rep.total_params, sum);
  EXPECT_EQ(rep.total_params, b->registry().count(ParamKind::trainable));
  const auto bytes = encode_checkpoint(b->registry().parameters());
  EXPECT_EQ(static_cast<std::int64_t>(bytes.size()), rep.serialized_bytes_estimate);
  EXPECT_EQ(static_cast<std::int64_t>(bytes.size()) - rep.header_bytes, 4 * rep.total_params);
}

TEST(Audit, ComparisonListsEveryLayer) {
  const auto cmp = compare_backbones(small(BackboneVariant::erf_modified), small(BackboneVariant::resnet_basic));
  std::int64_t a = 0, b = 0;
  for (const auto& r : cmp.rows) {
    a += r.count_a;
    b += r.count_b;
  }
  EXPECT_EQ(a, cmp.total_a);
  EXPECT_EQ(b, cmp.total_b);
  EXPECT_NE(cmp.to_markdown().find("byte ratio"), std::string::npos);
}

TEST(Audit, FullScaleByteRatioWithinBand) {
  const auto cmp = compare_backbones(BackboneConfig::erf_default(), BackboneConfig::resnet_default());
  EXPECT_GE(cmp.byte_ratio, 0.40);
  EXPECT_LE(cmp.byte_ratio, 0.60);
}
