#include <gtest/gtest.h>

#include <random>

#include "test_support.hpp"

using namespace erfcond;
using testutil::grad_check;
using testutil::probe;
using testutil::random_tensor;

namespace {

using Inputs = std::vector<Tensor<double>>;

template <typename Block>
ParamRegistry<double> registry_of(const Block& b) {
  ParamRegistry<double> reg;
  b.collect("blk", reg);
  return reg;
}

// Every trainable tensor of the block plus the input, perturbed in place.
template <typename Block>
double block_grad_error(Block& block, const Tensor<double>& x, std::uint64_t seed) {
  Inputs in{x};
  for (const auto& e : registry_of(block).parameters()) in.push_back(e.tensor);
  const Tensor<double> xin = in[0];
  auto r = grad_check(
      [&](const Inputs&) { return probe(block.forward(xin, ForwardContext{true, nullptr}), seed); }, in);
  return r.max_error;
}

void randomize(ParamRegistry<double> reg, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(-0.5, 0.5);
  for (auto& e : reg.parameters()) {
    for (auto& v : e.tensor.data()) v = d(rng);
  }
}

}  // namespace

TEST(FactorizationSavings, TwoThirdsForThreeByThree) {
  for (std::int64_t c = 1; c <= 512; ++c) {
    const auto s = factorization_savings(3, c);
    EXPECT_EQ(s.full_weights, 9 * c * c);
    EXPECT_EQ(s.factorized_weights, 6 * c * c);
    EXPECT_NEAR(s.ratio, 2.0 / 3.0, 1e-12);
  }
  EXPECT_DOUBLE_EQ(factorization_savings(5, 7).ratio, 0.4);
  EXPECT_THROW(factorization_savings(0, 4), Error);
}

TEST(ParameterCensus, BlocksAt64Channels) {
  Rng rng(1);
  NonBt1D<float> nb({64, 1, 0.0}, rng);
  ParamRegistry<float> reg;
  nb.collect("nb", reg);
  EXPECT_EQ(reg.count(ParamKind::trainable), 49664);

  Conv2dLayer<float> full(64, 64, 3, 3, Conv2dOptions::square(1, 1), true, rng);
  ParamRegistry<float> freg;
  full.collect("c", "c", freg);
  EXPECT_EQ(freg.count(ParamKind::trainable), 36928);

  BasicBlock<float> bb({64, 64, 1, 1}, rng);
  EXPECT_FALSE(bb.has_projection());
  EXPECT_EQ(bb.conv1.weight.numel() + bb.conv2.weight.numel(), 73728);
}

TEST(NonBt1D, ShapeAndZeroParamsGiveReluOfInput) {
  Rng rng(2);
  NonBt1D<float> nb({8, 2, 0.3}, rng);
  std::mt19937_64 g(3);
  auto x = random_tensor<float>(Shape{2, 8, 6, 5}, g);
  EXPECT_EQ(nb.forward(x, {}).shape(), x.shape());

  ParamRegistry<float> reg;
  nb.collect("nb", reg);
  for (auto& e : reg.parameters()) {
    for (auto& v : e.tensor.data()) v = 0.0f;
  }
  const auto y = nb.forward(x, {});
  for (std::int64_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], std::max(0.0f, x[i]));

  EXPECT_THROW(nb.forward(random_tensor<float>(Shape{1, 4, 6, 5}, g), {}), ShapeError);
  EXPECT_THROW(NonBt1D<float>({8, 0, 0.0}, rng), Error);
  Rng dr(4);
  EXPECT_THROW(nb.forward(x, ForwardContext{true, nullptr}), Error);
  EXPECT_NO_THROW(nb.forward(x, ForwardContext{true, &dr}));
}

TEST(Downsampler, ShapesAndErrors) {
  Rng rng(5);
  Downsampler<float> ds({3, 16}, rng);
  std::mt19937_64 g(6);
  auto x = random_tensor<float>(Shape{1, 3, 8, 10}, g);
  const auto y = ds.forward(x, {});
  EXPECT_EQ(y.shape(), (Shape{1, 16, 4, 5}));
  // Last channels of the concat are the max-pooled input.
  const auto br = ds.branches(x);
  const auto mp = maxpool2(x);
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t k = 0; k < 20; ++k) EXPECT_EQ(br[(13 + c) * 20 + k], mp[c * 20 + k]);
  EXPECT_THROW(ds.forward(random_tensor<float>(Shape{1, 3, 7, 10}, g), {}), ShapeError);
  EXPECT_THROW(ds.forward(random_tensor<float>(Shape{1, 4, 8, 10}, g), {}), ShapeError);
  EXPECT_THROW(Downsampler<float>({16, 16}, rng), Error);
}

TEST(BasicBlock, ProjectionAndShapes) {
  Rng rng(7);
  BasicBlock<float> down({8, 16, 2, 1}, rng);
  EXPECT_TRUE(down.has_projection());
  std::mt19937_64 g(8);
  EXPECT_EQ(down.forward(random_tensor<float>(Shape{2, 8, 8, 6}, g), {}).shape(), (Shape{2, 16, 4, 3}));
  BasicBlock<float> dil({8, 8, 1, 2}, rng);
  EXPECT_EQ(dil.forward(random_tensor<float>(Shape{1, 8, 7, 5}, g), {}).shape(), (Shape{1, 8, 7, 5}));
}

class BlockGradient : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(BlockGradient, NonBt1DTrainingMode) {
  Rng rng(GetParam());
  NonBt1D<double> nb({3, 2, 0.0}, rng);
  std::mt19937_64 g(GetParam() + 1000);
  randomize(registry_of(nb), g);
  const auto x = random_tensor(Shape{2, 3, 5, 4}, g);
  EXPECT_LT(block_grad_error(nb, x, GetParam()), 1e-6);
}

TEST_P(BlockGradient, BasicBlockTrainingMode) {
  Rng rng(GetParam());
  BasicBlock<double> bb({2, 3, 2, 1}, rng);
  std::mt19937_64 g(GetParam() + 2000);
  randomize(registry_of(bb), g);
  const auto x = random_tensor(Shape{2, 2, 8, 8}, g);
  EXPECT_LT(block_grad_error(bb, x, GetParam()), 1e-6);
}

INSTANTIATE_TEST_SUITE_P(Seeds, BlockGradient, ::testing::Values(11, 23, 37, 41, 59));
