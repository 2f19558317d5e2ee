#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "test_support.hpp"

using namespace erfcond;
using testutil::grad_check;
using testutil::probe;
using testutil::random_away_from_zero;
using testutil::random_tensor;

namespace {

constexpr double kGradTol = 1e-6;
constexpr std::uint64_t kSeeds[] = {11, 23, 37, 41, 59};

using Inputs = std::vector<Tensor<double>>;

}  // namespace

TEST(Tensor, ConstructionAndShapeChecks) {
  Tensor<float> t(Shape{2, 3});
  EXPECT_EQ(t.numel(), 6);
  EXPECT_THROW(Tensor<float>(Shape{2, 0}), ShapeError);
  EXPECT_THROW(Tensor<float>(Shape{2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor<float>(Shape{4}).reshape(Shape{3}), ShapeError);
}

TEST(Autodiff, SumGivesOnes) {
  auto x = Tensor<double>(Shape{2, 3}, std::vector<double>{1, -2, 3, 4, 5, -6}).set_requires_grad();
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Autodiff, ReluOfSum) {
  auto x = Tensor<double>(Shape{2}, std::vector<double>{1, -1}).set_requires_grad();
  backward(sum(relu(x)));
  EXPECT_EQ(x.grad()[0], 1.0);
  EXPECT_EQ(x.grad()[1], 0.0);
}

TEST(Autodiff, SharedSubexpressionAccumulates) {
  auto x = Tensor<double>(Shape{1}, std::vector<double>{3}).set_requires_grad();
  auto y = add(x, x);
  backward(sum(mul(y, x)));  // 2x^2 -> 4x
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Autodiff, Errors) {
  auto x = Tensor<double>(Shape{2}, std::vector<double>{1, 2}).set_requires_grad();
  EXPECT_THROW(backward(relu(x)), ShapeError);  // not a scalar
  Tensor<double> c(Shape{1}, 1.0);
  EXPECT_THROW(backward(sum(c)), Error);  // detached graph
  {
    NoGradGuard ng;
    EXPECT_FALSE(sum(x).requires_grad());
  }
  EXPECT_TRUE(sum(x).requires_grad());
}

TEST(Ops, ReluAddMaxpoolExamples) {
  Tensor<float> x(Shape{2}, std::vector<float>{1, -1});
  auto r = relu(x);
  EXPECT_EQ(r[0], 1.0f);
  EXPECT_EQ(r[1], 0.0f);
  std::mt19937_64 rng(1);
  auto y = random_tensor<float>(Shape{1, 2, 4, 4}, rng);
  auto ry = relu(y);
  auto rry = relu(ry);
  for (std::int64_t i = 0; i < ry.numel(); ++i) EXPECT_EQ(ry[i], rry[i]);
  auto z = add(y, Tensor<float>::zeros(y.shape()));
  for (std::int64_t i = 0; i < y.numel(); ++i) EXPECT_EQ(z[i], y[i]);
  EXPECT_THROW(add(y, Tensor<float>::zeros(Shape{1, 2, 4, 3})), ShapeError);

  Tensor<float> p(Shape{1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  auto mp = maxpool2(p);
  EXPECT_EQ(mp.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(mp[0], 4.0f);
  auto mc = maxpool2(Tensor<float>(Shape{1, 1, 4, 6}, 2.5f));
  EXPECT_EQ(mc.shape(), (Shape{1, 1, 2, 3}));
  for (float v : mc.data()) EXPECT_EQ(v, 2.5f);
  EXPECT_THROW(maxpool2(Tensor<float>(Shape{1, 1, 1, 4})), ShapeError);
}

TEST(Conv2d, IdentityKernelAndShape) {
  std::mt19937_64 rng(2);
  auto x = random_tensor<float>(Shape{1, 1, 5, 7}, rng);
  auto y = conv2d(x, Tensor<float>(Shape{1, 1, 1, 1}, 1.0f), Tensor<float>{}, Conv2dOptions{});
  EXPECT_EQ(y.shape(), x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);

  auto big = random_tensor<float>(Shape{1, 3, 16, 16}, rng);
  auto w = random_tensor<float>(Shape{8, 3, 3, 3}, rng);
  EXPECT_EQ(conv2d(big, w, Tensor<float>{}, Conv2dOptions::square(1, 1)).shape(), (Shape{1, 8, 16, 16}));
}

TEST(Conv2d, Errors) {
  Tensor<float> x(Shape{1, 3, 4, 4});
  EXPECT_THROW(conv2d(x, Tensor<float>(Shape{2, 4, 3, 3}), Tensor<float>{}, Conv2dOptions{}), ShapeError);
  EXPECT_THROW(conv2d(x, Tensor<float>(Shape{2, 3, 5, 5}), Tensor<float>{}, Conv2dOptions{}), ShapeError);
  Tensor<float> bad(Shape{1, 3, 4, 4});
  bad[3] = std::nanf("");
  EXPECT_THROW(conv2d(bad, Tensor<float>(Shape{2, 3, 1, 1}), Tensor<float>{}, Conv2dOptions{}), NumericError);
}

TEST(Conv2d, MatchesDirectSumOracle) {
  struct Case {
    int cin, cout, k, s, p, d, h, w;
  };
  const Case cases[] = {{3, 4, 3, 1, 1, 1, 7, 9}, {2, 3, 3, 2, 1, 1, 8, 6}, {2, 2, 3, 1, 2, 2, 9, 7},
                        {4, 2, 1, 1, 0, 1, 5, 5}, {1, 3, 5, 2, 2, 1, 10, 11}};
  std::mt19937_64 rng(3);
  for (const auto& c : cases) {
    auto x = random_tensor(Shape{2, c.cin, c.h, c.w}, rng);
    auto w = random_tensor(Shape{c.cout, c.cin, c.k, c.k}, rng);
    std::int64_t oh = 0, ow = 0;
    const auto ref = testutil::direct_conv2d(x, w, c.s, c.s, c.p, c.p, c.d, c.d, oh, ow);
    auto y = conv2d(x, w, Tensor<double>{}, Conv2dOptions::square(c.s, c.p, c.d));
    ASSERT_EQ(y.shape(), (Shape{2, c.cout, oh, ow}));
    EXPECT_LT(testutil::max_abs_diff(y.data(), std::span<const double>(ref)), 1e-12);
  }
}

TEST(Conv2d, Linearity) {
  std::mt19937_64 rng(4);
  auto x = random_tensor<float>(Shape{1, 3, 8, 8}, rng);
  auto w = random_tensor<float>(Shape{4, 3, 3, 3}, rng);
  const float alpha = 1.75f;
  auto a = conv2d(scale(x, alpha), w, Tensor<float>{}, Conv2dOptions::square(1, 1));
  auto b = scale(conv2d(x, w, Tensor<float>{}, Conv2dOptions::square(1, 1)), alpha);
  EXPECT_LT(testutil::max_abs_diff(a.data(), b.data()), 1e-5);
}

TEST(Conv2d, SeparableKernelEqualsFactorizedPair) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor<float>(Shape{1, 1, 9 + trial % 4, 7 + trial % 3}, rng);
    auto u = random_tensor<float>(Shape{1, 1, 3, 1}, rng);
    auto v = random_tensor<float>(Shape{1, 1, 1, 3}, rng);
    Tensor<float> w(Shape{1, 1, 3, 3});
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) w[i * 3 + j] = u[i] * v[j];
    auto full = conv2d(x, w, Tensor<float>{}, Conv2dOptions::square(1, 1));
    auto col = conv2d(x, u, Tensor<float>{}, Conv2dOptions{1, 1, 1, 0, 1, 1});
    auto fact = conv2d(col, v, Tensor<float>{}, Conv2dOptions{1, 1, 0, 1, 1, 1});
    EXPECT_LT(testutil::max_abs_diff(full.data(), fact.data()), 1e-5);
  }
}

TEST(ConvTranspose2d, ShapeIdentityAndAdjoint) {
  std::mt19937_64 rng(6);
  auto x = random_tensor<float>(Shape{1, 1, 4, 4}, rng);
  auto w = random_tensor<float>(Shape{1, 5, 3, 3}, rng);
  EXPECT_EQ(conv_transpose2d(x, w, Tensor<float>{}, ConvTranspose2dOptions::square(2, 1, 1)).shape(),
            (Shape{1, 5, 8, 8}));
  auto id = conv_transpose2d(x, Tensor<float>(Shape{1, 1, 1, 1}, 1.0f), Tensor<float>{}, ConvTranspose2dOptions{});
  for (std::int64_t i = 0; i < x.numel(); ++i) EXPECT_EQ(id[i], x[i]);

  struct Case {
    int s, p, op, d;
  };
  for (const auto& c : {Case{1, 1, 0, 1}, Case{2, 1, 1, 1}, Case{2, 0, 0, 1}, Case{1, 2, 0, 2}, Case{3, 1, 2, 1}}) {
    auto xin = random_tensor(Shape{2, 3, 9, 8}, rng);
    auto wt = random_tensor(Shape{4, 3, 3, 3}, rng);  // conv: 3 -> 4
    const auto y = conv2d(xin, wt, Tensor<double>{}, Conv2dOptions::square(c.s, c.p, c.d));
    auto r = random_tensor(y.shape(), rng);
    ConvTranspose2dOptions t = ConvTranspose2dOptions::square(c.s, c.p, 0, c.d);
    // Output padding that recovers the conv input size.
    t.output_pad_h = static_cast<int>(9 - conv_transpose_out_size(y.dim(2), 3, c.s, c.p, 0, c.d));
    t.output_pad_w = static_cast<int>(8 - conv_transpose_out_size(y.dim(3), 3, c.s, c.p, 0, c.d));
    const auto back = conv_transpose2d(r, wt, Tensor<double>{}, t);
    ASSERT_EQ(back.shape(), xin.shape());
    double lhs = 0.0, rhs = 0.0;
    for (std::int64_t i = 0; i < y.numel(); ++i) lhs += y[i] * r[i];
    for (std::int64_t i = 0; i < xin.numel(); ++i) rhs += xin[i] * back[i];
    EXPECT_LT(std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs)), 1e-5);
  }
}

TEST(BatchNorm, Examples) {
  // channel-constant input in training mode
  Tensor<float> xc(Shape{2, 2, 2, 2});
  for (std::int64_t b = 0; b < 2; ++b)
    for (std::int64_t c = 0; c < 2; ++c)
      for (int k = 0; k < 4; ++k) xc[(b * 2 + c) * 4 + k] = c == 0 ? 3.0f : -1.0f;
  auto g = Tensor<float>::ones(Shape{2}), be = Tensor<float>::zeros(Shape{2});
  auto rm = Tensor<float>::zeros(Shape{2}), rv = Tensor<float>::ones(Shape{2});
  auto y = batch_norm2d(xc, g, be, rm, rv, 1e-5f, 0.1f, true);
  for (float v : y.data()) EXPECT_EQ(v, 0.0f);
  EXPECT_NEAR(rm[0], 0.3f, 1e-6);

  std::mt19937_64 rng(7);
  auto r = random_tensor<float>(Shape{2, 2, 3, 3}, rng);
  auto zero_g = Tensor<float>::zeros(Shape{2});
  Tensor<float> beta(Shape{2}, std::vector<float>{0.5f, -0.25f});
  auto rm2 = Tensor<float>::zeros(Shape{2}), rv2 = Tensor<float>::ones(Shape{2});
  auto yb = batch_norm2d(r, zero_g, beta, rm2, rv2, 1e-5f, 0.1f, true);
  for (std::int64_t i = 0; i < yb.numel(); ++i) EXPECT_EQ(yb[i], beta[(i / 9) % 2]);

  auto rm3 = Tensor<float>::zeros(Shape{2}), rv3 = Tensor<float>::ones(Shape{2});
  auto ye = batch_norm2d(r, g, be, rm3, rv3, 1e-9f, 0.1f, false);
  EXPECT_LT(testutil::max_abs_diff(ye.data(), r.data()), 1e-6);

  EXPECT_THROW(batch_norm2d(r, Tensor<float>::ones(Shape{3}), be, rm3, rv3, 1e-5f, 0.1f, false), ShapeError);
  EXPECT_THROW(batch_norm2d(Tensor<float>(Shape{1, 2, 1, 1}), g, be, rm3, rv3, 1e-5f, 0.1f, true), ShapeError);
}

TEST(Ops, Determinism) {
  std::mt19937_64 rng(8);
  auto x = random_tensor<float>(Shape{2, 3, 12, 10}, rng);
  auto w = random_tensor<float>(Shape{5, 3, 3, 3}, rng);
  auto a = conv2d(x, w, Tensor<float>{}, Conv2dOptions::square(2, 1));
  auto b = conv2d(x, w, Tensor<float>{}, Conv2dOptions::square(2, 1));
  for (std::int64_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checks, 64-bit, step 1e-4, five seeds per op.

class GradientCheck : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(GradientCheck, Conv2dVariants) {
  std::mt19937_64 rng(GetParam());
  const Conv2dOptions opts[] = {Conv2dOptions::square(1, 1), Conv2dOptions::square(2, 1),
                                Conv2dOptions::square(1, 2, 2), Conv2dOptions{1, 1, 1, 0, 1, 1}};
  const int kh[] = {3, 3, 3, 3}, kw[] = {3, 3, 3, 1};
  for (int i = 0; i < 4; ++i) {
    Inputs in{random_tensor(Shape{2, 2, 6, 5}, rng), random_tensor(Shape{3, 2, kh[i], kw[i]}, rng),
              random_tensor(Shape{3}, rng)};
    const auto o = opts[i];
    auto r = grad_check([&](const Inputs& v) { return probe(conv2d(v[0], v[1], v[2], o), 100); }, in);
    EXPECT_LT(r.max_error, kGradTol) << "conv variant " << i;
  }
}

TEST_P(GradientCheck, ConvTranspose2d) {
  std::mt19937_64 rng(GetParam());
  for (auto o : {ConvTranspose2dOptions::square(2, 1, 1), ConvTranspose2dOptions::square(1, 1, 0),
                 ConvTranspose2dOptions::square(2, 0, 0)}) {
    Inputs in{random_tensor(Shape{2, 2, 4, 3}, rng), random_tensor(Shape{2, 3, 3, 3}, rng),
              random_tensor(Shape{3}, rng)};
    auto r = grad_check([&](const Inputs& v) { return probe(conv_transpose2d(v[0], v[1], v[2], o), 101); }, in);
    EXPECT_LT(r.max_error, kGradTol);
  }
}

TEST_P(GradientCheck, BatchNormTrainAndEval) {
  std::mt19937_64 rng(GetParam());
  Inputs in{random_tensor(Shape{2, 3, 3, 4}, rng), random_tensor(Shape{3}, rng, 0.5, 1.5),
            random_tensor(Shape{3}, rng)};
  for (bool training : {true, false}) {
    auto r = grad_check(
        [&](const Inputs& v) {
          Tensor<double> rm(Shape{3}, 0.1), rv(Shape{3}, 0.8);
          return probe(batch_norm2d(v[0], v[1], v[2], rm, rv, 1e-3, 0.1, training), 102);
        },
        in);
    EXPECT_LT(r.max_error, kGradTol) << (training ? "train" : "eval");
  }
}

TEST_P(GradientCheck, ElementwiseOps) {
  std::mt19937_64 rng(GetParam());
  Inputs one{random_away_from_zero(Shape{2, 3, 4}, rng)};
  EXPECT_LT(grad_check([](const Inputs& v) { return probe(relu(v[0]), 103); }, one).max_error, kGradTol);
  EXPECT_LT(grad_check([](const Inputs& v) { return probe(sigmoid(v[0]), 104); }, one).max_error, kGradTol);
  EXPECT_LT(grad_check([](const Inputs& v) { return probe(scale(v[0], -1.5), 105); }, one).max_error, kGradTol);
  EXPECT_LT(grad_check([](const Inputs& v) { return sum(v[0]); }, one).max_error, kGradTol);
  Inputs two{random_tensor(Shape{3, 4}, rng), random_tensor(Shape{3, 4}, rng)};
  EXPECT_LT(grad_check([](const Inputs& v) { return probe(add(v[0], v[1]), 106); }, two).max_error, kGradTol);
  EXPECT_LT(grad_check([](const Inputs& v) { return probe(mul(v[0], v[1]), 107); }, two).max_error, kGradTol);
}

TEST_P(GradientCheck, PoolConcatDropout) {
  std::mt19937_64 rng(GetParam());
  Inputs x{random_tensor(Shape{2, 2, 5, 6}, rng)};
  EXPECT_LT(grad_check([](const Inputs& v) { return probe(maxpool2(v[0]), 108); }, x).max_error, kGradTol);
  Inputs parts{random_tensor(Shape{2, 1, 3, 3}, rng), random_tensor(Shape{2, 3, 3, 3}, rng)};
  EXPECT_LT(grad_check([](const Inputs& v) { return probe(concat_channels<double>({v[0], v[1]}), 109); }, parts)
                .max_error,
            kGradTol);
  const auto seed = GetParam();
  EXPECT_LT(grad_check(
                [seed](const Inputs& v) {
                  Rng r(seed);  // same mask on every evaluation
                  return probe(dropout(v[0], 0.3, r, true), 110);
                },
                x)
                .max_error,
            kGradTol);
}

TEST_P(GradientCheck, InstanceOps) {
  std::mt19937_64 rng(GetParam());
  Inputs map{random_tensor(Shape{2, 4, 3, 5}, rng)};
  EXPECT_LT(grad_check([](const Inputs& v) { return probe(gather_pixel(v[0], 1, 2, 3), 111); }, map).max_error,
            kGradTol);
  Inputs cc{random_tensor(Shape{2, 4, 3, 5}, rng), random_tensor(Shape{5}, rng)};
  EXPECT_LT(grad_check([](const Inputs& v) { return probe(conditional_conv(v[0], 1, v[1]), 112); }, cc).max_error,
            kGradTol);
  Inputs rp{random_tensor(Shape{4, 6}, rng), random_tensor(Shape{3}, rng)};
  EXPECT_LT(grad_check([](const Inputs& v) { return probe(row_pool_affine(v[0], v[1]), 113); }, rp).max_error,
            kGradTol);
}

TEST_P(GradientCheck, Losses) {
  std::mt19937_64 rng(GetParam());
  std::vector<float> heat(12);
  std::uniform_real_distribution<double> u(0.0, 0.9);
  for (auto& h : heat) h = static_cast<float>(u(rng));
  heat[5] = 1.0f;
  Inputs logits{random_tensor(Shape{1, 1, 3, 4}, rng, -2.0, 2.0)};
  EXPECT_LT(grad_check([&](const Inputs& v) { return focal_heatmap_loss(sigmoid(v[0]), heat); }, logits).max_error,
            kGradTol);

  Inputs loc{random_tensor(Shape{4, 6}, rng, -2.0, 2.0)};
  const std::vector<int> cols{0, 3, 5, 2};
  const std::vector<std::uint8_t> valid{1, 0, 1, 1};
  EXPECT_LT(grad_check([&](const Inputs& v) { return rowwise_location_loss(v[0], cols, valid); }, loc).max_error,
            kGradTol);
  Inputs rl{random_tensor(Shape{4}, rng, -2.0, 2.0)};
  EXPECT_LT(grad_check([&](const Inputs& v) { return vertical_range_loss(v[0], valid); }, rl).max_error, kGradTol);
}

INSTANTIATE_TEST_SUITE_P(Seeds, GradientCheck, ::testing::ValuesIn(kSeeds));
