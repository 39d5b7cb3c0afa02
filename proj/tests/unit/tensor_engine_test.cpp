#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "pfq/errors.hpp"
#include "pfq/ops.hpp"
#include "test_support.hpp"

using namespace pfq;
using pfq::testing::dot;
using pfq::testing::numeric_gradient;
using pfq::testing::random_tensor;
using pfq::testing::relative_error;

namespace {

// Direct evaluation of the convolution sum, kept independent of ops.cpp.
Tensor naive_conv(const Tensor& x, const Tensor& w, const std::optional<Tensor>& b,
                  std::size_t stride, std::size_t pad, std::size_t groups = 1) {
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(0), cpg = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1, ow = (wd + 2 * pad - kw) / stride + 1;
  const std::size_t out_per_group = cout / groups;
  EXPECT_EQ(cpg * groups, cin);
  Tensor y({n, cout, oh, ow});
  for (std::size_t b0 = 0; b0 < n; ++b0)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t j = 0; j < oh; ++j)
        for (std::size_t k = 0; k < ow; ++k) {
          double s = b ? (*b)[o] : 0.0;
          const std::size_t g = o / out_per_group;
          for (std::size_t i = 0; i < cpg; ++i)
            for (std::size_t u = 0; u < kh; ++u)
              for (std::size_t v = 0; v < kw; ++v) {
                const long r = static_cast<long>(j * stride + u) - static_cast<long>(pad);
                const long c = static_cast<long>(k * stride + v) - static_cast<long>(pad);
                if (r < 0 || c < 0 || r >= static_cast<long>(h) || c >= static_cast<long>(wd)) continue;
                s += w.at(o, i, u, v) * x.at(b0, g * cpg + i, r, c);
              }
          y.at(b0, o, j, k) = s;
        }
  return y;
}

}  // namespace

TEST(Conv2d, AllOnesThreeByThree) {
  const Tensor x({1, 1, 3, 3}, 1.0);
  const ConvParams p{Tensor({1, 1, 3, 3}, 1.0), Tensor::vector({0.0})};
  const Tensor y = conv2d_forward(x, p, {1, 1, 0, 0});
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y[0], 9.0);
}

TEST(Conv2d, RampStrideTwo) {
  Tensor x({1, 1, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) x[i] = static_cast<double>(i);
  const ConvParams p{Tensor({1, 1, 2, 2}, std::vector<double>{1, 0, 0, 1}), std::nullopt};
  const Tensor y = conv2d_forward(x, p, {2, 2, 0, 0});
  EXPECT_EQ(y.storage(), (std::vector<double>{5, 9, 21, 25}));
}

TEST(Conv2d, ZeroKernelGivesBias) {
  std::mt19937_64 rng(1);
  const Tensor x = random_tensor({2, 3, 5, 5}, rng);
  const ConvParams p{Tensor({2, 3, 3, 3}), Tensor::vector({0.5, -2.0})};
  const Tensor y = conv2d_forward(x, p, {1, 1, 1, 1});
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 25; ++i) {
      EXPECT_EQ(y[(n * 2 + 0) * 25 + i], 0.5);
      EXPECT_EQ(y[(n * 2 + 1) * 25 + i], -2.0);
    }
}

TEST(Conv2d, PointwiseOnesIsIdentityPlusBias) {
  std::mt19937_64 rng(2);
  const Tensor x = random_tensor({2, 1, 4, 4}, rng);
  const ConvParams p{Tensor({1, 1, 1, 1}, 1.0), Tensor::vector({0.25})};
  const Tensor y = conv2d_forward(x, p, {1, 1, 0, 0});
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], x[i] + 0.25);
}

TEST(Conv2d, MatchesDirectSum) {
  std::mt19937_64 rng(3);
  for (std::size_t stride : {1, 2})
    for (std::size_t pad : {0, 1, 2}) {
      const Tensor x = random_tensor({2, 3, 7, 6}, rng);
      const ConvParams p{random_tensor({4, 3, 3, 3}, rng), random_tensor({4}, rng)};
      const Tensor y = conv2d_forward(x, p, {stride, stride, pad, pad});
      const Tensor ref = naive_conv(x, p.weight, p.bias, stride, pad);
      ASSERT_EQ(y.shape(), ref.shape());
      EXPECT_LT(max_abs_diff(y, ref), 1e-12);
    }
}

TEST(Conv2d, ShapeMismatchAndNonFinite) {
  const ConvParams p{Tensor({1, 2, 3, 3}), std::nullopt};
  EXPECT_THROW(conv2d_forward(Tensor({1, 3, 5, 5}), p, {1, 1, 0, 0}), ShapeError);
  EXPECT_THROW(conv2d_forward(Tensor({1, 2, 2, 2}), p, {1, 1, 0, 0}), ShapeError);
  Tensor bad({1, 2, 3, 3});
  bad[4] = std::nan("");
  EXPECT_THROW(conv2d_forward(bad, p, {1, 1, 0, 0}), NumericError);
}

TEST(Conv2d, ScalarBackward) {
  const Tensor x({1, 1, 1, 1}, 3.0);
  const ConvParams p{Tensor({1, 1, 1, 1}, -2.0), Tensor::vector({0.0})};
  const ConvGrads g = conv2d_backward(Tensor({1, 1, 1, 1}, 0.5), x, p, {1, 1, 0, 0});
  EXPECT_EQ(g.weight[0], 1.5);
  EXPECT_EQ(g.input[0], -1.0);
  EXPECT_EQ((*g.bias)[0], 0.5);
}

TEST(Conv2d, ZeroGradOutGivesZeroGradients) {
  std::mt19937_64 rng(4);
  const Tensor x = random_tensor({1, 2, 5, 5}, rng);
  const ConvParams p{random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)};
  const ConvGrads g = conv2d_backward(Tensor({1, 3, 3, 3}), x, p, {1, 1, 0, 0});
  EXPECT_EQ(g.input.max(), 0.0);
  EXPECT_EQ(g.input.min(), 0.0);
  EXPECT_EQ(g.weight.max(), 0.0);
  EXPECT_EQ(g.weight.min(), 0.0);
}

TEST(Conv2d, MissingCacheIsAnError) {
  const ConvParams p{Tensor({1, 1, 1, 1}), std::nullopt};
  EXPECT_THROW(conv2d_backward(Tensor({1, 1, 1, 1}), Tensor(), p, {1, 1, 0, 0}), ValidationError);
}

TEST(Conv2d, FiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(100 + seed);
    Tensor x = random_tensor({1, 2, 5, 5}, rng);
    ConvParams p{random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)};
    const ConvGeometry geom{1 + seed % 2, 1 + seed % 2, seed % 3, seed % 3};
    const Tensor probe = random_tensor(conv2d_forward(x, p, geom).shape(), rng);
    auto loss = [&] { return dot(conv2d_forward(x, p, geom), probe); };
    const ConvGrads g = conv2d_backward(probe, x, p, geom);
    EXPECT_LT(relative_error(g.input, numeric_gradient(x, loss)), 1e-4) << seed;
    EXPECT_LT(relative_error(g.weight, numeric_gradient(p.weight, loss)), 1e-4) << seed;
    EXPECT_LT(relative_error(*g.bias, numeric_gradient(*p.bias, loss)), 1e-4) << seed;
  }
}

TEST(Depthwise, IdentityKernels) {
  std::mt19937_64 rng(5);
  const Tensor x = random_tensor({2, 2, 4, 4}, rng);
  Tensor w({2, 1, 3, 3});
  w[4] = 1.0;
  w[9 + 4] = 1.0;
  const Tensor y = depthwise_conv2d_forward(x, {w, std::nullopt}, {1, 1, 1, 1});
  EXPECT_EQ(y, x);
}

TEST(Depthwise, ZeroKernelChannelGivesBias) {
  std::mt19937_64 rng(6);
  const Tensor x = random_tensor({1, 2, 4, 4}, rng);
  Tensor w = random_tensor({2, 1, 3, 3}, rng);
  for (std::size_t i = 9; i < 18; ++i) w[i] = 0.0;
  const Tensor y = depthwise_conv2d_forward(x, {w, Tensor::vector({0.0, 1.25})}, {1, 1, 1, 1});
  for (std::size_t i = 16; i < 32; ++i) EXPECT_EQ(y[i], 1.25);
}

TEST(Depthwise, MatchesGroupedConvOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(200 + seed);
    const std::size_t c = 4, stride = 1 + seed % 2, pad = seed % 2;
    const Tensor x = random_tensor({2, c, 6, 6}, rng);
    const DepthwiseConvParams p{random_tensor({c, 1, 3, 3}, rng), random_tensor({c}, rng)};
    const Tensor y = depthwise_conv2d_forward(x, p, {stride, stride, pad, pad});
    const Tensor ref = naive_conv(x, p.weight, p.bias, stride, pad, c);
    ASSERT_EQ(y.shape(), ref.shape());
    EXPECT_LT(max_abs_diff(y, ref), 1e-6);

    // Same thing as a full conv with a block-diagonal kernel.
    Tensor full({c, c, 3, 3});
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t k = 0; k < 9; ++k) full[(ch * c + ch) * 9 + k] = p.weight[ch * 9 + k];
    const Tensor ref2 = conv2d_forward(x, {full, p.bias}, {stride, stride, pad, pad});
    EXPECT_LT(max_abs_diff(y, ref2), 1e-6);
  }
}

TEST(Depthwise, FiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(300 + seed);
    Tensor x = random_tensor({2, 3, 5, 5}, rng);
    DepthwiseConvParams p{random_tensor({3, 1, 3, 3}, rng), random_tensor({3}, rng)};
    const ConvGeometry geom{1 + seed % 2, 1 + seed % 2, seed % 2, seed % 2};
    const Tensor probe = random_tensor(depthwise_conv2d_forward(x, p, geom).shape(), rng);
    auto loss = [&] { return dot(depthwise_conv2d_forward(x, p, geom), probe); };
    const ConvGrads g = depthwise_conv2d_backward(probe, x, p, geom);
    EXPECT_LT(relative_error(g.input, numeric_gradient(x, loss)), 1e-4);
    EXPECT_LT(relative_error(g.weight, numeric_gradient(p.weight, loss)), 1e-4);
    EXPECT_LT(relative_error(*g.bias, numeric_gradient(*p.bias, loss)), 1e-4);
  }
}

TEST(Affine, IdentityAndZero) {
  std::mt19937_64 rng(7);
  const Tensor x = random_tensor({3, 4}, rng);
  Tensor eye({4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye[i * 5] = 1.0;
  EXPECT_EQ(affine_forward(x, {eye, std::nullopt}), x);
  const Tensor y = affine_forward(x, {Tensor({4, 2}), Tensor::vector({1.0, -1.0})});
  for (std::size_t n = 0; n < 3; ++n) {
    EXPECT_EQ(y[n * 2], 1.0);
    EXPECT_EQ(y[n * 2 + 1], -1.0);
  }
}

TEST(Affine, FlattensFeatureMaps) {
  std::mt19937_64 rng(8);
  const Tensor x = random_tensor({2, 2, 1, 1}, rng);
  const AffineParams p{random_tensor({2, 3}, rng), std::nullopt};
  const Tensor y = affine_forward(x, p);
  ASSERT_EQ(y.shape(), (Shape{2, 3}));
  EXPECT_NEAR(y[4], x[2] * p.weight[1] + x[3] * p.weight[4], 1e-15);
}

TEST(Affine, FiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(400 + seed);
    Tensor x = random_tensor({3, 5}, rng);
    AffineParams p{random_tensor({5, 4}, rng), random_tensor({4}, rng)};
    const Tensor probe = random_tensor({3, 4}, rng);
    auto loss = [&] { return dot(affine_forward(x, p), probe); };
    const ConvGrads g = affine_backward(probe, x, p);
    EXPECT_LT(relative_error(g.input, numeric_gradient(x, loss)), 1e-4);
    EXPECT_LT(relative_error(g.weight, numeric_gradient(p.weight, loss)), 1e-4);
    EXPECT_LT(relative_error(*g.bias, numeric_gradient(*p.bias, loss)), 1e-4);
  }
}

TEST(Activations, ReluAndRelu6) {
  const Tensor x = Tensor::vector({-2.0, -0.0, 0.5, 6.5});
  EXPECT_EQ(relu_forward(x).storage(), (std::vector<double>{0.0, 0.0, 0.5, 6.5}));
  EXPECT_EQ(relu6_forward(x).storage(), (std::vector<double>{0.0, 0.0, 0.5, 6.0}));
  const Tensor g = Tensor::vector({1.0, 1.0, 1.0, 1.0});
  EXPECT_EQ(relu_backward(g, x).storage(), (std::vector<double>{0.0, 0.0, 1.0, 1.0}));
  EXPECT_EQ(relu6_backward(g, x).storage(), (std::vector<double>{0.0, 0.0, 1.0, 0.0}));
}

TEST(Activations, FiniteDifferencesAwayFromKinks) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(500 + seed);
    Tensor x = random_tensor({2, 3, 2, 2}, rng, -8.0, 8.0);
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (std::abs(x[i]) < 0.01 || std::abs(x[i] - 6.0) < 0.01) x[i] += 0.05;
    }
    const Tensor probe = random_tensor(x.shape(), rng);
    auto l1 = [&] { return dot(relu_forward(x), probe); };
    auto l2 = [&] { return dot(relu6_forward(x), probe); };
    EXPECT_LT(relative_error(relu_backward(probe, x), numeric_gradient(x, l1)), 1e-4);
    EXPECT_LT(relative_error(relu6_backward(probe, x), numeric_gradient(x, l2)), 1e-4);
  }
}

TEST(Pooling, ConstantMapIsExact) {
  const double v = 0.1 + 0.2;  // not representable exactly
  const Tensor x({2, 3, 7, 5}, v);
  const Tensor y = global_average_pool_forward(x);
  ASSERT_EQ(y.shape(), (Shape{2, 3}));
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_EQ(y[i], v);
}

TEST(Pooling, FiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(600 + seed);
    Tensor x = random_tensor({2, 3, 4, 3}, rng);
    const Tensor probe = random_tensor({2, 3}, rng);
    auto loss = [&] { return dot(global_average_pool_forward(x), probe); };
    EXPECT_LT(relative_error(global_average_pool_backward(probe, x.shape()),
                             numeric_gradient(x, loss)),
              1e-4);
  }
}

TEST(Add, Commutative) {
  std::mt19937_64 rng(9);
  const Tensor a = random_tensor({2, 3, 4, 4}, rng), b = random_tensor({2, 3, 4, 4}, rng);
  EXPECT_EQ(elementwise_add(a, b), elementwise_add(b, a));
  EXPECT_THROW(elementwise_add(a, Tensor({2, 3, 4, 3})), ShapeError);
}

TEST(SoftmaxCrossEntropy, UniformLogitsGiveLogK) {
  for (std::size_t k : {2, 4, 10}) {
    const Tensor logits({3, k}, 0.7);
    const std::vector<int> labels{0, 1, 1};
    EXPECT_NEAR(softmax_cross_entropy(logits, labels).loss, std::log(static_cast<double>(k)), 1e-12);
  }
}

TEST(SoftmaxCrossEntropy, FiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(700 + seed);
    Tensor logits = random_tensor({4, 5}, rng, -3.0, 3.0);
    const std::vector<int> labels{0, 4, 2, 2};
    auto loss = [&] { return softmax_cross_entropy(logits, labels).loss; };
    EXPECT_LT(relative_error(softmax_cross_entropy(logits, labels).grad, numeric_gradient(logits, loss)),
              1e-4);
  }
}

TEST(SoftmaxCrossEntropy, LabelOutOfRange) {
  const std::vector<int> labels{3};
  EXPECT_THROW(softmax_cross_entropy(Tensor({1, 3}), labels), ValidationError);
}

TEST(Tensor, InvariantsAndBitEquality) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  Tensor a({2, 2}, 1.0);
  Tensor b = a;
  EXPECT_EQ(a, b);
  b[3] = std::nextafter(1.0, 2.0);
  EXPECT_FALSE(a == b);
  Tensor c({1});
  c[0] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(require_finite(c, "c"), NumericError);
}
