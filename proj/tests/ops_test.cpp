#include <gtest/gtest.h>

#include <cmath>

#include "equiseg/ops.hpp"
#include "test_util.hpp"

namespace equiseg {
namespace {

using testing::random_tensor;
using testing::values;

std::vector<double> naive_matmul(const Tensor<double>& a, const Tensor<double>& b) {
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  std::vector<double> out(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t j = 0; j < m; ++j) out[i * m + j] += a[i * k + p] * b[p * m + j];
  return out;
}

// x [H, W, Ci], k [K, K, Ci, Co], accumulated tap by tap then channel by channel.
std::vector<double> naive_conv(const Tensor<double>& x, const Tensor<double>& k, std::size_t stride,
                               std::size_t pad) {
  const long h = static_cast<long>(x.dim(0)), w = static_cast<long>(x.dim(1));
  const std::size_t ci = x.dim(2), kk = k.dim(0), co = k.dim(3);
  const std::size_t ho = (x.dim(0) + 2 * pad - kk) / stride + 1, wo = (x.dim(1) + 2 * pad - kk) / stride + 1;
  std::vector<double> out(ho * wo * co, 0.0);
  for (std::size_t oy = 0; oy < ho; ++oy)
    for (std::size_t ox = 0; ox < wo; ++ox)
      for (std::size_t ky = 0; ky < kk; ++ky)
        for (std::size_t kx = 0; kx < kk; ++kx) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
          if (iy < 0 || ix < 0 || iy >= h || ix >= w) continue;
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t o = 0; o < co; ++o)
              out[(oy * wo + ox) * co + o] +=
                  x[(static_cast<std::size_t>(iy) * x.dim(1) + static_cast<std::size_t>(ix)) * ci + c] *
                  k[((ky * kk + kx) * ci + c) * co + o];
        }
  return out;
}

TEST(SoftmaxTest, SymmetricInputIsUniform) {
  auto y = ops::softmax(Tensor<double>({3}, 1.0), 0);
  for (double v : y.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(SoftmaxTest, LogThree) {
  auto y = ops::softmax(Tensor<double>({2}, std::vector<double>{0.0, std::log(3.0)}), 0);
  EXPECT_NEAR(y[0], 0.25, 1e-15);
  EXPECT_NEAR(y[1], 0.75, 1e-15);
}

TEST(SoftmaxTest, RowsSumToOneAndMatchOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor({4, 5}, rng, 3.0);
    auto y = ops::softmax(x, 1);
    for (std::size_t r = 0; r < 4; ++r) {
      double z = 0.0, s = 0.0;
      for (std::size_t c = 0; c < 5; ++c) z += std::exp(x[r * 5 + c]);
      for (std::size_t c = 0; c < 5; ++c) {
        EXPECT_GT(y[r * 5 + c], 0.0);
        EXPECT_NEAR(y[r * 5 + c], std::exp(x[r * 5 + c]) / z, 1e-12);
        s += y[r * 5 + c];
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(SoftmaxTest, LargeLogitsStayFinite) {
  auto y = ops::softmax(Tensor<double>({2}, std::vector<double>{1000.0, 999.0}), 0);
  EXPECT_NEAR(y[0], 1.0 / (1.0 + std::exp(-1.0)), 1e-12);
}

TEST(SoftmaxTest, InvalidAxisThrows) { EXPECT_THROW(ops::softmax(Tensor<double>({2, 2}), 2), ShapeError); }

TEST(MatmulTest, IdentityAndScalar) {
  Rng rng(12);
  std::vector<double> eye(9, 0.0);
  eye[0] = eye[4] = eye[8] = 1.0;
  auto m = random_tensor({3, 4}, rng);
  EXPECT_EQ(values(ops::matmul(Tensor<double>({3, 3}, eye), m)), values(m));
  auto s = ops::matmul(Tensor<double>({1, 1}, 2.0), Tensor<double>({1, 1}, 5.0));
  EXPECT_EQ(s[0], 10.0);
}

TEST(MatmulTest, MatchesTripleLoopExactly) {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
    EXPECT_EQ(values(ops::matmul(a, b)), naive_matmul(a, b));
  }
}

TEST(MatmulTest, ExtentMismatchThrows) { EXPECT_THROW(ops::matmul(Tensor<double>({2, 3}), Tensor<double>({2, 3})), ShapeError); }

TEST(LayerNormTest, ConstantRowBecomesZero) {
  auto y = ops::layer_norm(Tensor<double>({1, 4}, 7.0), Tensor<double>({4}, 1.0), Tensor<double>({4}, 0.0));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNormTest, NormalizedRowIsKept) {
  auto y = ops::layer_norm(Tensor<double>({1, 2}, std::vector<double>{-1.0, 1.0}), Tensor<double>({2}, 1.0),
                           Tensor<double>({2}, 0.0));
  EXPECT_NEAR(y[0], -1.0, 1e-6);
  EXPECT_NEAR(y[1], 1.0, 1e-6);
}

TEST(LayerNormTest, MatchesTwoPassOracle) {
  Rng rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor({3, 7}, rng, 2.0), g = random_tensor({7}, rng), b = random_tensor({7}, rng);
    auto y = ops::layer_norm(x, g, b);
    for (std::size_t r = 0; r < 3; ++r) {
      double mean = 0.0, var = 0.0;
      for (std::size_t c = 0; c < 7; ++c) mean += x[r * 7 + c];
      mean /= 7.0;
      for (std::size_t c = 0; c < 7; ++c) var += (x[r * 7 + c] - mean) * (x[r * 7 + c] - mean);
      var /= 7.0;
      for (std::size_t c = 0; c < 7; ++c)
        EXPECT_NEAR(y[r * 7 + c], (x[r * 7 + c] - mean) / std::sqrt(var + 1e-6) * g[c] + b[c], 1e-9);
    }
  }
}

TEST(LayerNormTest, GainMismatchThrows) {
  EXPECT_THROW(ops::layer_norm(Tensor<double>({2, 3}), Tensor<double>({2}), Tensor<double>({3})), ShapeError);
}

TEST(Conv2dTest, IdentityPointwiseKernel) {
  Rng rng(15);
  auto x = random_tensor({4, 5, 3}, rng);
  std::vector<double> k(9, 0.0);
  k[0] = k[4] = k[8] = 1.0;
  EXPECT_EQ(values(ops::conv2d(x, Tensor<double>({1, 1, 3, 3}, k), 1, 0)), values(x));
}

TEST(Conv2dTest, OnesCountTaps) {
  auto y = ops::conv2d(Tensor<double>({5, 5, 1}, 1.0), Tensor<double>({3, 3, 1, 1}, 1.0), 1, 0);
  EXPECT_EQ(y.shape(), (Shape{3, 3, 1}));
  for (double v : y.data()) EXPECT_EQ(v, 9.0);
}

TEST(Conv2dTest, MatchesSlidingWindowExactly) {
  Rng rng(16);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t stride = 1 + trial % 3, pad = trial % 2, k = trial % 4 == 0 ? 1 : 3;
    auto x = random_tensor({7, 6, 2}, rng), w = random_tensor({k, k, 2, 3}, rng);
    auto y = ops::conv2d(x, w, stride, pad);
    EXPECT_EQ(y.dim(0), (7 + 2 * pad - k) / stride + 1);
    EXPECT_EQ(y.dim(1), (6 + 2 * pad - k) / stride + 1);
    EXPECT_EQ(values(y), naive_conv(x, w, stride, pad));
  }
}

TEST(Conv2dTest, KernelLargerThanInputThrows) {
  EXPECT_THROW(ops::conv2d(Tensor<double>({2, 2, 1}), Tensor<double>({3, 3, 1, 1}), 1, 0), ShapeError);
  EXPECT_THROW(ops::conv2d(Tensor<double>({4, 4, 2}), Tensor<double>({3, 3, 1, 1}), 1, 0), ShapeError);
}

TEST(DepthwiseConvTest, MatchesPerChannelOracle) {
  Rng rng(17);
  auto x = random_tensor({5, 4, 3}, rng), k = random_tensor({3, 3, 3}, rng);
  auto y = ops::depthwise_conv2d(x, k, 1, 1);
  for (std::size_t c = 0; c < 3; ++c) {
    std::vector<double> xc(20), kc(9);
    for (std::size_t i = 0; i < 20; ++i) xc[i] = x[i * 3 + c];
    for (std::size_t i = 0; i < 9; ++i) kc[i] = k[i * 3 + c];
    const auto ref = naive_conv(Tensor<double>({5, 4, 1}, xc), Tensor<double>({3, 3, 1, 1}, kc), 1, 1);
    for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(y[i * 3 + c], ref[i]);
  }
}

TEST(BilinearTest, SameSizeIsIdentity) {
  Rng rng(18);
  auto x = random_tensor({3, 4, 2}, rng);
  EXPECT_EQ(values(ops::bilinear_upsample(x, 3, 4)), values(x));
}

TEST(BilinearTest, ConstantStaysConstant) {
  auto y = ops::bilinear_upsample(Tensor<double>({2, 2}, 3.5), 4, 4);
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 3.5);
}

TEST(BilinearTest, HalfPixelColumns) {
  auto y = ops::bilinear_upsample(Tensor<double>({2, 2}, std::vector<double>{0, 1, 0, 1}), 4, 4);
  const double expected[4] = {0.0, 0.25, 0.75, 1.0};
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(y[r * 4 + c], expected[c]);
}

TEST(BilinearTest, MatchesPerPixelFormula) {
  Rng rng(19);
  auto x = random_tensor({3, 5}, rng);
  auto y = ops::bilinear_upsample(x, 7, 4);
  auto src = [](std::size_t o, std::size_t in, std::size_t out) {
    return std::clamp((static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5, 0.0,
                      static_cast<double>(in - 1));
  };
  for (std::size_t oy = 0; oy < 7; ++oy)
    for (std::size_t ox = 0; ox < 4; ++ox) {
      const double sy = src(oy, 3, 7), sx = src(ox, 5, 4);
      const auto y0 = static_cast<std::size_t>(sy), x0 = static_cast<std::size_t>(sx);
      const std::size_t y1 = std::min<std::size_t>(y0 + 1, 2), x1 = std::min<std::size_t>(x0 + 1, 4);
      const double fy = sy - y0, fx = sx - x0;
      const double v = (1 - fy) * ((1 - fx) * x[y0 * 5 + x0] + fx * x[y0 * 5 + x1]) +
                       fy * ((1 - fx) * x[y1 * 5 + x0] + fx * x[y1 * 5 + x1]);
      EXPECT_NEAR(y[oy * 4 + ox], v, 1e-12);
    }
}

TEST(PoolTest, AverageDividesByValidTaps) {
  auto y = ops::avg_pool_same(Tensor<double>({3, 3, 1}, 2.0), 3);
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 2.0);
  auto x = Tensor<double>({1, 3, 1}, std::vector<double>{1, 2, 6});
  auto a = ops::avg_pool_same(x, 3);
  EXPECT_DOUBLE_EQ(a[0], 1.5);
  EXPECT_DOUBLE_EQ(a[1], 3.0);
  EXPECT_DOUBLE_EQ(a[2], 4.0);
  auto m = ops::max_pool_same(x, 3);
  EXPECT_EQ(values(m), (std::vector<double>{2, 6, 6}));
  EXPECT_THROW(ops::avg_pool_same(x, 2), ShapeError);
}

TEST(GeluTest, ErfForm) {
  auto y = ops::gelu(Tensor<double>({3}, std::vector<double>{-1.0, 0.0, 2.0}));
  EXPECT_NEAR(y[0], -0.15865525393145707, 1e-12);
  EXPECT_EQ(y[1], 0.0);
  EXPECT_NEAR(y[2], 1.9544997361036416, 1e-12);
}

TEST(ShapeOpsTest, ConcatSliceReshape) {
  Tensor<double> a({2, 2}, std::vector<double>{1, 2, 3, 4}), b({2, 1}, std::vector<double>{5, 6});
  std::vector<Tensor<double>> parts{a, b};
  auto c = ops::concat<double>(parts, 1);
  EXPECT_EQ(values(c), (std::vector<double>{1, 2, 5, 3, 4, 6}));
  EXPECT_EQ(values(ops::slice(c, 1, 1, 3)), (std::vector<double>{2, 5, 4, 6}));
  EXPECT_EQ(ops::reshape(c, {3, 2}).shape(), (Shape{3, 2}));
  EXPECT_THROW(ops::reshape(c, {4, 2}), ShapeError);
  auto cl = ops::channels_last(Tensor<double>({2, 1, 2}, std::vector<double>{1, 2, 3, 4}));
  EXPECT_EQ(values(cl), (std::vector<double>{1, 3, 2, 4}));
}

TEST(KlDivTest, ReferenceValue) {
  Tensor<double> t({2}, std::vector<double>{0.75, 0.25}), s({2}, std::vector<double>{0.5, 0.5});
  EXPECT_NEAR(ops::kl_div(t, s, 0).item(), 0.75 * std::log(1.5) + 0.25 * std::log(0.5), 1e-15);
  EXPECT_NEAR(ops::kl_div(t, s, 0).item(), 0.1308120, 1e-7);
}

TEST(KlDivTest, IdenticalIsZeroAndRandomIsNonNegative) {
  Rng rng(20);
  for (int trial = 0; trial < 50; ++trial) {
    auto t = ops::softmax(random_tensor({3, 6}, rng), 1), s = ops::softmax(random_tensor({3, 6}, rng), 1);
    EXPECT_LE(std::abs(ops::kl_div(t, t, 1).item()), 1e-9);
    EXPECT_GE(ops::kl_div(t, s, 1).item(), 0.0);
  }
}

TEST(KlDivTest, UnnormalizedInputThrows) {
  Tensor<double> t({2}, std::vector<double>{0.7, 0.7}), s({2}, std::vector<double>{0.5, 0.5});
  EXPECT_THROW(ops::kl_div(t, s, 0), NumericError);
  EXPECT_THROW(ops::kl_div(s, t, 0), NumericError);
}

TEST(KlDivTest, TeacherReceivesNoGradient) {
  Tensor<double> t({2}, std::vector<double>{0.75, 0.25}), s({2}, std::vector<double>{0.5, 0.5});
  t.set_requires_grad(true);
  s.set_requires_grad(true);
  GradTape<double> tape;
  TapeScope<double> scope(tape);
  backward(ops::kl_div(t, s, 0), tape);
  EXPECT_TRUE(!t.has_grad() || (t.grad()[0] == 0.0 && t.grad()[1] == 0.0));
  EXPECT_NEAR(s.grad()[0], -1.5, 1e-12);
  EXPECT_NEAR(s.grad()[1], -0.5, 1e-12);
}

TEST(ReduceTest, SumMeanGather) {
  Tensor<double> x({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  EXPECT_EQ(ops::sum(x).item(), 21.0);
  EXPECT_EQ(ops::mean(x).item(), 3.5);
  const std::vector<std::size_t> rows{1, 1, 0};
  EXPECT_EQ(values(ops::gather_rows<double>(x, rows)), (std::vector<double>{4, 5, 6, 4, 5, 6, 1, 2, 3}));
  std::vector<Tensor<double>> parts{x, ops::scale(x, 3.0)};
  EXPECT_EQ(values(ops::mean_of<double>(parts)), (std::vector<double>{2, 4, 6, 8, 10, 12}));
}

}  // namespace
}  // namespace equiseg
