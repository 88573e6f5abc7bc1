#include <gtest/gtest.h>

#include <cmath>

#include "equiseg/attention.hpp"
#include "equiseg/ops.hpp"
#include "test_util.hpp"

namespace equiseg {
namespace {

using testing::random_tensor;
using testing::values;

AttentionParams<double> random_attention(std::size_t d, std::size_t heads, Rng& rng) {
  AttentionParams<double> p;
  p.w_q = random_tensor({d, d}, rng, 0.5);
  p.w_k = random_tensor({d, d}, rng, 0.5);
  p.w_v = random_tensor({d, d}, rng, 0.5);
  p.w_o = random_tensor({d, d}, rng, 0.5);
  p.b_q = random_tensor({d}, rng, 0.1);
  p.b_k = random_tensor({d}, rng, 0.1);
  p.b_v = random_tensor({d}, rng, 0.1);
  p.b_o = random_tensor({d}, rng, 0.1);
  p.heads = heads;
  return p;
}

std::vector<double> affine(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b) {
  const std::size_t l = x.dim(0), d = x.dim(1), o = w.dim(1);
  std::vector<double> y(l * o);
  for (std::size_t i = 0; i < l; ++i)
    for (std::size_t j = 0; j < o; ++j) {
      double s = b[j];
      for (std::size_t k = 0; k < d; ++k) s += x[i * d + k] * w[k * o + j];
      y[i * o + j] = s;
    }
  return y;
}

// Per-head loops over explicit softmax(QK^T / sqrt(dk)) V, then W_O.
std::vector<double> attention_oracle(const Tensor<double>& xq, const Tensor<double>& xkv,
                                     const AttentionParams<double>& p) {
  const std::size_t lq = xq.dim(0), lk = xkv.dim(0), d = xq.dim(1), dk = d / p.heads;
  const auto q = affine(xq, p.w_q, p.b_q), k = affine(xkv, p.w_k, p.b_k), v = affine(xkv, p.w_v, p.b_v);
  std::vector<double> heads(lq * d, 0.0);
  for (std::size_t h = 0; h < p.heads; ++h)
    for (std::size_t i = 0; i < lq; ++i) {
      std::vector<double> s(lk);
      double mx = -1e300, z = 0.0;
      for (std::size_t j = 0; j < lk; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < dk; ++c) dot += q[i * d + h * dk + c] * k[j * d + h * dk + c];
        s[j] = dot / std::sqrt(static_cast<double>(dk));
        mx = std::max(mx, s[j]);
      }
      for (auto& x : s) z += (x = std::exp(x - mx));
      for (std::size_t j = 0; j < lk; ++j)
        for (std::size_t c = 0; c < dk; ++c) heads[i * d + h * dk + c] += s[j] / z * v[j * d + h * dk + c];
    }
  return affine(Tensor<double>({lq, d}, heads), p.w_o, p.b_o);
}

TEST(MhcaTest, SingleKeyScalarExample) {
  AttentionParams<double> p;
  p.w_q = p.w_k = p.w_v = p.w_o = Tensor<double>({1, 1}, 1.0);
  p.b_q = p.b_k = p.b_v = p.b_o = Tensor<double>({1}, 0.0);
  auto out = mhca(Tensor<double>({1, 1}, 2.0), Tensor<double>({1, 1}, 5.0), p);
  EXPECT_EQ(out.item(), 5.0);
}

TEST(MhcaTest, SingleKeyReturnsProjectedValue) {
  Rng rng(21);
  for (int trial = 0; trial < 10; ++trial) {
    auto p = random_attention(4, 2, rng);
    auto fp = random_tensor({1, 4}, rng), fa = random_tensor({1, 4}, rng);
    std::vector<Tensor<double>> w;
    auto out = mhca(fp, fa, p, &w);
    const auto expected = ops::linear(ops::linear(fa, p.w_v, p.b_v), p.w_o, p.b_o);
    EXPECT_EQ(values(out), values(expected));
    for (const auto& a : w) EXPECT_EQ(a.item(), 1.0);
  }
}

TEST(MhcaTest, ConstantAuxGivesConstantOutput) {
  Rng rng(22);
  auto p = random_attention(4, 2, rng);
  auto row = random_tensor({1, 4}, rng);
  std::vector<Tensor<double>> rows(5, row);
  auto fa = ops::concat<double>(rows, 0);
  auto out = mhca(random_tensor({5, 4}, rng), fa, p);
  for (std::size_t i = 1; i < 5; ++i)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(out[i * 4 + c], out[c], 1e-12);
}

TEST(MhcaTest, MatchesPerHeadOracle) {
  Rng rng(23);
  for (int trial = 0; trial < 10; ++trial) {
    auto p = random_attention(8, 2, rng);
    auto fp = random_tensor({4, 8}, rng), fa = random_tensor({4, 8}, rng);
    const auto out = mhca(fp, fa, p);
    const auto ref = attention_oracle(fp, fa, p);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-9);
  }
}

TEST(MhcaTest, KeyPermutationLeavesOutputUnchanged) {
  Rng rng(24);
  auto p = random_attention(4, 2, rng);
  auto fp = random_tensor({3, 4}, rng), fa = random_tensor({3, 4}, rng);
  const std::vector<std::size_t> perm{2, 0, 1};
  const auto a = mhca(fp, fa, p), b = mhca(fp, ops::gather_rows<double>(fa, perm), p);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(MhcaTest, ShapeMismatchThrows) {
  Rng rng(25);
  auto p = random_attention(4, 1, rng);
  EXPECT_THROW(mhca(random_tensor({3, 4}, rng), random_tensor({2, 4}, rng), p), ShapeError);
  p.heads = 3;
  EXPECT_THROW(p.validate(), ShapeError);
}

TEST(MhsaTest, DenseOracleAndRowSums) {
  Rng rng(26);
  ParamStore<double> store;
  auto bp = BlockParams<double>::create(store, "b", 8, 2, 1, rng);
  bp.attn = random_attention(8, 2, rng);
  auto x = random_tensor({6, 8}, rng);
  std::vector<Tensor<double>> w;
  const auto out = mhsa(x, bp, GridSize{2, 3}, &w);
  const auto ref = attention_oracle(x, x, bp.attn);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-9);
  ASSERT_EQ(w.size(), 2u);
  for (const auto& a : w)
    for (std::size_t r = 0; r < a.dim(0); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < a.dim(1); ++c) s += a[r * a.dim(1) + c];
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(MhsaTest, SpatialReductionShrinksKeys) {
  Rng rng(27);
  ParamStore<double> store;
  auto bp = BlockParams<double>::create(store, "b", 4, 1, 2, rng);
  std::vector<Tensor<double>> w;
  const auto out = mhsa(random_tensor({16, 4}, rng), bp, GridSize{4, 4}, &w);
  EXPECT_EQ(out.shape(), (Shape{16, 4}));
  EXPECT_EQ(w[0].shape(), (Shape{16, 4}));
  EXPECT_THROW(mhsa(random_tensor({15, 4}, rng), bp, GridSize{3, 5}), ShapeError);
}

TEST(MhsaTest, SingleTokenWeightIsOne) {
  Rng rng(28);
  ParamStore<double> store;
  auto bp = BlockParams<double>::create(store, "b", 3, 1, 1, rng);
  std::vector<Tensor<double>> w;
  auto x = random_tensor({1, 3}, rng);
  const auto out = mhsa(x, bp, GridSize{1, 1}, &w);
  EXPECT_EQ(w[0].item(), 1.0);
  EXPECT_EQ(values(out), values(ops::linear(ops::linear(x, bp.attn.w_v, bp.attn.b_v), bp.attn.w_o, bp.attn.b_o)));
}

TEST(ResidualFuseTest, Identities) {
  Rng rng(29);
  auto a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
  EXPECT_EQ(values(residual_fuse(a, Tensor<double>({3, 4}, 0.0))), values(a));
  const auto cancel = residual_fuse(a, ops::scale(a, -1.0));
  for (double v : cancel.data()) EXPECT_EQ(v, 0.0);
  const auto s = residual_fuse(a, b);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(s[i], a[i] + b[i]);
  EXPECT_THROW(residual_fuse(a, random_tensor({4, 3}, rng)), ShapeError);
}

TEST(ResidualFuseTest, GradientReachesBothOperands) {
  Rng rng(30);
  auto a = random_tensor({2, 2}, rng), b = random_tensor({2, 2}, rng);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  GradTape<double> tape;
  TapeScope<double> scope(tape);
  backward(ops::sum(residual_fuse(a, b)), tape);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(a.grad()[i], 1.0);
    EXPECT_EQ(b.grad()[i], 1.0);
  }
}

TEST(MixFfnTest, ZeroWeightsLeaveResidual) {
  Rng rng(31);
  ParamStore<double> store;
  auto bp = BlockParams<double>::create(store, "b", 4, 1, 1, rng);
  for (auto& e : store.entries())
    for (auto& v : e.value.mutable_data()) v = 0.0;
  auto x = random_tensor({6, 4}, rng);
  EXPECT_EQ(values(mix_ffn(x, bp, GridSize{2, 3})), values(x));
  EXPECT_THROW(mix_ffn(x, bp, GridSize{2, 2}), ShapeError);
}

TEST(MixFfnTest, ShapePreserved) {
  Rng rng(32);
  ParamStore<double> store;
  auto bp = BlockParams<double>::create(store, "b", 8, 2, 1, rng);
  EXPECT_EQ(mix_ffn(random_tensor({12, 8}, rng), bp, GridSize{3, 4}).shape(), (Shape{12, 8}));
}

}  // namespace
}  // namespace equiseg
