#include <gtest/gtest.h>

#include <algorithm>
#include <utility>

#include "equiseg/cmtb.hpp"
#include "equiseg/ops.hpp"
#include "test_util.hpp"

namespace equiseg {
namespace {

using testing::random_tensor;
using testing::values;

SqHubParams<double> random_hub(std::size_t d, Rng& rng) {
  return {random_tensor({d, 1}, rng), random_tensor({1}, rng)};
}

EncoderConfig small_encoder() {
  EncoderConfig c;
  c.stages = {{4, 1, 1, 2, 4, 7}, {4, 1, 2, 1, 2, 3}, {6, 1, 2, 1, 2, 3}, {6, 1, 1, 1, 2, 3}};
  return c;
}

ModalityBundle<double> random_bundle(const std::vector<std::size_t>& channels, std::size_t hw, Rng& rng) {
  ModalityBundle<double> b;
  for (std::size_t i = 0; i < channels.size(); ++i) {
    b.maps.push_back(random_tensor({channels[i], hw, hw}, rng));
    b.present.push_back(true);
    b.names.push_back("m" + std::to_string(i));
  }
  return b;
}

TEST(SqHubTest, SingleAuxiliaryIsIdentity) {
  Rng rng(41);
  auto hub = random_hub(5, rng);
  std::vector<Tensor<double>> aux{random_tensor({7, 5}, rng)};
  EXPECT_EQ(values(sq_hub<double>(aux, hub)), values(aux[0]));
}

TEST(SqHubTest, IdenticalAuxiliariesReturnShared) {
  Rng rng(42);
  auto hub = random_hub(4, rng);
  auto a = random_tensor({6, 4}, rng);
  std::vector<Tensor<double>> aux{a, a, a};
  const auto out = sq_hub<double>(aux, hub);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(out[i], a[i], 1e-12);
}

TEST(SqHubTest, WeightsFormConvexCombination) {
  Rng rng(43);
  for (int trial = 0; trial < 20; ++trial) {
    auto hub = random_hub(4, rng);
    std::vector<Tensor<double>> aux{random_tensor({9, 4}, rng), random_tensor({9, 4}, rng),
                                    random_tensor({9, 4}, rng)};
    Tensor<double> w;
    const auto out = sq_hub<double>(aux, hub, HubMode::learned, &w);
    ASSERT_EQ(w.shape(), (Shape{9, 3}));
    for (std::size_t l = 0; l < 9; ++l) {
      double s = 0.0;
      for (std::size_t m = 0; m < 3; ++m) {
        EXPECT_GE(w[l * 3 + m], 0.0);
        s += w[l * 3 + m];
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
      for (std::size_t c = 0; c < 4; ++c) {
        const std::size_t k = l * 4 + c;
        const double lo = std::min({aux[0][k], aux[1][k], aux[2][k]});
        const double hi = std::max({aux[0][k], aux[1][k], aux[2][k]});
        EXPECT_GE(out[k], lo - 1e-12);
        EXPECT_LE(out[k], hi + 1e-12);
      }
    }
  }
}

TEST(SqHubTest, MeanModeIsArithmeticMean) {
  Rng rng(44);
  auto hub = random_hub(3, rng);
  std::vector<Tensor<double>> aux{random_tensor({4, 3}, rng), random_tensor({4, 3}, rng)};
  const auto out = sq_hub<double>(aux, hub, HubMode::mean);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(out[i], 0.5 * (aux[0][i] + aux[1][i]), 1e-15);
}

TEST(SqHubTest, Errors) {
  Rng rng(45);
  auto hub = random_hub(3, rng);
  std::vector<Tensor<double>> none;
  EXPECT_THROW(sq_hub<double>(none, hub), ShapeError);
  std::vector<Tensor<double>> mismatch{random_tensor({4, 3}, rng), random_tensor({5, 3}, rng)};
  EXPECT_THROW(sq_hub<double>(mismatch, hub), ShapeError);
}

TEST(PpxTest, PreservesShape) {
  Rng rng(46);
  PpxParams<double> p{random_tensor({12, 4}, rng), random_tensor({4}, rng)};
  EXPECT_EQ(ppx(random_tensor({15, 4}, rng), p, GridSize{3, 5}).shape(), (Shape{15, 4}));
  EXPECT_THROW(ppx(random_tensor({15, 4}, rng), p, GridSize{4, 4}), ShapeError);
}

TEST(PpxTest, ConstantInputProjectsConstant) {
  Rng rng(47);
  PpxParams<double> p{random_tensor({9, 3}, rng), random_tensor({3}, rng)};
  const std::vector<double> v{0.3, -1.2, 2.0};
  std::vector<double> x;
  for (int i = 0; i < 20; ++i) x.insert(x.end(), v.begin(), v.end());
  const auto out = ppx(Tensor<double>({20, 3}, x), p, GridSize{4, 5});
  for (std::size_t j = 0; j < 3; ++j) {
    double expected = p.mix_b[j];
    for (std::size_t k = 0; k < 9; ++k) expected += v[k % 3] * p.mix_w[k * 3 + j];
    for (std::size_t l = 0; l < 20; ++l) EXPECT_NEAR(out[l * 3 + j], expected, 1e-12);
  }
}

TEST(CmtbStageTest, NoAuxiliaryMatchesSelfAttentionPath) {
  Rng rng(48);
  ParamStore<double> store;
  auto p = CmtbParams<double>::create(store, "c", 4, 2, 1, rng);
  auto x = random_tensor({6, 4}, rng);
  const GridSize g{2, 3};
  const auto& blk = p.block;
  const auto f_prime = ops::add(x, mhsa(ops::layer_norm(x, blk.norm_g, blk.norm_b), blk, g));
  const auto expected = mix_ffn(f_prime, blk, g);
  std::vector<Tensor<double>> none;
  EXPECT_EQ(values(cmtb_stage<double>(x, none, p, g)), values(expected));

  std::vector<Tensor<double>> aux{random_tensor({6, 4}, rng)};
  CmtbSwitches off;
  off.cross_attention = false;
  EXPECT_EQ(values(cmtb_stage<double>(x, aux, p, g, off)), values(expected));
  EXPECT_NE(values(cmtb_stage<double>(x, aux, p, g)), values(expected));
}

TEST(CmtbStageTest, ShapeMismatchThrows) {
  Rng rng(49);
  ParamStore<double> store;
  auto p = CmtbParams<double>::create(store, "c", 4, 1, 1, rng);
  std::vector<Tensor<double>> aux{random_tensor({4, 4}, rng)};
  EXPECT_THROW(cmtb_stage<double>(random_tensor({6, 4}, rng), aux, p, GridSize{2, 3}), ShapeError);
}

TEST(EncoderTest, DefaultStageGrids) {
  const auto grids = EncoderConfig::desk_default().stage_grids({64, 64});
  ASSERT_EQ(grids.size(), 4u);
  const std::size_t expected[] = {16, 8, 4, 2};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(grids[i], (GridSize{expected[i], expected[i]}));
}

TEST(EncoderTest, GridsFollowStrideArithmetic) {
  const auto cfg = EncoderConfig::desk_default();
  for (std::size_t h : {32u, 64u, 96u})
    for (std::size_t w : {32u, 64u, 128u}) {
      const auto grids = cfg.stage_grids({h, w});
      std::size_t div = 4;
      for (std::size_t i = 0; i < 4; ++i, div *= 2) EXPECT_EQ(grids[i], (GridSize{h / div, w / div}));
    }
}

TEST(EncoderTest, SingleModalityRunsDegeneratePath) {
  Rng rng(50);
  ParamStore<double> store;
  Encoder<double> enc(small_encoder(), {2}, store, rng);
  const auto f = enc.forward(random_bundle({2}, 16, rng));
  ASSERT_EQ(f.features.size(), 4u);
  EXPECT_EQ(f.features[0][0].shape(), (Shape{16, 4}));
  EXPECT_EQ(f.features[3][0].shape(), (Shape{1, 6}));
}

TEST(EncoderTest, AbsentModalityYieldsZeros) {
  Rng rng(51);
  ParamStore<double> store;
  Encoder<double> enc(small_encoder(), {1, 1, 1}, store, rng);
  auto b = random_bundle({1, 1, 1}, 16, rng);
  b.present[1] = false;
  const auto f = enc.forward(b);
  for (const auto& stage : f.features)
    for (double v : stage[1].data()) EXPECT_EQ(v, 0.0);
  b.present = {false, false, false};
  EXPECT_THROW(enc.forward(b), ShapeError);
}

TEST(EncoderTest, SwappingInputsAndBranchesSwapsOutputs) {
  Rng rng(52);
  ParamStore<double> store;
  Encoder<double> enc(small_encoder(), {1, 1, 1}, store, rng);
  auto b = random_bundle({1, 1, 1}, 16, rng);
  const auto before = enc.forward(b);
  for (std::size_t s = 0; s < 4; ++s) std::swap(enc.branch(0, s), enc.branch(2, s));
  std::swap(b.maps[0], b.maps[2]);
  const auto after = enc.forward(b);
  for (std::size_t s = 0; s < 4; ++s) {
    const std::pair<std::size_t, std::size_t> map[] = {{0, 2}, {1, 1}, {2, 0}};
    for (auto [i, j] : map) {
      const auto& x = before.features[s][i];
      const auto& y = after.features[s][j];
      for (std::size_t k = 0; k < x.numel(); ++k) EXPECT_NEAR(x[k], y[k], 1e-12);
    }
  }
}

TEST(EncoderTest, MeanHubKeepsShapes) {
  Rng rng(53);
  ParamStore<double> store;
  Encoder<double> enc(small_encoder(), {2, 1, 1}, store, rng);
  CmtbSwitches sw;
  sw.hub = HubMode::mean;
  const auto f = enc.forward(random_bundle({2, 1, 1}, 16, rng), sw);
  EXPECT_EQ(f.features[1][2].shape(), (Shape{4, 4}));
}

}  // namespace
}  // namespace equiseg
