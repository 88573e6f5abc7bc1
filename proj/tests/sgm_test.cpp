#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "equiseg/gradcheck.hpp"
#include "equiseg/ops.hpp"
#include "equiseg/sgm.hpp"
#include "test_util.hpp"

namespace equiseg {
namespace {

using testing::random_tensor;
using testing::values;

LabelMap random_labels(std::size_t h, std::size_t w, std::size_t c, Rng& rng, double ignore_p = 0.0) {
  LabelMap m(h, w);
  for (auto& v : m.values) v = rng.bernoulli(ignore_p) ? kIgnoreLabel : static_cast<Label>(rng.uniform_int(c));
  return m;
}

std::vector<double> softmax_row(const double* x, std::size_t n, std::size_t stride) {
  double mx = x[0];
  for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, x[k * stride]);
  std::vector<double> p(n);
  double z = 0.0;
  for (std::size_t k = 0; k < n; ++k) z += (p[k] = std::exp(x[k * stride] - mx));
  for (auto& v : p) v /= z;
  return p;
}

double kl(const std::vector<double>& t, const std::vector<double>& s) {
  double acc = 0.0;
  for (std::size_t k = 0; k < t.size(); ++k) acc += t[k] * std::log(t[k] / s[k]);
  return acc;
}

TEST(ComputePrototypesTest, ThreePixelExample) {
  Tensor<double> f({3, 2}, {1, 2, 3, 4, 5, 6});
  LabelMap l(1, 3);
  l.values = {0, 0, 1};
  const auto p = compute_prototypes(f, l, 3);
  EXPECT_EQ(p.protos[0], 2.0);
  EXPECT_EQ(p.protos[1], 3.0);
  EXPECT_EQ(p.protos[2], 5.0);
  EXPECT_EQ(p.protos[3], 6.0);
  EXPECT_EQ(p.present, (std::vector<bool>{true, true, false}));
  EXPECT_EQ(p.present_ids(), (std::vector<std::size_t>{0, 1}));
}

TEST(ComputePrototypesTest, MatchesAccumulateThenDivide) {
  Rng rng(61);
  for (int trial = 0; trial < 10; ++trial) {
    auto f = random_tensor({100, 5}, rng);
    auto l = random_labels(10, 10, 4, rng, 0.1);
    const auto p = compute_prototypes(f, l, 4);
    for (std::size_t c = 0; c < 4; ++c) {
      std::vector<double> sum(5, 0.0);
      std::size_t n = 0;
      for (std::size_t j = 0; j < 100; ++j) {
        if (l.values[j] != c) continue;
        ++n;
        for (std::size_t k = 0; k < 5; ++k) sum[k] += f[j * 5 + k];
      }
      ASSERT_EQ(p.present[c], n > 0);
      for (std::size_t k = 0; n > 0 && k < 5; ++k) EXPECT_EQ(p.protos[c * 5 + k], sum[k] / n);
    }
  }
}

TEST(ComputePrototypesTest, PixelPermutationInvariant) {
  Rng rng(62);
  auto f = random_tensor({36, 3}, rng);
  auto l = random_labels(6, 6, 3, rng);
  std::vector<std::size_t> perm(36);
  for (std::size_t i = 0; i < 36; ++i) perm[i] = i;
  rng.shuffle(perm.begin(), perm.end());
  LabelMap lp(6, 6);
  for (std::size_t i = 0; i < 36; ++i) lp.values[i] = l.values[perm[i]];
  const auto a = compute_prototypes(f, l, 3);
  const auto b = compute_prototypes(ops::gather_rows<double>(f, perm), lp, 3);
  EXPECT_EQ(a.present, b.present);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(a.protos[i], b.protos[i], 1e-12);
}

TEST(ComputePrototypesTest, Errors) {
  Tensor<double> f({2, 1}, {1, 2});
  LabelMap l(1, 2);
  EXPECT_THROW(compute_prototypes(f, l, 0), ShapeError);
  l.values = {0, 3};
  EXPECT_THROW(compute_prototypes(f, l, 3), ShapeError);
  EXPECT_THROW(compute_prototypes(f, LabelMap(1, 3), 3), ShapeError);
}

TEST(ComputePrototypesTest, IgnoredPixelsExcluded) {
  Tensor<double> f({3, 1}, {1, 100, 3});
  LabelMap l(1, 3);
  l.values = {0, kIgnoreLabel, 0};
  EXPECT_EQ(compute_prototypes(f, l, 1).protos.item(), 2.0);
}

TEST(DownsampleLabelsTest, IdentityConstantAndCheckerboard) {
  Rng rng(63);
  auto l = random_labels(4, 6, 5, rng, 0.2);
  EXPECT_EQ(downsample_labels(l, {4, 6}), l);
  LabelMap c(8, 8, 3);
  EXPECT_EQ(downsample_labels(c, {2, 2}), LabelMap(2, 2, 3));
  LabelMap cb(4, 4);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) cb.at(y, x) = static_cast<Label>((x + y) % 2 + 10 * y + x);
  const auto d = downsample_labels(cb, {2, 2});
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t x = 0; x < 2; ++x) EXPECT_EQ(d.at(y, x), cb.at(2 * y, 2 * x));
  EXPECT_THROW(downsample_labels(cb, {3, 3}), ShapeError);
}

TEST(AssignPairsTest, EvenAndOddPartitions) {
  Rng rng(64);
  const auto p4 = assign_pairs(4, rng);
  EXPECT_EQ(p4.pairs.size(), 2u);
  EXPECT_FALSE(p4.dropped.has_value());
  EXPECT_TRUE(p4.is_partition_of(4));
  const auto p3 = assign_pairs(3, rng);
  EXPECT_EQ(p3.pairs.size(), 1u);
  EXPECT_TRUE(p3.dropped.has_value());
  EXPECT_TRUE(p3.is_partition_of(3));
  EXPECT_THROW(assign_pairs(1, rng), ConfigError);
}

TEST(AssignPairsTest, PartitionForManyDraws) {
  Rng rng(65);
  for (std::size_t n = 2; n <= 7; ++n)
    for (int i = 0; i < 200; ++i) {
      const auto p = assign_pairs(n, rng);
      EXPECT_TRUE(p.is_partition_of(n));
      EXPECT_EQ(p.pairs.size(), n / 2);
      EXPECT_EQ(p.dropped.has_value(), n % 2 == 1);
    }
}

TEST(AssignPairsTest, TeacherRoleFrequencyUniform) {
  Rng rng(66);
  std::vector<int> teacher(4, 0);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i)
    for (const auto& [t, s] : assign_pairs(4, rng).pairs) ++teacher[t];
  for (int c : teacher) EXPECT_NEAR(static_cast<double>(c) / draws, 0.5, 0.02);
}

TEST(AssignPairsTest, DroppedModalityUniformForOddCount) {
  Rng rng(67);
  std::vector<int> dropped(3, 0);
  for (int i = 0; i < 9000; ++i) ++dropped[*assign_pairs(3, rng).dropped];
  for (int c : dropped) EXPECT_NEAR(c / 9000.0, 1.0 / 3.0, 0.02);
}

TEST(IsPartitionTest, DetectsDuplicatesAndGaps) {
  Pairing p;
  p.pairs = {{0, 1}, {1, 2}};
  EXPECT_FALSE(p.is_partition_of(4));
  p.pairs = {{0, 1}};
  EXPECT_FALSE(p.is_partition_of(3));
  p.dropped = 2;
  EXPECT_TRUE(p.is_partition_of(3));
}

TEST(CosinePairsTest, PairsMostSimilar) {
  Rng rng(68);
  const std::vector<std::vector<double>> s{{1, 0}, {0, 1}, {0.9, 0.1}, {0.1, 0.9}};
  const auto p = cosine_pairs(s, rng);
  ASSERT_TRUE(p.is_partition_of(4));
  for (const auto& [a, b] : p.pairs) EXPECT_EQ(std::min(a, b) + 2, std::max(a, b));
  const std::vector<std::vector<double>> one{{1.0}};
  EXPECT_THROW(cosine_pairs(one, rng), ConfigError);
}

PrototypeSet<double> random_set(std::size_t n_mod, std::size_t stages, std::size_t c, Rng& rng) {
  PrototypeSet<double> set;
  set.protos.resize(n_mod);
  std::vector<bool> present(c);
  for (std::size_t k = 0; k < c; ++k) present[k] = k != 1;
  for (std::size_t n = 0; n < n_mod; ++n)
    for (std::size_t i = 0; i < stages; ++i)
      set.protos[n].push_back({random_tensor({c, 3 + i}, rng), present});
  return set;
}

TEST(SgmLossTest, IdenticalPrototypesGiveZero) {
  Rng rng(69);
  auto set = random_set(1, 4, 3, rng);
  set.protos.push_back(set.protos[0]);
  Pairing p;
  p.pairs = {{0, 1}};
  for (auto axis : {KlAxis::channel, KlAxis::category})
    EXPECT_NEAR(sgm_loss(set, {true, true}, p, axis).value.item(), 0.0, 1e-15);
}

TEST(SgmLossTest, SinglePairStageCategoryReducesToKl) {
  Tensor<double> t({1, 2}, {0.0, 1.0}), s({1, 2}, {1.0, 0.0});
  PrototypeSet<double> set;
  set.protos = {{{t, {true}}}, {{s, {true}}}};
  Pairing p;
  p.pairs = {{0, 1}};
  const auto pt = softmax_row(t.data().data(), 2, 1), ps = softmax_row(s.data().data(), 2, 1);
  EXPECT_NEAR(sgm_loss(set, {true, true}, p).value.item(), kl(pt, ps), 1e-15);
}

TEST(SgmLossTest, MatchesNestedLoopOracle) {
  Rng rng(70);
  for (auto axis : {KlAxis::channel, KlAxis::category}) {
    auto set = random_set(4, 4, 4, rng);
    auto pairing = assign_pairs(4, rng);
    double expected = 0.0;
    for (std::size_t i = 0; i < 4; ++i)
      for (const auto& [t, s] : pairing.pairs) {
        const auto& a = set.protos[t][i].protos;
        const auto& b = set.protos[s][i].protos;
        const std::size_t d = a.dim(1);
        const std::vector<std::size_t> ids{0, 2, 3};
        double stage = 0.0;
        if (axis == KlAxis::channel) {
          for (auto c : ids) stage += kl(softmax_row(&a.data()[c * d], d, 1), softmax_row(&b.data()[c * d], d, 1));
          stage /= ids.size();
        } else {
          std::vector<double> ga, gb;
          for (auto c : ids)
            for (std::size_t k = 0; k < d; ++k) {
              ga.push_back(a[c * d + k]);
              gb.push_back(b[c * d + k]);
            }
          for (std::size_t k = 0; k < d; ++k) stage += kl(softmax_row(&ga[k], 3, d), softmax_row(&gb[k], 3, d));
          stage /= d;
        }
        expected += stage;
      }
    EXPECT_NEAR(sgm_loss(set, {true, true, true, true}, pairing, axis).value.item(), expected, 1e-9);
  }
}

TEST(SgmLossTest, NonNegativeOnRandomInput) {
  Rng rng(71);
  for (int trial = 0; trial < 50; ++trial) {
    auto set = random_set(3, 2, 3, rng);
    EXPECT_GE(sgm_loss(set, {true, true, true}, assign_pairs(3, rng)).value.item(), 0.0);
  }
}

TEST(SgmLossTest, NoGradientReachesTeacher) {
  Rng rng(72);
  auto t = random_tensor({3, 4}, rng), s = random_tensor({3, 4}, rng);
  t.set_requires_grad(true);
  s.set_requires_grad(true);
  GradTape<double> tape;
  TapeScope<double> scope(tape);
  PrototypeSet<double> set;
  set.protos = {{{t, {true, true, true}}}, {{s, {true, true, true}}}};
  Pairing p;
  p.pairs = {{0, 1}};
  backward(sgm_loss(set, {true, true}, p).value, tape);
  EXPECT_FALSE(t.has_grad() && std::any_of(t.grad().begin(), t.grad().end(), [](double g) { return g != 0.0; }));
  ASSERT_TRUE(s.has_grad());
  EXPECT_TRUE(std::any_of(s.grad().begin(), s.grad().end(), [](double g) { return g != 0.0; }));
}

TEST(SgmLossTest, AbsentModalityAndNoCategory) {
  Rng rng(73);
  auto set = random_set(2, 1, 2, rng);
  Pairing p;
  p.pairs = {{0, 1}};
  EXPECT_EQ(sgm_loss(set, {true, false}, p).value.item(), 0.0);
  for (auto& per_stage : set.protos)
    for (auto& proto : per_stage) proto.present = {false, false};
  const auto none = sgm_loss(set, {true, true}, p);
  EXPECT_TRUE(none.no_category);
  EXPECT_EQ(none.value.item(), 0.0);
}

TEST(SgmLossTest, GradcheckThroughStudent) {
  Rng rng(74);
  auto t = random_tensor({6, 3}, rng);
  auto l = random_labels(2, 3, 2, rng);
  auto result = grad_check(
      [&](const Tensor<double>& s) {
        PrototypeSet<double> set;
        set.protos = {{compute_prototypes(t, l, 2)}, {compute_prototypes(s, l, 2)}};
        Pairing p;
        p.pairs = {{0, 1}};
        return sgm_loss(set, {true, true}, p).value;
      },
      random_tensor({6, 3}, rng));
  EXPECT_LE(result.max_rel_error, 1e-4);
}

TEST(PrototypeSummariesTest, MeanOfPresentLastStageRows) {
  PrototypeSet<double> set;
  set.protos = {{{Tensor<double>({1, 1}, 9.0), {true}}, {Tensor<double>({3, 2}, {1, 2, 50, 50, 3, 6}), {true, false, true}}}};
  const auto s = prototype_summaries(set);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s[0], (std::vector<double>{2.0, 4.0}));
}

}  // namespace
}  // namespace equiseg
