#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "equiseg/gradcheck.hpp"
#include "equiseg/ops.hpp"
#include "equiseg/serialize.hpp"
#include "test_util.hpp"

namespace equiseg {
namespace {

using testing::random_tensor;
using testing::values;

TEST(TensorTest, ShapeAndDataAgree) {
  Tensor<double> t({2, 3}, 1.5);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.dim(1), 3u);
  EXPECT_THROW(Tensor<double>({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(Tensor<double>({2, 0}), ShapeError);
}

TEST(TensorTest, NonFiniteValuesAreRejected) {
  EXPECT_THROW(Tensor<double>({2}, std::vector<double>{1.0, std::nan("")}), NumericError);
  EXPECT_THROW(Tensor<float>({1}, std::vector<float>{std::numeric_limits<float>::infinity()}), NumericError);
  Tensor<double> big({1}, std::vector<double>{1e200});
  EXPECT_THROW(ops::mul(big, big), NumericError);
}

TEST(TensorTest, DetachCopiesStorage) {
  Tensor<double> a({2}, std::vector<double>{1, 2});
  auto b = a.detach();
  a.mutable_data()[0] = 5;
  EXPECT_EQ(b[0], 1);
  EXPECT_NE(a.id(), b.id());
}

TEST(TensorTest, OnlyLeavesAreMutable) {
  Tensor<double> a({2}, 1.0);
  a.set_requires_grad(true);
  GradTape<double> tape;
  TapeScope<double> scope(tape);
  auto b = ops::scale(a, 2.0);
  EXPECT_THROW(b.mutable_data(), ShapeError);
}

TEST(BackwardTest, SumGivesOnes) {
  Rng rng(1);
  auto x = random_tensor({3, 4}, rng);
  x.set_requires_grad(true);
  GradTape<double> tape;
  {
    TapeScope<double> scope(tape);
    backward(ops::sum(x), tape);
  }
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(BackwardTest, QuadraticAtThree) {
  auto x = Tensor<double>::scalar(3.0);
  x.set_requires_grad(true);
  GradTape<double> tape;
  TapeScope<double> scope(tape);
  backward(ops::mul(x, x), tape);
  EXPECT_EQ(x.grad()[0], 6.0);
}

TEST(BackwardTest, RepeatedCallsAccumulateUntilZeroed) {
  auto x = Tensor<double>::scalar(2.0);
  x.set_requires_grad(true);
  for (int i = 0; i < 3; ++i) {
    GradTape<double> tape;
    TapeScope<double> scope(tape);
    backward(ops::scale(x, 4.0), tape);
  }
  EXPECT_EQ(x.grad()[0], 12.0);
  x.zero_grad();
  EXPECT_FALSE(x.has_grad());
}

TEST(BackwardTest, NonScalarLossThrows) {
  Tensor<double> x({2}, 1.0);
  x.set_requires_grad(true);
  GradTape<double> tape;
  TapeScope<double> scope(tape);
  auto y = ops::scale(x, 2.0);
  EXPECT_THROW(backward(y, tape), ShapeError);
}

TEST(BackwardTest, DisconnectedLeafGetsNoGradient) {
  auto x = Tensor<double>::scalar(1.0), unused = Tensor<double>::scalar(4.0);
  x.set_requires_grad(true);
  unused.set_requires_grad(true);
  GradTape<double> tape;
  TapeScope<double> scope(tape);
  backward(ops::mul(x, x), tape);
  EXPECT_TRUE(!unused.has_grad() || unused.grad()[0] == 0.0);
}

TEST(BackwardTest, TapeIsTopologicallyOrdered) {
  Rng rng(2);
  auto x = random_tensor({4, 3}, rng);
  auto w = random_tensor({3, 2}, rng);
  x.set_requires_grad(true);
  w.set_requires_grad(true);
  GradTape<double> tape;
  TapeScope<double> scope(tape);
  auto y = ops::sum(ops::gelu(ops::matmul(x, w)));
  EXPECT_GT(tape.size(), 2u);
  EXPECT_TRUE(tape.topologically_ordered());
}

TEST(BackwardTest, NothingIsRecordedWithoutScope) {
  Tensor<double> x({2}, 1.0);
  x.set_requires_grad(true);
  auto y = ops::scale(x, 2.0);
  EXPECT_EQ(active_tape<double>(), nullptr);
  EXPECT_FALSE(y.requires_grad());
}

TEST(GradCheckTest, LinearFunctionIsExact) {
  Rng rng(3);
  auto w = random_tensor({5}, rng);
  const auto r = grad_check([w](const Tensor<double>& x) { return ops::sum(ops::mul(x, w)); }, random_tensor({5}, rng));
  EXPECT_LE(r.max_rel_error, 1e-10);
  EXPECT_EQ(r.checked, 5u);
}

TEST(GradCheckTest, SoftmaxCrossEntropyWithinTolerance) {
  Rng rng(4);
  auto w = random_tensor({4, 6}, rng);
  const auto r = grad_check(
      [w](const Tensor<double>& x) {
        auto p = ops::softmax(ops::matmul(x, w), 1);
        return ops::scale(ops::sum(ops::mul(p, p)), -1.0);
      },
      random_tensor({3, 4}, rng));
  EXPECT_LE(r.max_rel_error, 1e-4);
}

TEST(GradCheckTest, NonScalarOutputThrows) {
  Rng rng(5);
  EXPECT_THROW(grad_check([](const Tensor<double>& x) { return ops::scale(x, 2.0); }, random_tensor({3}, rng)),
               ShapeError);
}

TEST(GradCheckTest, InjectedFaultIsDetected) {
  Rng rng(6);
  auto b = random_tensor({4, 2}, rng);
  auto f = [b](const Tensor<double>& a) { return ops::sum(ops::matmul(a, b)); };
  set_gradient_fault("matmul");
  const auto bad = grad_check(f, random_tensor({3, 4}, rng));
  set_gradient_fault("");
  const auto good = grad_check(f, random_tensor({3, 4}, rng));
  EXPECT_GT(bad.max_rel_error, 1e-2);
  EXPECT_LE(good.max_rel_error, 1e-9);
}

TEST(RngTest, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    if (i == 0) EXPECT_NE(x, c.next_u64());
  }
}

TEST(RngTest, UniformIntStaysInRangeAndCoversIt) {
  Rng rng(7);
  std::vector<int> seen(5, 0);
  for (int i = 0; i < 5000; ++i) {
    const auto v = rng.uniform_int(5);
    ASSERT_LT(v, 5u);
    ++seen[v];
  }
  for (int n : seen) EXPECT_NEAR(n, 1000, 150);
}

TEST(SerializeTest, ContainerByteLayout) {
  Tensor<float> t({2, 1}, std::vector<float>{1.0f, -2.0f});
  std::ostringstream os;
  write_tensor(os, t);
  const std::string b = os.str();
  ASSERT_EQ(b.size(), 4u + 2 + 1 + 1 + 2 * 8 + 2 * 4);
  EXPECT_EQ(b.substr(0, 4), "EQTS");
  EXPECT_EQ(static_cast<unsigned char>(b[4]), 1);
  EXPECT_EQ(static_cast<unsigned char>(b[5]), 0);
  EXPECT_EQ(static_cast<unsigned char>(b[6]), 0);  // f32
  EXPECT_EQ(static_cast<unsigned char>(b[7]), 2);  // rank
  EXPECT_EQ(static_cast<unsigned char>(b[8]), 2);
  EXPECT_EQ(static_cast<unsigned char>(b[16]), 1);
  // 1.0f = 0x3f800000 little-endian
  EXPECT_EQ(static_cast<unsigned char>(b[24]), 0x00);
  EXPECT_EQ(static_cast<unsigned char>(b[27]), 0x3f);
}

TEST(SerializeTest, RoundTripIsExact) {
  Rng rng(8);
  auto t = random_tensor({3, 2, 4}, rng);
  std::stringstream ss;
  write_tensor(ss, t);
  const auto back = read_tensor<double>(ss);
  EXPECT_EQ(back.shape(), t.shape());
  EXPECT_EQ(values(back), values(t));

  LabelMap l(2, 3);
  l.values = {0, 1, 2, kIgnoreLabel, 4, 5};
  EXPECT_EQ(labels_from_raw(to_raw(l)), l);
}

TEST(SerializeTest, CorruptContainersAreRejected) {
  Tensor<double> t({2}, 1.0);
  std::ostringstream os;
  write_tensor(os, t);
  std::string bad_magic = os.str();
  bad_magic[0] = 'X';
  std::string bad_version = os.str();
  bad_version[4] = 9;
  std::string truncated = os.str().substr(0, os.str().size() - 3);
  for (const auto& s : {bad_magic, bad_version, truncated}) {
    std::istringstream is(s);
    EXPECT_THROW(read_tensor<double>(is), IoError);
  }
}

}  // namespace
}  // namespace equiseg
