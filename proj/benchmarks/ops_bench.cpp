#include <benchmark/benchmark.h>

#include "equiseg/ops.hpp"
#include "equiseg/random.hpp"

namespace {

using equiseg::Rng;
using equiseg::Shape;
using equiseg::Tensor;

Tensor<float> random_tensor(Shape shape, Rng& rng) {
  std::vector<float> v(equiseg::shape_numel(shape));
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return Tensor<float>(std::move(shape), std::move(v));
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const auto a = random_tensor({n, n}, rng), b = random_tensor({n, n}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(equiseg::ops::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_Conv2d(benchmark::State& state) {
  const auto hw = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  const auto x = random_tensor({hw, hw, 16}, rng), k = random_tensor({3, 3, 16, 32}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(equiseg::ops::conv2d(x, k, 1, 1));
}
BENCHMARK(BM_Conv2d)->Arg(16)->Arg(32)->Arg(64);

void BM_Softmax(benchmark::State& state) {
  Rng rng(3);
  const auto x = random_tensor({1024, static_cast<std::size_t>(state.range(0))}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(equiseg::ops::softmax(x, 1));
}
BENCHMARK(BM_Softmax)->Arg(16)->Arg(256);

}  // namespace
