#include <benchmark/benchmark.h>

#include <random>

#include "cpool/autograd.hpp"
#include "cpool/ops.hpp"

namespace {

using namespace cpool;

void BM_Matmul(benchmark::State& state) {
  const auto n = std::size_t(state.range(0));
  std::mt19937_64 rng(1);
  const auto a = Tensor::randn({n, n}, rng), b = Tensor::randn({n, n}, rng);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * std::int64_t(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_MatmulF32(benchmark::State& state) {
  const auto n = std::size_t(state.range(0));
  std::mt19937_64 rng(1);
  const auto a = Tensor::randn({n, n}, rng), b = Tensor::randn({n, n}, rng);
  NoGradGuard no_grad;
  PrecisionGuard f32(Precision::f32);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * std::int64_t(2 * n * n * n));
}
BENCHMARK(BM_MatmulF32)->Arg(128)->Arg(256);

void BM_Softmax(benchmark::State& state) {
  const auto n = std::size_t(state.range(0));
  std::mt19937_64 rng(2);
  const auto x = Tensor::randn({n, n}, rng);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(softmax(x, 1));
  state.SetItemsProcessed(state.iterations() * std::int64_t(n * n));
}
BENCHMARK(BM_Softmax)->Arg(64)->Arg(256);

void BM_CausalSoftmax(benchmark::State& state) {
  const auto n = std::size_t(state.range(0));
  std::mt19937_64 rng(2);
  const auto x = Tensor::randn({n, n}, rng);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(causal_softmax(x));
}
BENCHMARK(BM_CausalSoftmax)->Arg(256);

void BM_Conv1d(benchmark::State& state) {
  const auto n = std::size_t(state.range(0));
  std::mt19937_64 rng(3);
  const auto x = Tensor::randn({n, 128}, rng), k = Tensor::randn({3, 128, 16}, rng), b = Tensor::zeros({16});
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(conv1d(x, k, b));
}
BENCHMARK(BM_Conv1d)->Arg(256);

void BM_Conv2d(benchmark::State& state) {
  const auto c = std::size_t(state.range(0));
  std::mt19937_64 rng(4);
  const auto x = Tensor::randn({16, 16, c}, rng), k = Tensor::randn({3, 3, c, c}, rng), b = Tensor::zeros({c});
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, k, b));
}
BENCHMARK(BM_Conv2d)->Arg(16)->Arg(32);

void BM_MatmulBackward(benchmark::State& state) {
  const auto n = std::size_t(state.range(0));
  std::mt19937_64 rng(5);
  auto a = Tensor::randn({n, n}, rng), b = Tensor::randn({n, n}, rng);
  a.set_requires_grad();
  b.set_requires_grad();
  for (auto _ : state) {
    a.zero_grad();
    b.zero_grad();
    backward(sum(matmul(a, b)));
  }
}
BENCHMARK(BM_MatmulBackward)->Arg(128);

}  // namespace
