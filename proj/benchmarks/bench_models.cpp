#include <benchmark/benchmark.h>

#include <random>
#include <span>
#include <vector>

#include "cpool/autograd.hpp"
#include "cpool/contextpool.hpp"
#include "cpool/convnet.hpp"
#include "cpool/ops.hpp"
#include "cpool/transformer.hpp"

namespace {

using namespace cpool;

// range(0) = sequence length
void BM_ContextPool1dForward(benchmark::State& state) {
  const auto n = std::size_t(state.range(0));
  std::mt19937_64 rng(1);
  ContextPoolConfig cfg;
  cfg.causal = true;
  const ContextPool1d layer(128, n, cfg, rng);
  const auto x = Tensor::randn({n, 128}, rng);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(layer.forward(x));
}
BENCHMARK(BM_ContextPool1dForward)->Arg(64)->Arg(256);

void BM_ContextPool1dTruncated(benchmark::State& state) {
  const auto n = std::size_t(state.range(0));
  std::mt19937_64 rng(1);
  ContextPoolConfig cfg;
  cfg.causal = true;
  cfg.mask_truncation = 4.0;
  const ContextPool1d layer(128, n, cfg, rng);
  const auto x = Tensor::randn({n, 128}, rng);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(layer.forward(x));
}
BENCHMARK(BM_ContextPool1dTruncated)->Arg(256);

void BM_ContextPool1dBackward(benchmark::State& state) {
  const auto n = std::size_t(state.range(0));
  std::mt19937_64 rng(2);
  ContextPoolConfig cfg;
  cfg.causal = true;
  const ContextPool1d layer(128, n, cfg, rng);
  auto x = Tensor::randn({n, 128}, rng);
  x.set_requires_grad();
  for (auto _ : state) {
    x.zero_grad();
    backward(sum(layer.forward(x)));
  }
}
BENCHMARK(BM_ContextPool1dBackward)->Arg(256);

void BM_ContextPool2dForward(benchmark::State& state) {
  const auto c = std::size_t(state.range(0));
  std::mt19937_64 rng(3);
  const ContextPool2d layer(c, 16, 2, ContextPoolConfig::for_images(), rng);
  const auto x = Tensor::randn({16, 16, c}, rng);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(layer.forward(x));
}
BENCHMARK(BM_ContextPool2dForward)->Arg(16)->Arg(32);

TransformerConfig lm_config(bool with_cp) {
  TransformerConfig cfg;  // 2 layers, d 128, 4 heads, n 256
  if (with_cp) cfg.cp = ContextPoolConfig{};
  return cfg;
}

std::vector<int> tokens(std::size_t n, std::mt19937_64& rng) {
  std::vector<int> t(n);
  for (auto& v : t) v = int(rng() % 256);
  return t;
}

// range(0) = 1 with ContextPool, 0 without
void BM_LmForward(benchmark::State& state) {
  std::mt19937_64 rng(4);
  const TransformerLM lm(lm_config(state.range(0) != 0), rng);
  const auto t = tokens(256, rng);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(lm.forward(t));
}
BENCHMARK(BM_LmForward)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

// One forward and backward over 256 tokens at f32 GEMM precision.
void BM_LmTrainStep(benchmark::State& state) {
  std::mt19937_64 rng(5);
  const TransformerLM lm(lm_config(state.range(0) != 0), rng);
  const auto t = tokens(257, rng);
  const std::span<const int> input(t.data(), 256), target(t.data() + 1, 256);
  auto params = lm.named_parameters();
  PrecisionGuard f32(Precision::f32);
  for (auto _ : state) {
    for (auto& [name, p] : params) p.zero_grad();
    backward(lm_loss(lm.forward(input), target));
  }
}
BENCHMARK(BM_LmTrainStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

// range(0): 0 average pooling, 1 ContextPool
void BM_ConvNetForward(benchmark::State& state) {
  std::mt19937_64 rng(6);
  ConvNetConfig cfg;
  cfg.pooling = state.range(0) ? PoolingKind::contextpool : PoolingKind::average;
  const ConvNet net(cfg, rng);
  const auto image = Tensor::uniform({16, 16, 1}, rng, 0.0, 1.0);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(net.forward(image));
}
BENCHMARK(BM_ConvNetForward)->Arg(0)->Arg(1);

}  // namespace
