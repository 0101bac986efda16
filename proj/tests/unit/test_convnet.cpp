#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include "cpool/convnet.hpp"
#include "cpool/gradcheck.hpp"
#include "cpool/ops.hpp"
#include "helpers.hpp"

namespace cpool {
namespace {

using namespace cpool::testing;

Vec avg_pool_oracle(const Vec& x, std::size_t h, std::size_t w, std::size_t c, std::size_t stride) {
  const auto oh = h / stride, ow = w / stride;
  Vec y(oh * ow * c, 0.0);
  for (std::size_t oi = 0; oi < oh; ++oi)
    for (std::size_t oj = 0; oj < ow; ++oj)
      for (std::size_t ch = 0; ch < c; ++ch) {
        long double acc = 0;
        for (std::size_t a = 0; a < stride; ++a)
          for (std::size_t b = 0; b < stride; ++b) acc += x[((oi * stride + a) * w + oj * stride + b) * c + ch];
        y[(oi * ow + oj) * c + ch] = double(acc / (stride * stride));
      }
  return y;
}

// conv2d -> SiLU -> conv2d, then softmax / logistic / sigma, then the literal
// strided pooling loop.
Vec cp_pool_oracle(const Vec& x, const PredictorParams& p, const ContextPoolConfig& cfg, std::size_t h,
                   std::size_t w, std::size_t c, std::size_t stride) {
  const auto k = cfg.kernel_size, hid = p.bias1.numel();
  auto hidden = oracle::conv2d(x, to_vec(p.kernel1), to_vec(p.bias1), h, w, c, k, k, hid);
  for (auto& v : hidden) v = oracle::silu(v);
  const auto out = oracle::conv2d(hidden, to_vec(p.kernel2), to_vec(p.bias2), h, w, hid, k, k, 2);
  Vec logits(h * w), sigma(h * w);
  for (std::size_t i = 0; i < h * w; ++i) {
    logits[i] = out[i * 2];
    sigma[i] = std::max(cfg.r * oracle::logistic(out[i * 2 + 1]) * double(h + w) / 2.0, cfg.sigma_floor);
  }
  return oracle::pool_2d(x, oracle::softmax(logits), sigma, h, w, c, stride);
}

Vec conv_relu(const Vec& x, const ConvLayer& l, std::size_t h, std::size_t w, std::size_t cin) {
  auto y = oracle::conv2d(x, to_vec(l.kernel), to_vec(l.bias), h, w, cin, 3, 3, l.bias.numel());
  for (auto& v : y) v = std::max(v, 0.0);
  return y;
}

// Straight-line classifier: conv stages, pooling, global mean, linear head.
Vec classifier_oracle(const Vec& image, const ConvNetConfig& cfg, const ConvNetParams& p) {
  Vec x = image;
  std::size_t e = cfg.image_size, c = cfg.in_channels;
  for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
    if (s > 0) {
      x = cfg.pooling == PoolingKind::average ? avg_pool_oracle(x, e, e, c, cfg.stride)
                                              : cp_pool_oracle(x, p.pools[s - 1], cfg.cp, e, e, c, cfg.stride);
      e /= cfg.stride;
    }
    for (const auto& l : p.stages[s]) {
      x = conv_relu(x, l, e, e, c);
      c = l.bias.numel();
    }
  }
  Vec g(c, 0.0);
  for (std::size_t i = 0; i < e * e; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) g[ch] += x[i * c + ch] / double(e * e);
  auto logits = oracle::matmul(g, to_vec(p.head_w), 1, c, cfg.num_classes);
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] += p.head_b[i];
  return logits;
}

ConvNetConfig small_config(PoolingKind kind) {
  ConvNetConfig cfg;
  cfg.stages = {{3, 1}, {4, 2}, {5, 1}};
  cfg.image_size = 8;
  cfg.in_channels = 2;
  cfg.num_classes = 3;
  cfg.pooling = kind;
  cfg.cp.r = 0.3;
  cfg.cp.hidden_channels = 3;
  return cfg;
}

TEST(AvgPool, ConstantMapIsConstant) {
  const auto y = avg_pool2d(Tensor::full({4, 6, 2}, -1.5), 2, 2);
  EXPECT_EQ(y.shape(), Shape({2, 3, 2}));
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, -1.5);
}

TEST(AvgPool, TwoByTwoMean) {
  const auto y = avg_pool2d(Tensor({2, 2, 1}, {1, 2, 3, 4}), 2, 2);
  EXPECT_EQ(y.shape(), Shape({1, 1, 1}));
  EXPECT_DOUBLE_EQ(y.item(), 2.5);
}

TEST(AvgPool, MatchesNaiveOracle) {
  std::mt19937_64 rng(1);
  const auto x = rand_tensor({4, 4, 3}, rng);
  EXPECT_LT(max_abs_diff(to_vec(avg_pool2d(x, 2, 2)), avg_pool_oracle(to_vec(x), 4, 4, 3, 2)), 1e-12);
}

TEST(CpPoolLayer, ZeroPredictorGivesUniformWeightsAndHalfSizes) {
  std::mt19937_64 rng(2);
  const auto cfg = ContextPoolConfig::for_images();
  const auto p = predict_pool_params_2d(rand_tensor({6, 6, 3}, rng), PredictorParams::zeros_2d(3, cfg), cfg);
  for (double w : p.w.data()) EXPECT_DOUBLE_EQ(w, 1.0 / 36);
  for (double s : p.s.data()) EXPECT_DOUBLE_EQ(s, 0.5);
}

TEST(CpPoolLayer, StrideOneAtFloorIsIdentity) {
  std::mt19937_64 rng(3);
  const auto cfg = ContextPoolConfig::for_images();
  auto pred = PredictorParams::init_2d(3, cfg, 6, rng);
  pred.bias2 = Tensor({2}, {0.0, -60.0});  // s ~ 1e-26, sigma at the floor
  const auto x = rand_tensor({6, 5, 3}, rng);
  EXPECT_LT(max_abs_diff(to_vec(cp_pool_layer(x, pred, cfg, 1)), to_vec(x)), 1e-9);
}

TEST(CpPoolLayer, MatchesCompositionOracle) {
  std::mt19937_64 rng(4);
  auto cfg = ContextPoolConfig::for_images();
  cfg.r = 0.5;
  for (int trial = 0; trial < 10; ++trial) {
    auto pred = PredictorParams::init_2d(3, cfg, 6, rng);
    pred.kernel2 = rand_tensor(pred.kernel2.shape(), rng, -0.5, 0.5);
    pred.bias2 = rand_tensor({2}, rng);
    const auto x = rand_tensor({6, 6, 3}, rng);
    const auto y = cp_pool_layer(x, pred, cfg, 2);
    ASSERT_EQ(y.shape(), Shape({3, 3, 3}));
    EXPECT_LT(max_abs_diff(to_vec(y), cp_pool_oracle(to_vec(x), pred, cfg, 6, 6, 3, 2)), 1e-12) << "trial " << trial;
  }
}

TEST(CpPoolLayer, GradientsMatchFiniteDifferencesOn5x5x2) {
  std::mt19937_64 rng(5);
  auto cfg = ContextPoolConfig::for_images();
  cfg.r = 0.4;
  cfg.hidden_channels = 3;
  for (int trial = 0; trial < 5; ++trial) {
    auto pred = PredictorParams::init_2d(2, cfg, 5, rng);
    pred.kernel2 = rand_tensor(pred.kernel2.shape(), rng, -0.5, 0.5).set_requires_grad();
    pred.bias2 = Tensor({2}, {0.0, oracle::random_vec(1, rng)[0]}).set_requires_grad();
    auto x = rand_tensor({5, 5, 2}, rng).set_requires_grad();
    const auto u = rand_tensor({3, 3, 2}, rng);
    const auto res = finite_diff_check([&] { return sum(cp_pool_layer(x, pred, cfg, 2) * u); },
                                       {x, pred.kernel1, pred.bias1, pred.kernel2});
    EXPECT_LT(res.max_rel_error, 1e-4) << "trial " << trial;
  }
}

TEST(ConvNetConfig, RejectsIndivisibleExtent) {
  ConvNetConfig cfg;
  cfg.image_size = 14;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg.image_size = 16;
  EXPECT_NO_THROW(cfg.validate());
  cfg.pooling = PoolingKind::contextpool;
  cfg.cp.causal = true;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(ConvNetConfig, JsonRoundTrip) {
  auto cfg = small_config(PoolingKind::contextpool);
  cfg.cp.mask_truncation = 3.0;
  const nlohmann::json j = cfg;
  EXPECT_EQ(j.get<ConvNetConfig>(), cfg);
  EXPECT_THROW(parse_pooling_kind("median"), std::invalid_argument);
}

TEST(Classifier, PoolingKindsShareLogitShape) {
  for (auto kind : {PoolingKind::average, PoolingKind::max, PoolingKind::contextpool}) {
    std::mt19937_64 rng(6);
    ConvNet net(ConvNetConfig{.pooling = kind}, rng);
    const auto logits = net.forward(rand_tensor({16, 16, 1}, rng));
    EXPECT_EQ(logits.shape(), Shape({3})) << to_string(kind);
  }
}

TEST(Classifier, ZeroInputZeroParamsGivesZeroLogits) {
  for (auto kind : {PoolingKind::average, PoolingKind::contextpool}) {
    ConvNetConfig cfg{.pooling = kind};
    const auto logits = classifier_forward(Tensor::zeros({16, 16, 1}), cfg, ConvNetParams::zeros(cfg));
    for (double v : logits.data()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Classifier, RejectsWrongImageShape) {
  std::mt19937_64 rng(7);
  ConvNet net(ConvNetConfig{}, rng);
  EXPECT_THROW(net.forward(Tensor::zeros({8, 8, 1})), ShapeError);
}

TEST(Classifier, MatchesStraightLineOracle) {
  for (auto kind : {PoolingKind::average, PoolingKind::contextpool}) {
    std::mt19937_64 rng(8);
    const auto cfg = small_config(kind);
    ConvNet net(cfg, rng);
    const auto image = rand_tensor({8, 8, 2}, rng);
    EXPECT_LT(max_abs_diff(to_vec(net.forward(image)), classifier_oracle(to_vec(image), cfg, net.params())), 1e-10)
        << to_string(kind);
  }
}

TEST(Classifier, PoolingSwapLeavesConvStagesBitIdentical) {
  std::mt19937_64 ra(9), rb(9);
  ConvNet avg(ConvNetConfig{.pooling = PoolingKind::average}, ra);
  ConvNet cp(ConvNetConfig{.pooling = PoolingKind::contextpool}, rb);
  const auto pa = avg.named_parameters(), pc = cp.named_parameters();
  std::size_t shared = 0;
  for (const auto& [name, t] : pa) {
    const auto it = std::find_if(pc.begin(), pc.end(), [&](const auto& e) { return e.first == name; });
    ASSERT_NE(it, pc.end()) << name;
    EXPECT_TRUE(std::equal(t.data().begin(), t.data().end(), it->second.data().begin())) << name;
    ++shared;
  }
  EXPECT_EQ(pc.size(), shared + 2 * 4);

  std::mt19937_64 rng(10);
  const auto image = rand_tensor({16, 16, 1}, rng);
  auto first_stage = [&](const ConvNet& net) {
    Tensor x = image;
    for (const auto& l : net.params().stages[0]) x = relu(conv2d(x, l.kernel, l.bias));
    return to_vec(x);
  };
  EXPECT_EQ(first_stage(avg), first_stage(cp));
}

TEST(Classifier, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(11);
  auto cfg = small_config(PoolingKind::contextpool);
  cfg.stages = {{2, 1}, {3, 1}};
  cfg.image_size = 4;
  cfg.in_channels = 1;
  ConvNet net(cfg, rng);
  auto& pool = net.params().pools[0];
  pool.kernel2 = rand_tensor(pool.kernel2.shape(), rng, -0.5, 0.5).set_requires_grad();
  const auto image = rand_tensor({4, 4, 1}, rng);
  std::vector<Tensor> leaves;
  for (auto& [name, t] : net.named_parameters())
    if (name != "pools.0.bias2") leaves.push_back(t);
  const auto res = finite_diff_check([&] { return sum(net.forward(image) * Tensor({3}, {0.3, -1.1, 0.7})); }, leaves);
  EXPECT_LT(res.max_rel_error, 1e-4);
}

}  // namespace
}  // namespace cpool
