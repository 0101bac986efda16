#include "cpool/gradsuite.hpp"

#include <algorithm>
#include <functional>
#include <random>
#include <stdexcept>

#include "cpool/contextpool.hpp"
#include "cpool/convnet.hpp"
#include "cpool/gradcheck.hpp"
#include "cpool/ops.hpp"
#include "cpool/transformer.hpp"

namespace cpool {

namespace {

constexpr double kEps = 1e-5;

Tensor uniform(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

Tensor leaf(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  return uniform(std::move(shape), rng, lo, hi).set_requires_grad();
}

std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

using Sink = std::function<void(const std::string& op, double err)>;

void ops_instance(std::mt19937_64& rng, const Sink& sink) {
  const auto n = pick(rng, 1, 8), d = pick(rng, 1, 6), p = pick(rng, 1, 6);
  const auto w = uniform({d, p}, rng), row = uniform({d}, rng), proj = uniform({n, d}, rng);
  const auto pos = uniform({n, d}, rng, 0.5, 2.0);
  std::vector<int> targets(n);
  for (auto& t : targets) t = int(pick(rng, 0, d - 1));
  const std::vector<int> rows{0, 0, int(n - 1)};

  const std::vector<std::pair<const char*, std::function<Tensor(const Tensor&)>>> unary = {
      {"matmul", [&](const Tensor& t) { return sum(matmul(t, w) * matmul(t, w)); }},
      {"transpose", [&](const Tensor& t) { return sum(transpose(t) * transpose(proj)); }},
      {"add", [&](const Tensor& t) { return sum((t + row) * proj); }},
      {"sub_mul", [&](const Tensor& t) { return sum((t - proj) * (t * row)); }},
      {"div", [&](const Tensor& t) { return sum(proj / (t * t + 1.0)); }},
      {"exp_log", [&](const Tensor& t) { return sum(log(exp(t) + 2.0) * proj); }},
      {"logistic", [&](const Tensor& t) { return sum(logistic(t) * proj); }},
      {"silu", [&](const Tensor& t) { return sum(silu(t) * proj); }},
      {"relu", [&](const Tensor& t) { return sum(relu(t + -1.25) * proj); }},
      {"clamp_min", [&](const Tensor& t) { return sum(clamp_min(t * 3.0, 0.05) * proj); }},
      {"sum_axis", [&](const Tensor& t) { return sum(exp(sum_axis(t, 0))) + sum(exp(sum_axis(t, 1, false))); }},
      {"mean", [&](const Tensor& t) { return exp(mean(t * proj)); }},
      {"softmax", [&](const Tensor& t) { return sum(softmax(t, 0) * proj) + sum(softmax(t, 1) * proj * proj); }},
      {"layer_norm", [&](const Tensor& t) { return sum(layer_norm(t * 2.0, row + 1.5, row) * proj); }},
      {"cross_entropy", [&](const Tensor& t) { return cross_entropy(t * 2.0, targets); }},
      {"slice_concat",
       [&](const Tensor& t) {
         return sum(concat_cols(std::vector<Tensor>{exp(t), t}) * concat_cols(std::vector<Tensor>{proj, proj})) +
                sum(exp(slice_cols(t, 0, (d + 1) / 2)));
       }},
      {"reshape", [&](const Tensor& t) { return sum(exp(reshape(t, {d, n})) * reshape(proj, {d, n})); }},
      {"gather_rows", [&](const Tensor& t) { return sum(exp(gather_rows(t, rows))); }},
  };
  for (const auto& [name, fn] : unary) sink(name, finite_diff_check(fn, pos, kEps));

  const auto sq_proj = uniform({n, n}, rng);
  sink("causal_softmax",
       finite_diff_check([&](const Tensor& t) { return sum(causal_softmax(t) * sq_proj); }, uniform({n, n}, rng), kEps));

  const auto x = leaf({n, d}, rng), k1 = leaf({3, d, p}, rng), b1 = leaf({p}, rng);
  sink("conv1d", finite_diff_check(
                     [&] { return sum(silu(conv1d(x, k1, b1)) * 0.7) + sum(conv1d(x, k1, b1, Padding::causal)); },
                     {x, k1, b1}, kEps)
                     .max_rel_error);

  const auto h = pick(rng, 2, 4), c = pick(rng, 1, 3);
  const auto img = leaf({h, h, c}, rng), k2 = leaf({3, 3, c, p}, rng), b2 = leaf({p}, rng);
  const auto out = (h + 1) / 2;
  const auto pool_proj = uniform({out, out, p}, rng);
  sink("conv2d_avg_pool",
       finite_diff_check(
           [&] { return sum(avg_pool2d(silu(conv2d(img, k2, b2)), 2, 2) * pool_proj) + sum(global_avg_pool(exp(img))); },
           {img, k2, b2}, kEps)
           .max_rel_error);
  sink("max_pool2d",
       finite_diff_check([&] { return sum(max_pool2d(conv2d(img, k2, b2), 2, 2) * pool_proj); }, {img, k2}, kEps)
           .max_rel_error);
}

void contextpool_instance(std::mt19937_64& rng, const Sink& sink) {
  static const std::vector<std::pair<WeightingMode, LocalityMode>> variants = {
      {WeightingMode::learned, LocalityMode::gaussian},  {WeightingMode::unnormalized, LocalityMode::gaussian},
      {WeightingMode::uniform, LocalityMode::gaussian},  {WeightingMode::nonlocal, LocalityMode::gaussian},
      {WeightingMode::learned, LocalityMode::none},      {WeightingMode::learned, LocalityMode::fixed_window},
      {WeightingMode::learned, LocalityMode::random_sparse},
  };
  const auto n = pick(rng, 2, 8), d = pick(rng, 1, 6);
  for (const auto& [weighting, locality] : variants)
    for (bool causal : {false, true}) {
      ContextPoolConfig cfg;
      cfg.weighting = weighting;
      cfg.locality = locality;
      cfg.causal = causal;
      cfg.r = 0.3;
      ContextPool1d layer(d, n, cfg, rng);
      const auto x = leaf({n, d}, rng), u = uniform({n, d}, rng);
      std::vector<Tensor> leaves{x};
      for (auto& [name, t] : layer.named_parameters()) leaves.push_back(t);
      const auto res = finite_diff_check([&] { return sum(layer.forward(x) * u); }, leaves, kEps);
      sink("pool1d." + std::string(to_string(weighting)) + "+" + std::string(to_string(locality)) +
               (causal ? ".causal" : ""),
           res.max_rel_error);
    }

  auto cfg = ContextPoolConfig::for_images();
  cfg.r = 0.4;
  cfg.hidden_channels = 3;
  const auto side = pick(rng, 2, 6), c = pick(rng, 1, 3), stride = pick(rng, 1, 2);
  auto pred = PredictorParams::init_2d(c, cfg, side, rng);
  pred.kernel2 = leaf(pred.kernel2.shape(), rng, -0.5, 0.5);
  const auto x = leaf({side, side, c}, rng);
  const auto out = (side + stride - 1) / stride;
  const auto u = uniform({out, out, c}, rng);
  sink("pool2d", finite_diff_check([&] { return sum(cp_pool_layer(x, pred, cfg, stride) * u); },
                                   {x, pred.kernel1, pred.bias1, pred.kernel2}, kEps)
                     .max_rel_error);
}

void attention_instance(std::mt19937_64& rng, const Sink& sink) {
  // Layer norm over 2 features is a near-step function of their difference.
  const auto heads = pick(rng, 1, 2), dh = heads == 1 ? pick(rng, 3, 6) : 3, n = pick(rng, 1, 8);
  TransformerConfig cfg;
  cfg.layers = 1;
  cfg.d_model = heads * dh;
  cfg.heads = heads;
  cfg.ffn_hidden = pick(rng, 2, 6);
  cfg.vocab_size = 5;
  cfg.max_seq_len = 8;
  cfg.cp = ContextPoolConfig{};
  cfg.cp->r = 0.3;
  TransformerLM lm(cfg, rng);
  const auto d = cfg.d_model;
  const auto x = leaf({n, d}, rng), u = uniform({n, d}, rng);
  for (bool causal : {false, true}) {
    const auto& attn = lm.blocks().front().attn;
    const auto res = finite_diff_check([&] { return sum(multi_head_self_attention(x, attn, causal) * u); },
                                       {x, attn.wq, attn.wk, attn.wv, attn.wo}, kEps);
    sink(causal ? "mhsa.causal" : "mhsa", res.max_rel_error);
  }
  const auto& block = lm.blocks().front();
  std::vector<Tensor> leaves{x};
  for (const auto& [name, t] : lm.named_parameters())
    if (name.starts_with("blocks.0.")) leaves.push_back(t);
  sink("block_with_cp",
       finite_diff_check([&] { return sum(block_forward(x, block, true) * u); }, leaves, kEps).max_rel_error);
}

void convnet_instance(std::mt19937_64& rng, const Sink& sink) {
  // Max pooling after relu ties on zeros; it is covered on continuous inputs in "ops".
  for (auto pooling : {PoolingKind::average, PoolingKind::contextpool}) {
    ConvNetConfig cfg;
    cfg.stages = {{pick(rng, 1, 3), 1}, {pick(rng, 1, 3), 1}};
    cfg.image_size = 2 * pick(rng, 1, 3);
    cfg.pooling = pooling;
    cfg.cp.hidden_channels = 2;
    ConvNet net(cfg, rng);
    // Zero biases behind an all-zero relu map put the next relu exactly on its kink.
    for (auto& [name, t] : net.named_parameters())
      if (name.starts_with("stages.") && name.ends_with(".bias")) {
        Tensor b = t;
        const auto r = uniform(t.shape(), rng, 0.1, 0.5);
        std::copy(r.data().begin(), r.data().end(), b.mutable_data().begin());
      }
    if (pooling == PoolingKind::contextpool) {
      auto& pool = net.params().pools[0];
      pool.kernel2 = leaf(pool.kernel2.shape(), rng, -0.5, 0.5);
    }
    const auto image = uniform({cfg.image_size, cfg.image_size, 1}, rng);
    const auto u = uniform({cfg.num_classes}, rng);
    std::vector<Tensor> leaves;
    for (auto& [name, t] : net.named_parameters())
      if (name != "pools.0.bias2") leaves.push_back(t);
    sink("classifier." + std::string(to_string(pooling)),
         finite_diff_check([&] { return sum(net.forward(image) * u); }, leaves, kEps).max_rel_error);
  }
}

}  // namespace

const GradSuiteEntry& GradSuiteReport::worst() const {
  return *std::max_element(entries.begin(), entries.end(),
                           [](const auto& a, const auto& b) { return a.max_rel_error < b.max_rel_error; });
}

const std::vector<std::string>& grad_suite_modules() {
  static const std::vector<std::string> modules{"ops", "contextpool", "attention", "convnet"};
  return modules;
}

GradSuiteReport run_grad_suite(const std::string& module, std::uint64_t seed, std::size_t instances) {
  const auto& all = grad_suite_modules();
  if (module != "all" && std::find(all.begin(), all.end(), module) == all.end())
    throw std::invalid_argument("unknown gradcheck module '" + module + "'");
  PrecisionGuard precision(Precision::f64);
  GradSuiteReport report;
  for (const auto& m : all) {
    if (module != "all" && module != m) continue;
    std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(&m - all.data())};
    std::mt19937_64 rng(seq);
    for (std::size_t i = 0; i < instances; ++i) {
      const Sink sink = [&](const std::string& op, double err) {
        report.entries.push_back({m, op, i, err});
        report.max_rel_error = std::max(report.max_rel_error, err);
      };
      if (m == "ops") ops_instance(rng, sink);
      else if (m == "contextpool") contextpool_instance(rng, sink);
      else if (m == "attention") attention_instance(rng, sink);
      else convnet_instance(rng, sink);
    }
  }
  return report;
}

}  // namespace cpool
