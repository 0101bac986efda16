#include "cpool/convnet.hpp"

#include <cmath>
#include <map>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "cpool/ops.hpp"

namespace cpool {

std::string_view to_string(PoolingKind k) {
  switch (k) {
    case PoolingKind::average: return "average";
    case PoolingKind::max: return "max";
    case PoolingKind::contextpool: return "contextpool";
  }
  return "?";
}

PoolingKind parse_pooling_kind(std::string_view s) {
  if (s == "average") return PoolingKind::average;
  if (s == "max") return PoolingKind::max;
  if (s == "contextpool") return PoolingKind::contextpool;
  throw std::invalid_argument("unknown pooling kind '" + std::string(s) + "'");
}

std::size_t ConvNetConfig::extent_at(std::size_t s) const {
  std::size_t e = image_size;
  for (std::size_t i = 0; i < s; ++i) e = pooled_extent(e, stride);
  return e;
}

void ConvNetConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("convnet: " + m); };
  if (stages.empty()) fail("at least one stage is required");
  for (const auto& s : stages)
    if (s.channels == 0 || s.convs == 0) fail("stage channels and conv count must be >= 1");
  if (stride == 0) fail("stride must be >= 1");
  if (num_classes == 0) fail("num_classes must be >= 1");
  if (image_size == 0 || in_channels == 0) fail("image_size and in_channels must be >= 1");
  std::size_t total = 1;
  for (std::size_t i = 0; i < pooling_layers(); ++i) total *= stride;
  if (image_size % total != 0)
    fail("image_size " + std::to_string(image_size) + " is not divisible by cumulative stride " + std::to_string(total));
  if (pooling == PoolingKind::contextpool) {
    cp.validate();
    if (cp.causal) fail("contextpool pooling must be non-causal");
    if (cp.weighting == WeightingMode::nonlocal) fail("nonlocal weighting is not available for 2D pooling");
    if (cp.locality != LocalityMode::gaussian) fail("2D pooling supports only the gaussian locality prior");
  }
}

void to_json(nlohmann::json& j, const ConvNetConfig& c) {
  auto stages = nlohmann::json::array();
  for (const auto& s : c.stages) stages.push_back({{"channels", s.channels}, {"convs", s.convs}});
  j = {{"stages", stages},
       {"pooling", std::string(to_string(c.pooling))},
       {"stride", c.stride},
       {"num_classes", c.num_classes},
       {"image_size", c.image_size},
       {"in_channels", c.in_channels},
       {"cp", c.cp}};
}

void from_json(const nlohmann::json& j, ConvNetConfig& c) {
  c = ConvNetConfig{};
  if (j.contains("stages")) {
    c.stages.clear();
    for (const auto& s : j.at("stages")) c.stages.push_back({s.at("channels").get<std::size_t>(), s.value("convs", 2u)});
  }
  if (j.contains("pooling")) c.pooling = parse_pooling_kind(j.at("pooling").get<std::string>());
  c.stride = j.value("stride", c.stride);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.image_size = j.value("image_size", c.image_size);
  c.in_channels = j.value("in_channels", c.in_channels);
  if (j.contains("cp")) c.cp = j.at("cp").get<ContextPoolConfig>();
}

ConvNetParams ConvNetParams::init(const ConvNetConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  ConvNetParams p;
  std::size_t cin = cfg.in_channels;
  for (const auto& stage : cfg.stages) {
    auto& layers = p.stages.emplace_back();
    for (std::size_t i = 0; i < stage.convs; ++i) {
      const double he = std::sqrt(2.0 / double(9 * cin));
      layers.push_back({Tensor::randn({3, 3, cin, stage.channels}, rng, he).set_requires_grad(),
                        Tensor::zeros({stage.channels}).set_requires_grad()});
      cin = stage.channels;
    }
  }
  p.head_w = Tensor::randn({cin, cfg.num_classes}, rng, 1.0 / std::sqrt(double(cin))).set_requires_grad();
  p.head_b = Tensor::zeros({cfg.num_classes}).set_requires_grad();
  if (cfg.pooling == PoolingKind::contextpool)
    for (std::size_t i = 0; i < cfg.pooling_layers(); ++i)
      p.pools.push_back(PredictorParams::init_2d(cfg.stages[i].channels, cfg.cp, cfg.extent_at(i), rng));
  return p;
}

ConvNetParams ConvNetParams::zeros(const ConvNetConfig& cfg) {
  cfg.validate();
  ConvNetParams p;
  std::size_t cin = cfg.in_channels;
  for (const auto& stage : cfg.stages) {
    auto& layers = p.stages.emplace_back();
    for (std::size_t i = 0; i < stage.convs; ++i) {
      layers.push_back({Tensor::zeros({3, 3, cin, stage.channels}).set_requires_grad(),
                        Tensor::zeros({stage.channels}).set_requires_grad()});
      cin = stage.channels;
    }
  }
  p.head_w = Tensor::zeros({cin, cfg.num_classes}).set_requires_grad();
  p.head_b = Tensor::zeros({cfg.num_classes}).set_requires_grad();
  if (cfg.pooling == PoolingKind::contextpool)
    for (std::size_t i = 0; i < cfg.pooling_layers(); ++i)
      p.pools.push_back(PredictorParams::zeros_2d(cfg.stages[i].channels, cfg.cp));
  return p;
}

std::vector<std::pair<std::string, Tensor>> ConvNetParams::named() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t s = 0; s < stages.size(); ++s)
    for (std::size_t i = 0; i < stages[s].size(); ++i) {
      const auto p = "stages." + std::to_string(s) + ".conv" + std::to_string(i) + ".";
      out.emplace_back(p + "kernel", stages[s][i].kernel);
      out.emplace_back(p + "bias", stages[s][i].bias);
    }
  for (std::size_t i = 0; i < pools.size(); ++i)
    for (auto& [name, t] : pools[i].named()) out.emplace_back("pools." + std::to_string(i) + "." + name, t);
  out.emplace_back("head.w", head_w);
  out.emplace_back("head.b", head_b);
  return out;
}

std::size_t ConvNetParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named()) n += t.numel();
  return n;
}

Tensor pool_layer(const Tensor& x, const ConvNetConfig& cfg, const ConvNetParams& params, std::size_t index) {
  switch (cfg.pooling) {
    case PoolingKind::average: return avg_pool2d(x, cfg.stride, cfg.stride);
    case PoolingKind::max: return max_pool2d(x, cfg.stride, cfg.stride);
    case PoolingKind::contextpool: return cp_pool_layer(x, params.pools.at(index), cfg.cp, cfg.stride);
  }
  throw std::logic_error("unreachable pooling kind");
}

Tensor classifier_forward(const Tensor& image, const ConvNetConfig& cfg, const ConvNetParams& params) {
  const Shape expected{cfg.image_size, cfg.image_size, cfg.in_channels};
  if (image.shape() != expected)
    throw ShapeError("classifier expects an image of shape " + shape_str(expected) + ", got " + shape_str(image.shape()));
  if (params.stages.size() != cfg.stages.size()) throw ShapeError("parameter stages do not match the config");
  Tensor x = image;
  for (std::size_t s = 0; s < params.stages.size(); ++s) {
    if (s > 0) x = pool_layer(x, cfg, params, s - 1);
    for (const auto& layer : params.stages[s]) x = relu(conv2d(x, layer.kernel, layer.bias));
  }
  Tensor pooled = reshape(global_avg_pool(x), {1, x.dim(2)});
  return reshape(matmul(pooled, params.head_w) + params.head_b, {cfg.num_classes});
}

ConvNet::ConvNet(ConvNetConfig cfg, std::mt19937_64& rng) : cfg_(std::move(cfg)) {
  params_ = ConvNetParams::init(cfg_, rng);
}

void ConvNet::load_state(const std::vector<std::pair<std::string, Tensor>>& state) {
  std::map<std::string, Tensor> by_name(state.begin(), state.end());
  for (auto& [name, t] : named_parameters()) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint is missing tensor '" + name + "'");
    if (it->second.shape() != t.shape()) {
      throw ShapeError("checkpoint tensor '" + name + "' has shape " + shape_str(it->second.shape()) + ", expected " +
                       shape_str(t.shape()));
    }
    Tensor dst = t;
    std::copy(it->second.data().begin(), it->second.data().end(), dst.mutable_data().begin());
  }
}

std::size_t analytic_parameter_count(const ConvNetConfig& cfg) {
  std::size_t n = 0, cin = cfg.in_channels;
  for (const auto& stage : cfg.stages)
    for (std::size_t i = 0; i < stage.convs; ++i) {
      n += 9 * cin * stage.channels + stage.channels;
      cin = stage.channels;
    }
  n += cin * cfg.num_classes + cfg.num_classes;
  if (cfg.pooling == PoolingKind::contextpool) {
    const auto k = cfg.cp.kernel_size;
    for (std::size_t i = 0; i < cfg.pooling_layers(); ++i) {
      const auto c = cfg.stages[i].channels, h = cfg.cp.hidden_for(c);
      n += k * k * c * h + h + k * k * h * 2 + 2;
    }
  }
  return n;
}

}  // namespace cpool
