#pragma once

#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "cpool/contextpool.hpp"
#include "cpool/tensor.hpp"

namespace cpool {

enum class PoolingKind { average, max, contextpool };

std::string_view to_string(PoolingKind k);
PoolingKind parse_pooling_kind(std::string_view s);

struct ConvStage {
  std::size_t channels = 16;
  std::size_t convs = 2;
  bool operator==(const ConvStage&) const = default;
};

/// Stages of 3x3 conv + ReLU; a pooling layer sits between consecutive
/// stages; global average pool and a linear head follow the last stage.
struct ConvNetConfig {
  std::vector<ConvStage> stages = {{16, 2}, {32, 2}, {64, 2}};
  PoolingKind pooling = PoolingKind::average;
  ContextPoolConfig cp = ContextPoolConfig::for_images();
  std::size_t stride = 2;
  std::size_t num_classes = 3;
  std::size_t image_size = 16;
  std::size_t in_channels = 1;

  std::size_t pooling_layers() const { return stages.empty() ? 0 : stages.size() - 1; }
  /// Spatial extent entering stage `s`.
  std::size_t extent_at(std::size_t s) const;
  /// Throws std::invalid_argument naming the first violated field.
  void validate() const;
  bool operator==(const ConvNetConfig&) const = default;
};

void to_json(nlohmann::json& j, const ConvNetConfig& c);
void from_json(const nlohmann::json& j, ConvNetConfig& c);

struct ConvLayer {
  Tensor kernel;  // [3 x 3 x c_in x c_out]
  Tensor bias;    // [c_out]
};

struct ConvNetParams {
  std::vector<std::vector<ConvLayer>> stages;
  /// One predictor per pooling layer; empty unless pooling is contextpool.
  std::vector<PredictorParams> pools;
  Tensor head_w, head_b;  // [c_last x classes], [classes]

  /// Conv and head weights are drawn before any pooling parameters, so two
  /// configs differing only in pooling kind share bit-identical conv stages.
  static ConvNetParams init(const ConvNetConfig& cfg, std::mt19937_64& rng);
  static ConvNetParams zeros(const ConvNetConfig& cfg);

  std::vector<std::pair<std::string, Tensor>> named() const;
  std::size_t parameter_count() const;
};

/// Pooling between stages, as selected by cfg.pooling.
Tensor pool_layer(const Tensor& x, const ConvNetConfig& cfg, const ConvNetParams& params, std::size_t index);

/// Class logits [num_classes] for one image [h x w x c_in].
Tensor classifier_forward(const Tensor& image, const ConvNetConfig& cfg, const ConvNetParams& params);

/// Trainable scalars implied by the config.
std::size_t analytic_parameter_count(const ConvNetConfig& cfg);

class ConvNet {
 public:
  ConvNet(ConvNetConfig cfg, std::mt19937_64& rng);

  Tensor forward(const Tensor& image) const { return classifier_forward(image, cfg_, params_); }
  const ConvNetConfig& config() const { return cfg_; }
  ConvNetParams& params() { return params_; }
  const ConvNetParams& params() const { return params_; }
  std::vector<std::pair<std::string, Tensor>> named_parameters() const { return params_.named(); }
  void load_state(const std::vector<std::pair<std::string, Tensor>>& state);
  std::size_t parameter_count() const { return params_.parameter_count(); }

 private:
  ConvNetConfig cfg_;
  ConvNetParams params_;
};

}  // namespace cpool
