#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "cpool/tensor.hpp"

namespace cpool {

/// How the per-position pooling weights are produced.
enum class WeightingMode {
  learned,       // softmax over positions of predictor channel 0
  unnormalized,  // raw predictor channel 0
  uniform,       // 1/n
  nonlocal,      // per-anchor softmax of embedded feature similarity
};

/// Which locality prior multiplies the weights.
enum class LocalityMode {
  gaussian,         // soft mask with predicted width
  none,             // all ones
  fixed_window,     // binary, |j - i| < window
  adaptive_window,  // binary, |j - i| <= round(sigma_i), straight-through to s
  random_sparse,    // fixed random binary pattern drawn at construction
};

std::string_view to_string(WeightingMode m);
std::string_view to_string(LocalityMode m);
WeightingMode parse_weighting_mode(std::string_view s);
LocalityMode parse_locality_mode(std::string_view s);

struct ContextPoolConfig {
  double r = 0.1;
  std::size_t kernel_size = 3;
  std::size_t hidden_channels = 0;  // 0 selects max(d / 8, 8)
  WeightingMode weighting = WeightingMode::learned;
  LocalityMode locality = LocalityMode::gaussian;
  std::size_t window = 5;      // fixed_window width
  double keep_fraction = 0.5;  // random_sparse
  bool causal = false;
  double sigma_floor = 0.1;
  std::optional<double> mask_truncation;  // in units of sigma; unset = dense
  /// Width (tokens/pixels) the predictor's size bias is initialised to.
  double init_sigma = 0.5;

  /// Defaults for 2D feature maps (r = 0.05).
  static ContextPoolConfig for_images();

  std::size_t hidden_for(std::size_t channels) const;
  /// Throws std::invalid_argument naming the first violated field.
  void validate() const;

  bool operator==(const ContextPoolConfig&) const = default;
};

void to_json(nlohmann::json& j, const ContextPoolConfig& c);
void from_json(const nlohmann::json& j, ContextPoolConfig& c);

/// A ContextPool contract failure: the per-anchor normaliser collapsed.
class DegenerateMaskError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// m(X): conv -> SiLU -> conv with 2 output channels (weight logit, size logit).
/// 1D kernels are [k x c_in x c_out]; 2D kernels are [k x k x c_in x c_out].
struct PredictorParams {
  Tensor kernel1, bias1, kernel2, bias2;

  /// Random kernels; the size-channel bias is set so that a token starts with
  /// sigma ~= cfg.init_sigma at sequence/map extent `reference_extent`.
  static PredictorParams init_1d(std::size_t d, const ContextPoolConfig& cfg, std::size_t reference_extent,
                                 std::mt19937_64& rng);
  static PredictorParams init_2d(std::size_t c, const ContextPoolConfig& cfg, std::size_t reference_extent,
                                 std::mt19937_64& rng);
  static PredictorParams zeros_1d(std::size_t d, const ContextPoolConfig& cfg);
  static PredictorParams zeros_2d(std::size_t c, const ContextPoolConfig& cfg);

  std::vector<std::pair<std::string, Tensor>> named() const;
  std::size_t parameter_count() const;
};

/// Projections for the nonlocal-similarity weighting baseline.
struct NLParams {
  Tensor w_theta, w_phi;  // [d x d]
  static NLParams init(std::size_t d, std::mt19937_64& rng);
};

/// Per-token pooling parameters for a sequence of n tokens.
struct PoolParams {
  Tensor w;      // [n] pooling weights (globally normalised in learned mode)
  Tensor s;      // [n] normalised sizes in [0, 1]
  Tensor sigma;  // [n] Gaussian widths, >= sigma_floor
  /// [n x n] row i holds the weights used for anchor i. Set for nonlocal
  /// weighting and for learned weighting in causal mode (prefix softmax, which
  /// pools identically to the global w but never reads positions > i).
  Tensor anchor_weights;
  /// [n] pre-softmax weight logits (learned and nonlocal modes).
  Tensor logits;
};

/// 2D analogue: per-position maps and the per-position sigma map.
struct PoolParams2d {
  Tensor w;      // [h x w], softmax over all positions
  Tensor s;      // [h x w] in [0, 1]
  Tensor sigma;  // [h x w], r * s * (w + h) / 2, floored
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

PoolParams predict_pool_params(const Tensor& x, const PredictorParams& predictor, const ContextPoolConfig& cfg);

/// g_j = exp(-(j - center)^2 / (2 sigma^2)), peak 1 at the centre.
std::vector<double> gaussian_mask(std::size_t center, double sigma, std::size_t n, bool causal,
                                  std::optional<double> truncation = std::nullopt);

/// Dense [n x n] mask matrix for the Gaussian prior, differentiable in sigma.
Tensor gaussian_masks(const Tensor& sigma, bool causal, std::optional<double> truncation = std::nullopt);

/// y_i = sum_j x_j w_j g^i_j / sum_j w_j g^i_j using the Gaussian prior.
Tensor context_pool_1d(const Tensor& x, const PoolParams& params, const ContextPoolConfig& cfg);

/// Row-normalised pooled sum: y_k = (A x)_k / sum_p A_kp. `a` is [K x P],
/// `x` is [P x d]. Throws DegenerateMaskError if any |row sum| < 1e-12.
Tensor pool_rows(const Tensor& a, const Tensor& x);

/// [n x n] per-anchor weights softmax_j(theta(x_i) . phi(x_j)); prefix-only
/// when causal.
Tensor nl_weights(const Tensor& x, const NLParams& params, bool causal = false);

/// Output grid size for a strided 2D pool.
std::size_t pooled_extent(std::size_t extent, std::size_t stride);

PoolParams2d predict_pool_params_2d(const Tensor& x, const PredictorParams& predictor, const ContextPoolConfig& cfg);

/// x [h x w x c] -> [ceil(h/stride) x ceil(w/stride) x c]. Output centre k sits
/// at (k*stride + (stride-1)/2) on each axis; its sigma is the mean of the
/// sigma map over the stride x stride block it covers.
Tensor context_pool_2d(const Tensor& x, const PoolParams2d& params, std::size_t stride,
                       const ContextPoolConfig& cfg);

/// Everything one sequence forward produces, for diagnostics.
struct PoolTrace {
  Tensor y;
  PoolParams params;
  Tensor masks;  // [n x n] locality prior actually used
};

/// Dispatches one weighting mode and one locality mode over the shared
/// pooled-sum kernel. `nl` is required for nonlocal weighting and
/// `sparse_pattern` (row-major, side `sparse_side`) for random_sparse.
PoolTrace apply_variant(const Tensor& x, const ContextPoolConfig& cfg, const PredictorParams& predictor,
                        const NLParams* nl = nullptr, const std::vector<std::uint8_t>* sparse_pattern = nullptr,
                        std::size_t sparse_side = 0);

/// One ContextPool layer over sequences of up to `max_len` tokens.
class ContextPool1d {
 public:
  ContextPool1d(std::size_t d, std::size_t max_len, ContextPoolConfig cfg, std::mt19937_64& rng);

  Tensor forward(const Tensor& x) const;
  PoolTrace trace(const Tensor& x) const;

  const ContextPoolConfig& config() const { return cfg_; }
  PredictorParams& predictor() { return predictor_; }
  const PredictorParams& predictor() const { return predictor_; }
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  /// Persisted alongside parameters since it is drawn once at construction.
  const std::vector<std::uint8_t>& sparse_pattern() const { return sparse_; }
  void set_sparse_pattern(std::vector<std::uint8_t> pattern);

 private:
  ContextPoolConfig cfg_;
  std::size_t max_len_;
  PredictorParams predictor_;
  std::optional<NLParams> nl_;
  std::vector<std::uint8_t> sparse_;
};

/// 2D pooling layer replacing conventional pooling in a ConvNet.
class ContextPool2d {
 public:
  ContextPool2d(std::size_t channels, std::size_t reference_extent, std::size_t stride, ContextPoolConfig cfg,
                std::mt19937_64& rng);

  Tensor forward(const Tensor& x) const;
  const ContextPoolConfig& config() const { return cfg_; }
  std::size_t stride() const { return stride_; }
  PredictorParams& predictor() { return predictor_; }
  const PredictorParams& predictor() const { return predictor_; }
  std::vector<std::pair<std::string, Tensor>> named_parameters() const { return predictor_.named(); }

 private:
  ContextPoolConfig cfg_;
  std::size_t stride_;
  PredictorParams predictor_;
};

/// Pooled map through a 2D predictor, then context_pool_2d.
Tensor cp_pool_layer(const Tensor& x, const PredictorParams& predictor, const ContextPoolConfig& cfg,
                     std::size_t stride);

}  // namespace cpool
