#include "cpool/contextpool.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "cpool/ops.hpp"

namespace cpool {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

std::string_view to_string(WeightingMode m) {
  switch (m) {
    case WeightingMode::learned: return "learned";
    case WeightingMode::unnormalized: return "unnormalized";
    case WeightingMode::uniform: return "uniform";
    case WeightingMode::nonlocal: return "nonlocal";
  }
  return "?";
}

std::string_view to_string(LocalityMode m) {
  switch (m) {
    case LocalityMode::gaussian: return "gaussian";
    case LocalityMode::none: return "none";
    case LocalityMode::fixed_window: return "fixed_window";
    case LocalityMode::adaptive_window: return "adaptive_window";
    case LocalityMode::random_sparse: return "random_sparse";
  }
  return "?";
}

WeightingMode parse_weighting_mode(std::string_view s) {
  for (auto m : {WeightingMode::learned, WeightingMode::unnormalized, WeightingMode::uniform, WeightingMode::nonlocal})
    if (to_string(m) == s) return m;
  throw std::invalid_argument("unknown weighting mode '" + std::string(s) + "'");
}

LocalityMode parse_locality_mode(std::string_view s) {
  for (auto m : {LocalityMode::gaussian, LocalityMode::none, LocalityMode::fixed_window, LocalityMode::adaptive_window,
                 LocalityMode::random_sparse})
    if (to_string(m) == s) return m;
  throw std::invalid_argument("unknown locality mode '" + std::string(s) + "'");
}

ContextPoolConfig ContextPoolConfig::for_images() {
  ContextPoolConfig c;
  c.r = 0.05;
  return c;
}

std::size_t ContextPoolConfig::hidden_for(std::size_t channels) const {
  return hidden_channels ? hidden_channels : std::max<std::size_t>(channels / 8, 8);
}

void ContextPoolConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("contextpool: " + m); };
  if (!(r > 0)) fail("r must be > 0");
  if (!(sigma_floor > 0)) fail("sigma_floor must be > 0");
  if (kernel_size == 0 || kernel_size % 2 == 0) fail("kernel_size must be odd");
  if (!(keep_fraction > 0 && keep_fraction <= 1)) fail("keep_fraction must be in (0, 1]");
  if (window == 0) fail("window must be >= 1");
  if (mask_truncation && !(*mask_truncation > 0)) fail("mask_truncation must be > 0");
  if (!(init_sigma > 0)) fail("init_sigma must be > 0");
}

void to_json(nlohmann::json& j, const ContextPoolConfig& c) {
  j = {{"r", c.r},
       {"kernel_size", c.kernel_size},
       {"hidden_channels", c.hidden_channels},
       {"weighting", std::string(to_string(c.weighting))},
       {"locality", std::string(to_string(c.locality))},
       {"window", c.window},
       {"keep_fraction", c.keep_fraction},
       {"causal", c.causal},
       {"sigma_floor", c.sigma_floor},
       {"init_sigma", c.init_sigma}};
  j["mask_truncation"] = c.mask_truncation ? nlohmann::json(*c.mask_truncation) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, ContextPoolConfig& c) {
  c = ContextPoolConfig{};
  c.r = j.value("r", c.r);
  c.kernel_size = j.value("kernel_size", c.kernel_size);
  c.hidden_channels = j.value("hidden_channels", c.hidden_channels);
  if (j.contains("weighting")) c.weighting = parse_weighting_mode(j.at("weighting").get<std::string>());
  if (j.contains("locality")) c.locality = parse_locality_mode(j.at("locality").get<std::string>());
  c.window = j.value("window", c.window);
  c.keep_fraction = j.value("keep_fraction", c.keep_fraction);
  c.causal = j.value("causal", c.causal);
  c.sigma_floor = j.value("sigma_floor", c.sigma_floor);
  c.init_sigma = j.value("init_sigma", c.init_sigma);
  if (j.contains("mask_truncation") && !j.at("mask_truncation").is_null())
    c.mask_truncation = j.at("mask_truncation").get<double>();
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

namespace {

double logit(double p) { return std::log(p / (1.0 - p)); }

double size_bias(const ContextPoolConfig& cfg, double extent_scale) {
  const double target = std::clamp(cfg.init_sigma / (cfg.r * extent_scale), 1e-4, 0.5);
  return logit(target);
}

PredictorParams make_predictor(Shape k1, Shape k2, std::size_t hidden, double fan1, double fan2,
                               const ContextPoolConfig& cfg, double extent_scale, std::mt19937_64* rng) {
  PredictorParams p;
  if (rng) {
    p.kernel1 = Tensor::randn(std::move(k1), *rng, 1.0 / std::sqrt(fan1));
    p.kernel2 = Tensor::randn(std::move(k2), *rng, 0.1 / std::sqrt(fan2));
    const double weight_bias = cfg.weighting == WeightingMode::unnormalized ? 1.0 : 0.0;
    p.bias2 = Tensor({2}, {weight_bias, size_bias(cfg, extent_scale)});
  } else {
    p.kernel1 = Tensor::zeros(std::move(k1));
    p.kernel2 = Tensor::zeros(std::move(k2));
    p.bias2 = Tensor::zeros({2});
  }
  p.bias1 = Tensor::zeros({hidden});
  for (auto* t : {&p.kernel1, &p.bias1, &p.kernel2, &p.bias2}) t->set_requires_grad();
  return p;
}

}  // namespace

PredictorParams PredictorParams::init_1d(std::size_t d, const ContextPoolConfig& cfg, std::size_t reference_extent,
                                         std::mt19937_64& rng) {
  const auto k = cfg.kernel_size, h = cfg.hidden_for(d);
  return make_predictor({k, d, h}, {k, h, 2}, h, double(k * d), double(k * h), cfg, double(reference_extent), &rng);
}

PredictorParams PredictorParams::init_2d(std::size_t c, const ContextPoolConfig& cfg, std::size_t reference_extent,
                                         std::mt19937_64& rng) {
  const auto k = cfg.kernel_size, h = cfg.hidden_for(c);
  return make_predictor({k, k, c, h}, {k, k, h, 2}, h, double(k * k * c), double(k * k * h), cfg,
                        double(reference_extent), &rng);
}

PredictorParams PredictorParams::zeros_1d(std::size_t d, const ContextPoolConfig& cfg) {
  const auto k = cfg.kernel_size, h = cfg.hidden_for(d);
  return make_predictor({k, d, h}, {k, h, 2}, h, 1, 1, cfg, 1, nullptr);
}

PredictorParams PredictorParams::zeros_2d(std::size_t c, const ContextPoolConfig& cfg) {
  const auto k = cfg.kernel_size, h = cfg.hidden_for(c);
  return make_predictor({k, k, c, h}, {k, k, h, 2}, h, 1, 1, cfg, 1, nullptr);
}

std::vector<std::pair<std::string, Tensor>> PredictorParams::named() const {
  return {{"kernel1", kernel1}, {"bias1", bias1}, {"kernel2", kernel2}, {"bias2", bias2}};
}

std::size_t PredictorParams::parameter_count() const {
  return kernel1.numel() + bias1.numel() + kernel2.numel() + bias2.numel();
}

NLParams NLParams::init(std::size_t d, std::mt19937_64& rng) {
  NLParams p;
  p.w_theta = Tensor::randn({d, d}, rng, 1.0 / std::sqrt(double(d))).set_requires_grad();
  p.w_phi = Tensor::randn({d, d}, rng, 1.0 / std::sqrt(double(d))).set_requires_grad();
  return p;
}

// ---------------------------------------------------------------------------
// Masks
// ---------------------------------------------------------------------------

namespace {

enum class MaskKind { gaussian, hard_window };

// exp() with arguments below the normal range mapped to exactly 0. Gaussian
// tails otherwise leave subnormals in the masks, and every later multiply on
// a subnormal runs ~100x slower.
constexpr double kMinExpArg = -708.0;

void exp_in_place(Eigen::ArrayXd& row) { row = (row < kMinExpArg).select(0.0, row.exp()); }

// [K x P] locality kernel from per-row widths `sigma` [K] and squared
// distances `sq` [K x P]. Entries where `allowed` is 0 are exactly zero and
// carry no gradient. hard_window rows are binary in the forward pass and use
// the Gaussian derivative in the backward pass.
Tensor locality_kernel(const Tensor& sigma, std::shared_ptr<const std::vector<double>> sq, std::size_t cols,
                       std::shared_ptr<const std::vector<std::uint8_t>> allowed, std::optional<double> truncation,
                       MaskKind kind) {
  const auto rows = sigma.numel();
  const auto sv = sigma.data();
  const auto ncols = static_cast<Eigen::Index>(cols);
  std::vector<double> out(rows * cols, 0.0);
  auto gauss = std::make_shared<std::vector<double>>(rows * cols, 0.0);
  // Aligned scratch row: Eigen peels unaligned heads to scalar code, which
  // would make the low bits depend on where the allocator put the buffer.
  Eigen::ArrayXd row(ncols);
  for (std::size_t k = 0; k < rows; ++k) {
    const double s = sv[k];
    const double inv = 1.0 / (2.0 * s * s);
    const double reach = kind == MaskKind::hard_window ? std::round(s) : 0.0;
    const double cut = truncation ? (*truncation * s) * (*truncation * s) : 0.0;
    const auto base = k * cols;
    row = Eigen::Map<const Eigen::ArrayXd>(sq->data() + base, ncols) * -inv;
    exp_in_place(row);
    std::copy(row.data(), row.data() + ncols, gauss->data() + base);
    for (std::size_t p = 0; p < cols; ++p) {
      const auto idx = base + p;
      if (allowed && !(*allowed)[idx]) {
        (*gauss)[idx] = 0.0;
        continue;
      }
      const double d2 = (*sq)[idx];
      if (kind == MaskKind::hard_window) {
        out[idx] = d2 <= reach * reach ? 1.0 : 0.0;
      } else if (!truncation || d2 <= cut) {
        out[idx] = (*gauss)[idx];
      } else {
        (*gauss)[idx] = 0.0;
      }
    }
  }
  return make_op_result({rows, cols}, std::move(out), {sigma}, "locality_kernel",
                        [sigma, sq, gauss, rows, cols](std::span<const double> g) {
                          const auto sv = sigma.data();
                          auto& gs = sigma.impl()->grad_buffer();
                          for (std::size_t k = 0; k < rows; ++k) {
                            const double s3 = sv[k] * sv[k] * sv[k];
                            double acc = 0.0;
                            for (std::size_t p = 0; p < cols; ++p) {
                              const auto idx = k * cols + p;
                              acc += g[idx] * (*gauss)[idx] * (*sq)[idx];
                            }
                            gs[k] += acc / s3;
                          }
                        });
}

// Geometry depends only on n; cached per thread since every forward reuses it.
std::shared_ptr<const std::vector<double>> offsets_sq_1d(std::size_t n) {
  thread_local std::map<std::size_t, std::shared_ptr<const std::vector<double>>> cache;
  auto& slot = cache[n];
  if (!slot) {
    auto d = std::make_shared<std::vector<double>>(n * n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double o = double(j) - double(i);
        (*d)[i * n + j] = o * o;
      }
    slot = std::move(d);
  }
  return slot;
}

std::shared_ptr<const std::vector<std::uint8_t>> causal_pattern(std::size_t n) {
  thread_local std::map<std::size_t, std::shared_ptr<const std::vector<std::uint8_t>>> cache;
  auto& slot = cache[n];
  if (!slot) {
    auto m = std::make_shared<std::vector<std::uint8_t>>(n * n, 0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j <= i; ++j) (*m)[i * n + j] = 1;
    slot = std::move(m);
  }
  return slot;
}

Tensor constant_mask(std::size_t n, bool causal, auto&& keep) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if ((!causal || j <= i) && keep(i, j)) v[i * n + j] = 1.0;
  return Tensor({n, n}, std::move(v));
}

}  // namespace

std::vector<double> gaussian_mask(std::size_t center, double sigma, std::size_t n, bool causal,
                                  std::optional<double> truncation) {
  std::vector<double> g(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    if (causal && j > center) continue;
    const double o = double(j) - double(center);
    if (truncation && std::abs(o) > *truncation * sigma) continue;
    g[j] = std::exp(-o * o / (2.0 * sigma * sigma));
  }
  return g;
}

Tensor gaussian_masks(const Tensor& sigma, bool causal, std::optional<double> truncation) {
  const auto n = sigma.numel();
  return locality_kernel(sigma, offsets_sq_1d(n), n, causal ? causal_pattern(n) : nullptr, truncation,
                         MaskKind::gaussian);
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

Tensor pool_rows(const Tensor& a, const Tensor& x) {
  if (a.rank() != 2 || x.rank() != 2 || a.dim(1) != x.dim(0)) {
    throw ShapeError("pool_rows: weights " + shape_str(a.shape()) + " against features " + shape_str(x.shape()));
  }
  // Each row is rescaled by its largest magnitude, which y_i does not depend
  // on. Peaked softmax weights can leave every entry of a row far below 1e-12.
  const auto rows = a.dim(0), cols = a.dim(1);
  const auto av = a.data();
  std::vector<double> inv(rows);
  for (std::size_t k = 0; k < rows; ++k) {
    double m = 0.0;
    for (std::size_t j = 0; j < cols; ++j) m = std::max(m, std::abs(av[k * cols + j]));
    if (!(m >= std::numeric_limits<double>::min() && std::isfinite(m))) {
      throw DegenerateMaskError("pooling weights of anchor " + std::to_string(k) + " vanish (max |a| = " +
                                std::to_string(m) + ")");
    }
    inv[k] = 1.0 / m;
  }
  Tensor scaled = a * Tensor({rows, 1}, std::move(inv));
  Tensor c = sum_axis(scaled, 1, true);
  const auto cv = c.data();
  for (std::size_t k = 0; k < cv.size(); ++k) {
    if (!(std::abs(cv[k]) >= 1e-12)) {
      throw DegenerateMaskError("pooling normaliser of anchor " + std::to_string(k) + " is " + std::to_string(cv[k]) +
                                " relative to its largest weight");
    }
  }
  return div(matmul(scaled, x), c);
}

PoolParams predict_pool_params(const Tensor& x, const PredictorParams& predictor, const ContextPoolConfig& cfg) {
  if (x.rank() != 2) throw ShapeError("predict_pool_params expects X [n x d], got " + shape_str(x.shape()));
  if (predictor.kernel1.rank() != 3 || predictor.kernel1.dim(1) != x.dim(1) || predictor.kernel2.dim(2) != 2) {
    throw ShapeError("predictor " + shape_str(predictor.kernel1.shape()) + " / " +
                     shape_str(predictor.kernel2.shape()) + " does not fit X " + shape_str(x.shape()));
  }
  const auto n = x.dim(0);
  const auto pad = cfg.causal ? Padding::causal : Padding::same;
  Tensor hidden = silu(conv1d(x, predictor.kernel1, predictor.bias1, pad));
  Tensor out = conv1d(hidden, predictor.kernel2, predictor.bias2, pad);
  Tensor w_logits = reshape(slice_cols(out, 0, 1), {n});

  PoolParams p;
  p.s = logistic(reshape(slice_cols(out, 1, 2), {n}));
  p.sigma = clamp_min(p.s * (cfg.r * double(n)), cfg.sigma_floor);
  switch (cfg.weighting) {
    case WeightingMode::learned:
    case WeightingMode::nonlocal:  // replaced by apply_variant
      p.logits = w_logits;
      p.w = softmax(w_logits, 0);
      if (cfg.causal && cfg.weighting == WeightingMode::learned) {
        p.anchor_weights = causal_softmax(add(Tensor::zeros({n, n}), reshape(w_logits, {1, n})));
      }
      break;
    case WeightingMode::unnormalized:
      p.w = w_logits;
      break;
    case WeightingMode::uniform:
      p.w = Tensor::full({n}, 1.0 / double(n));
      break;
  }
  return p;
}

Tensor context_pool_1d(const Tensor& x, const PoolParams& params, const ContextPoolConfig& cfg) {
  const auto n = x.dim(0);
  if (params.sigma.numel() != n || params.w.numel() != n) {
    throw ShapeError("pool params of length " + std::to_string(params.w.numel()) + " for X " + shape_str(x.shape()));
  }
  if (n == 1) return x;
  Tensor masks = gaussian_masks(params.sigma, cfg.causal, cfg.mask_truncation);
  Tensor a = params.anchor_weights.defined() ? masks * params.anchor_weights : masks * reshape(params.w, {1, n});
  return pool_rows(a, x);
}

namespace {

Tensor nl_logits(const Tensor& x, const NLParams& params) {
  return matmul(matmul(x, params.w_theta), transpose(matmul(x, params.w_phi)));
}

using Support = std::shared_ptr<const std::vector<std::uint8_t>>;

Support support_of(std::size_t n, bool causal, auto&& keep) {
  auto m = std::make_shared<std::vector<std::uint8_t>>(n * n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < (causal ? i + 1 : n); ++j) (*m)[i * n + j] = keep(i, j) ? 1 : 0;
  return m;
}

// exp(z_ij - m_i) on the support and 0 elsewhere, m_i = max of row i over the
// support. m_i is held constant, so the result is only meaningful ahead of a
// row normalisation, which cancels it.
Tensor shifted_exp_rows(const Tensor& z, const Support& support) {
  const auto rows = z.dim(0), cols = z.dim(1);
  const auto zv = z.data();
  auto values = std::make_shared<std::vector<double>>(rows * cols, 0.0);
  Eigen::ArrayXd row(static_cast<Eigen::Index>(cols));
  for (std::size_t k = 0; k < rows; ++k) {
    const auto* keep = support->data() + k * cols;
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t p = 0; p < cols; ++p)
      if (keep[p]) m = std::max(m, zv[k * cols + p]);
    if (!std::isfinite(m)) continue;
    for (std::size_t p = 0; p < cols; ++p)
      row[Eigen::Index(p)] = keep[p] ? zv[k * cols + p] - m : std::numeric_limits<double>::lowest();
    exp_in_place(row);
    std::copy(row.data(), row.data() + cols, values->data() + k * cols);
  }
  std::vector<double> out(*values);
  return make_op_result({rows, cols}, std::move(out), {z}, "shifted_exp_rows",
                        [z, values](std::span<const double> g) {
                          auto& gz = z.impl()->grad_buffer();
                          for (std::size_t i = 0; i < g.size(); ++i) gz[i] += g[i] * (*values)[i];
                        });
}

}  // namespace

Tensor nl_weights(const Tensor& x, const NLParams& params, bool causal) {
  Tensor logits = nl_logits(x, params);
  return causal ? causal_softmax(logits) : softmax(logits, 1);
}

PoolTrace apply_variant(const Tensor& x, const ContextPoolConfig& cfg, const PredictorParams& predictor,
                        const NLParams* nl, const std::vector<std::uint8_t>* sparse_pattern, std::size_t sparse_side) {
  const auto n = x.dim(0);
  PoolTrace trace;
  trace.params = predict_pool_params(x, predictor, cfg);
  Tensor logits;  // [n x n] or [1 x n]; set for softmax-derived weights
  if (cfg.weighting == WeightingMode::nonlocal) {
    if (!nl) throw std::invalid_argument("nonlocal weighting requires NL parameters");
    logits = nl_logits(x, *nl);
    trace.params.anchor_weights = cfg.causal ? causal_softmax(logits) : softmax(logits, 1);
    trace.params.w = mul_scalar(sum_axis(trace.params.anchor_weights, 0, false), 1.0 / double(n));
  }
  if (n == 1) {
    trace.y = x;
    trace.masks = Tensor::ones({1, 1});
    return trace;
  }

  if (cfg.weighting == WeightingMode::learned) logits = reshape(trace.params.logits, {1, n});
  const bool softmax_weights = logits.defined();
  Support support;

  switch (cfg.locality) {
    case LocalityMode::gaussian:
      trace.masks = gaussian_masks(trace.params.sigma, cfg.causal, cfg.mask_truncation);
      if (softmax_weights) {
        const auto sq = offsets_sq_1d(n);
        const auto sv = trace.params.sigma.data();
        const auto t = cfg.mask_truncation;
        support = support_of(n, cfg.causal, [&](std::size_t i, std::size_t j) {
          return !t || (*sq)[i * n + j] <= (*t * sv[i]) * (*t * sv[i]);
        });
        // log g_ij = -(j - i)^2 / (2 sigma_i^2), added to the logits so no
        // product of two small factors can underflow.
        Tensor sigma = reshape(trace.params.sigma, {n, 1});
        logits = logits + Tensor({n, n}, *sq) * div(Tensor::full({n, 1}, -0.5), sigma * sigma);
      }
      break;
    case LocalityMode::adaptive_window:
      trace.masks = locality_kernel(trace.params.sigma, offsets_sq_1d(n), n, cfg.causal ? causal_pattern(n) : nullptr,
                                    std::nullopt, MaskKind::hard_window);
      break;
    case LocalityMode::none:
      trace.masks = constant_mask(n, cfg.causal, [](std::size_t, std::size_t) { return true; });
      break;
    case LocalityMode::fixed_window: {
      const auto width = cfg.window;
      trace.masks = constant_mask(n, cfg.causal, [width](std::size_t i, std::size_t j) {
        return (i > j ? i - j : j - i) < width;
      });
      break;
    }
    case LocalityMode::random_sparse:
      if (!sparse_pattern || sparse_side < n) {
        throw std::invalid_argument("random_sparse locality needs a pattern covering " + std::to_string(n) + " tokens");
      }
      trace.masks = constant_mask(n, cfg.causal, [&](std::size_t i, std::size_t j) {
        return (*sparse_pattern)[i * sparse_side + j] != 0;
      });
      break;
  }
  const auto& p = trace.params;
  Tensor a;
  if (!softmax_weights) {
    a = trace.masks * reshape(p.w, {1, n});
  } else {
    if (logits.dim(0) == 1) logits = logits + Tensor::zeros({n, n});
    if (cfg.locality == LocalityMode::adaptive_window) {
      // The mask stays a factor: its straight-through gradient needs the
      // weights outside the window.
      support = support_of(n, cfg.causal, [](std::size_t, std::size_t) { return true; });
      a = trace.masks * shifted_exp_rows(logits, support);
    } else {
      if (!support) {
        const auto mv = trace.masks.data();
        support = support_of(n, cfg.causal, [&](std::size_t i, std::size_t j) { return mv[i * n + j] != 0.0; });
      }
      a = shifted_exp_rows(logits, support);
    }
  }
  trace.y = pool_rows(a, x);
  return trace;
}

// ---------------------------------------------------------------------------
// 2D
// ---------------------------------------------------------------------------

std::size_t pooled_extent(std::size_t extent, std::size_t stride) { return (extent + stride - 1) / stride; }

PoolParams2d predict_pool_params_2d(const Tensor& x, const PredictorParams& predictor, const ContextPoolConfig& cfg) {
  if (x.rank() != 3) throw ShapeError("predict_pool_params_2d expects X [h x w x c], got " + shape_str(x.shape()));
  const auto h = x.dim(0), w = x.dim(1), positions = h * w;
  Tensor hidden = silu(conv2d(x, predictor.kernel1, predictor.bias1));
  Tensor out = reshape(conv2d(hidden, predictor.kernel2, predictor.bias2), {positions, 2});
  Tensor w_logits = slice_cols(out, 0, 1);

  PoolParams2d p;
  switch (cfg.weighting) {
    case WeightingMode::learned: p.w = reshape(softmax(w_logits, 0), {h, w}); break;
    case WeightingMode::unnormalized: p.w = reshape(w_logits, {h, w}); break;
    case WeightingMode::uniform: p.w = Tensor::full({h, w}, 1.0 / double(positions)); break;
    case WeightingMode::nonlocal:
      throw std::invalid_argument("nonlocal weighting is only defined for sequences");
  }
  p.s = reshape(logistic(slice_cols(out, 1, 2)), {h, w});
  p.sigma = clamp_min(p.s * (cfg.r * double(w + h) / 2.0), cfg.sigma_floor);
  return p;
}

Tensor context_pool_2d(const Tensor& x, const PoolParams2d& params, std::size_t stride, const ContextPoolConfig& cfg) {
  if (x.rank() != 3) throw ShapeError("context_pool_2d expects X [h x w x c], got " + shape_str(x.shape()));
  if (stride == 0) throw std::invalid_argument("context_pool_2d stride must be >= 1");
  const auto h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if (params.w.numel() != h * w || params.sigma.numel() != h * w) {
    throw ShapeError("2D pool params " + shape_str(params.w.shape()) + " for X " + shape_str(x.shape()));
  }
  const auto oh = pooled_extent(h, stride), ow = pooled_extent(w, stride);
  const auto centers = oh * ow, positions = h * w;
  const double offset = double(stride - 1) / 2.0;

  // Squared distances are stored relative to each centre's nearest pixel.
  // The shift rescales a mask row by a constant, which C cancels, and keeps
  // half-pixel centres at the sigma floor away from the degenerate guard.
  std::vector<double> block(centers * positions, 0.0);
  auto sq = std::make_shared<std::vector<double>>(centers * positions);
  for (std::size_t ki = 0; ki < oh; ++ki)
    for (std::size_t kj = 0; kj < ow; ++kj) {
      const auto k = ki * ow + kj;
      const double ci = double(ki * stride) + offset, cj = double(kj * stride) + offset;
      const auto i_end = std::min(h, (ki + 1) * stride), j_end = std::min(w, (kj + 1) * stride);
      const double inv = 1.0 / double((i_end - ki * stride) * (j_end - kj * stride));
      for (std::size_t i = ki * stride; i < i_end; ++i)
        for (std::size_t j = kj * stride; j < j_end; ++j) block[k * positions + i * w + j] = inv;
      double nearest = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
          const double di = double(i) - ci, dj = double(j) - cj;
          (*sq)[k * positions + i * w + j] = di * di + dj * dj;
          nearest = std::min(nearest, di * di + dj * dj);
        }
      for (std::size_t p = 0; p < positions; ++p) (*sq)[k * positions + p] -= nearest;
    }
  Tensor center_sigma =
      reshape(matmul(Tensor({centers, positions}, std::move(block)), reshape(params.sigma, {positions, 1})), {centers});
  Tensor masks = locality_kernel(center_sigma, sq, positions, nullptr, cfg.mask_truncation, MaskKind::gaussian);
  Tensor a = masks * reshape(params.w, {1, positions});
  return reshape(pool_rows(a, reshape(x, {positions, c})), {oh, ow, c});
}

Tensor cp_pool_layer(const Tensor& x, const PredictorParams& predictor, const ContextPoolConfig& cfg,
                     std::size_t stride) {
  return context_pool_2d(x, predict_pool_params_2d(x, predictor, cfg), stride, cfg);
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

ContextPool1d::ContextPool1d(std::size_t d, std::size_t max_len, ContextPoolConfig cfg, std::mt19937_64& rng)
    : cfg_(std::move(cfg)), max_len_(max_len) {
  cfg_.validate();
  predictor_ = PredictorParams::init_1d(d, cfg_, max_len, rng);
  if (cfg_.weighting == WeightingMode::nonlocal) nl_ = NLParams::init(d, rng);
  if (cfg_.locality == LocalityMode::random_sparse) {
    std::bernoulli_distribution keep(cfg_.keep_fraction);
    sparse_.assign(max_len * max_len, 0);
    for (std::size_t i = 0; i < max_len; ++i)
      for (std::size_t j = 0; j < max_len; ++j) sparse_[i * max_len + j] = (i == j || keep(rng)) ? 1 : 0;
  }
}

void ContextPool1d::set_sparse_pattern(std::vector<std::uint8_t> pattern) {
  if (pattern.size() != max_len_ * max_len_) throw ShapeError("sparse pattern size mismatch");
  sparse_ = std::move(pattern);
}

Tensor ContextPool1d::forward(const Tensor& x) const { return trace(x).y; }

PoolTrace ContextPool1d::trace(const Tensor& x) const {
  if (x.dim(0) > max_len_) {
    throw ShapeError("sequence of " + std::to_string(x.dim(0)) + " tokens exceeds max length " +
                     std::to_string(max_len_));
  }
  return apply_variant(x, cfg_, predictor_, nl_ ? &*nl_ : nullptr, sparse_.empty() ? nullptr : &sparse_, max_len_);
}

std::vector<std::pair<std::string, Tensor>> ContextPool1d::named_parameters() const {
  auto out = predictor_.named();
  if (nl_) {
    out.emplace_back("w_theta", nl_->w_theta);
    out.emplace_back("w_phi", nl_->w_phi);
  }
  return out;
}

ContextPool2d::ContextPool2d(std::size_t channels, std::size_t reference_extent, std::size_t stride,
                             ContextPoolConfig cfg, std::mt19937_64& rng)
    : cfg_(std::move(cfg)), stride_(stride) {
  cfg_.validate();
  if (stride == 0) throw std::invalid_argument("stride must be >= 1");
  predictor_ = PredictorParams::init_2d(channels, cfg_, reference_extent, rng);
}

Tensor ContextPool2d::forward(const Tensor& x) const { return cp_pool_layer(x, predictor_, cfg_, stride_); }

}  // namespace cpool
