#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpool/transformer.hpp"

namespace cpool::cli {

inline constexpr std::size_t kHistogramBins = 20;

/// Pooling parameters of one ContextPool layer for one input window.
struct LayerPoolData {
  std::size_t layer = 0;  // transformer block index
  std::vector<double> w, s, sigma;
  std::optional<std::vector<double>> g;  // n x n locality masks, row-major
};

/// Bytes of `path` as tokens; throws DatasetError if the file is empty or a
/// byte falls outside the model vocabulary.
std::vector<int> read_token_file(const std::filesystem::path& path, std::size_t vocab_size);

/// Throws std::runtime_error if the model has no ContextPool layer.
std::vector<LayerPoolData> collect_pool_data(const TransformerLM& lm, std::span<const int> tokens, bool with_masks);

nlohmann::json mask_dump(const std::vector<LayerPoolData>& layers, const nlohmann::json& input,
                         const nlohmann::json& checkpoint, WeightingMode weighting);

/// Empty when every MaskDump invariant holds: per layer w, s and sigma have
/// the same length n, g (if present) is n x n, s lies in [0, 1], and in
/// learned mode w sums to 1 within 1e-6.
std::vector<std::string> mask_dump_violations(const nlohmann::json& dump);

struct PoolStats {
  std::size_t layer = 0;
  std::array<std::size_t, kHistogramBins> counts{};
  std::size_t tokens = 0;
  double mean_s = 0.0, std_s = 0.0;
};

/// Histogram of s over every token of `tokens`, run through the model in
/// consecutive windows of at most `window` tokens.
std::vector<PoolStats> pool_stats(const TransformerLM& lm, std::span<const int> tokens, std::size_t window);

/// `layer,bin_lo,bin_hi,count` rows for every layer, then a
/// `layer,mean_s,std_s` header and one summary row per layer.
std::string pool_stats_csv(const std::vector<PoolStats>& stats);

}  // namespace cpool::cli
