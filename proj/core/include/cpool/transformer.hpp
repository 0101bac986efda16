#pragma once

#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "cpool/contextpool.hpp"
#include "cpool/tensor.hpp"

namespace cpool {

struct TransformerConfig {
  std::size_t layers = 2;
  std::size_t d_model = 128;
  std::size_t heads = 4;
  std::size_t ffn_hidden = 512;
  std::size_t vocab_size = 256;
  std::size_t max_seq_len = 256;
  bool causal = true;
  /// Absent means the plain transformer baseline.
  std::optional<ContextPoolConfig> cp;
  /// Blocks that receive a ContextPool layer; empty means every block.
  std::vector<std::size_t> cp_layers;

  std::size_t d_head() const { return d_model / heads; }
  bool has_cp(std::size_t layer) const;
  /// Throws std::invalid_argument naming the first violated field.
  void validate() const;
  bool operator==(const TransformerConfig&) const = default;
};

void to_json(nlohmann::json& j, const TransformerConfig& c);
void from_json(const nlohmann::json& j, TransformerConfig& c);

/// Full d x d projections; head h owns columns [h*d_head, (h+1)*d_head) of
/// wq, wk, wv and the matching rows of wo.
struct AttentionParams {
  Tensor wq, wk, wv, wo;
  std::size_t heads = 1;
};

struct BlockParams {
  Tensor ln1_gamma, ln1_beta;
  AttentionParams attn;
  Tensor ln2_gamma, ln2_beta;
  Tensor w1, b1, w2, b2;
  std::optional<ContextPool1d> cp;
};

/// softmax_j(q . k_j / sqrt(d_head)) for one query q [d_head] against K
/// [n x d_head]. With `causal_position` p, keys after p get weight 0.
Tensor attention_scores(const Tensor& q, const Tensor& k, std::optional<std::size_t> causal_position = std::nullopt);

/// o = sum_i a_i v_i for a [n] and V [n x d_head].
Tensor attend(const Tensor& a, const Tensor& v);

/// Concatenated per-head attention of every token, projected by W^o.
Tensor multi_head_self_attention(const Tensor& x, const AttentionParams& params, bool causal);

/// x + MHSA(LN(x)).
Tensor attention_sublayer(const Tensor& x, const Tensor& gamma, const Tensor& beta, const AttentionParams& params,
                          bool causal);

/// Training-time inverted dropout on the embedding sum and on both residual
/// branches. Absent or p == 0 means evaluation mode.
struct DropoutSpec {
  double p = 0.0;
  std::mt19937_64* rng = nullptr;
};

/// Pre-norm attention and feed-forward sublayers, then ContextPool in place
/// when the block has one. `trace` receives the pool diagnostics.
Tensor block_forward(const Tensor& x, const BlockParams& block, bool causal, PoolTrace* trace = nullptr,
                     const DropoutSpec* dropout = nullptr);

/// Fixed sinusoidal position table [n x d].
Tensor sinusoidal_positions(std::size_t n, std::size_t d);

/// Mean bits per character of `targets` (already shifted: target t is the
/// token after input t). Targets of -1 are skipped.
Tensor lm_loss(const Tensor& logits, std::span<const int> targets);

class TransformerLM {
 public:
  TransformerLM(TransformerConfig cfg, std::mt19937_64& rng);

  /// Logits [n x vocab] for n <= max_seq_len input tokens.
  Tensor forward(std::span<const int> tokens) const;
  /// Same, also collecting one PoolTrace per ContextPool layer.
  Tensor forward(std::span<const int> tokens, std::vector<PoolTrace>& traces) const;
  /// Training forward with dropout drawn from `rng`.
  Tensor forward_train(std::span<const int> tokens, double dropout, std::mt19937_64& rng) const;

  const TransformerConfig& config() const { return cfg_; }
  std::vector<BlockParams>& blocks() { return blocks_; }
  const std::vector<BlockParams>& blocks() const { return blocks_; }

  /// Trainable tensors with stable dotted names.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  /// Trainable tensors plus fixed buffers (random_sparse patterns).
  std::vector<std::pair<std::string, Tensor>> state() const;
  /// Copies values from `state` by name; throws on missing or misshaped entries.
  void load_state(const std::vector<std::pair<std::string, Tensor>>& state);

  std::size_t parameter_count() const;
  std::size_t cp_parameter_count() const;
  std::size_t backbone_parameter_count() const { return parameter_count() - cp_parameter_count(); }

 private:
  Tensor run(std::span<const int> tokens, std::vector<PoolTrace>* traces, const DropoutSpec* dropout) const;

  TransformerConfig cfg_;
  Tensor embedding_, ln_f_gamma_, ln_f_beta_, head_w_, head_b_;
  std::vector<BlockParams> blocks_;
};

/// L * (k*d*h + h + k*h*2 + 2) for the learned/gaussian predictor.
std::size_t analytic_cp_parameter_count(const TransformerConfig& cfg);
/// Every trainable scalar of the model, including nonlocal projections.
std::size_t analytic_parameter_count(const TransformerConfig& cfg);

}  // namespace cpool
