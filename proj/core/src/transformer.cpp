#include "cpool/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "cpool/ops.hpp"

namespace cpool {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

bool TransformerConfig::has_cp(std::size_t layer) const {
  if (!cp) return false;
  return cp_layers.empty() || std::find(cp_layers.begin(), cp_layers.end(), layer) != cp_layers.end();
}

void TransformerConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("transformer: " + m); };
  if (layers == 0) fail("layers must be >= 1");
  if (d_model == 0 || heads == 0) fail("d_model and heads must be >= 1");
  if (d_model % heads != 0) fail("d_model must be divisible by heads");
  if (ffn_hidden == 0) fail("ffn_hidden must be >= 1");
  if (vocab_size == 0) fail("vocab_size must be >= 1");
  if (max_seq_len == 0) fail("max_seq_len must be >= 1");
  for (auto l : cp_layers)
    if (l >= layers) fail("cp_layers entry " + std::to_string(l) + " exceeds layer count");
  if (cp) cp->validate();
}

void to_json(nlohmann::json& j, const TransformerConfig& c) {
  j = {{"layers", c.layers},         {"d_model", c.d_model},       {"heads", c.heads},
       {"ffn_hidden", c.ffn_hidden}, {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
       {"causal", c.causal},         {"cp_layers", c.cp_layers}};
  j["cp"] = c.cp ? nlohmann::json(*c.cp) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, TransformerConfig& c) {
  c = TransformerConfig{};
  c.layers = j.value("layers", c.layers);
  c.d_model = j.value("d_model", c.d_model);
  c.heads = j.value("heads", c.heads);
  c.ffn_hidden = j.value("ffn_hidden", c.ffn_hidden);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  c.causal = j.value("causal", c.causal);
  c.cp_layers = j.value("cp_layers", c.cp_layers);
  if (j.contains("cp") && !j.at("cp").is_null()) c.cp = j.at("cp").get<ContextPoolConfig>();
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

Tensor attention_scores(const Tensor& q, const Tensor& k, std::optional<std::size_t> causal_position) {
  const auto n = k.dim(0), dh = k.dim(1);
  if (q.numel() != dh) throw ShapeError("attention_scores: query " + shape_str(q.shape()) + " vs keys " + shape_str(k.shape()));
  Tensor logits = reshape(matmul(k, reshape(q, {dh, 1})), {n}) * (1.0 / std::sqrt(double(dh)));
  if (causal_position && *causal_position + 1 < n) {
    std::vector<double> mask(n, 0.0);
    std::fill(mask.begin() + std::ptrdiff_t(*causal_position) + 1, mask.end(),
              -std::numeric_limits<double>::infinity());
    logits = logits + Tensor({n}, std::move(mask));
  }
  return softmax(logits, 0);
}

Tensor attend(const Tensor& a, const Tensor& v) {
  const auto n = v.dim(0);
  if (a.numel() != n) throw ShapeError("attend: weights " + shape_str(a.shape()) + " vs values " + shape_str(v.shape()));
  return reshape(matmul(reshape(a, {1, n}), v), {v.dim(1)});
}

Tensor multi_head_self_attention(const Tensor& x, const AttentionParams& params, bool causal) {
  const auto d = x.dim(1), dh = d / params.heads;
  const double scale = 1.0 / std::sqrt(double(dh));
  Tensor q = matmul(x, params.wq), k = matmul(x, params.wk), v = matmul(x, params.wv);
  std::vector<Tensor> heads;
  heads.reserve(params.heads);
  for (std::size_t h = 0; h < params.heads; ++h) {
    const auto b = h * dh, e = b + dh;
    Tensor logits = matmul(slice_cols(q, b, e), transpose(slice_cols(k, b, e))) * scale;
    Tensor a = causal ? causal_softmax(logits) : softmax(logits, 1);
    heads.push_back(matmul(a, slice_cols(v, b, e)));
  }
  Tensor o = params.heads == 1 ? heads.front() : concat_cols(heads);
  return matmul(o, params.wo);
}

Tensor attention_sublayer(const Tensor& x, const Tensor& gamma, const Tensor& beta, const AttentionParams& params,
                          bool causal) {
  return x + multi_head_self_attention(layer_norm(x, gamma, beta), params, causal);
}

namespace {

Tensor maybe_dropout(const Tensor& x, const DropoutSpec* d) {
  return d && d->p > 0.0 ? dropout(x, d->p, *d->rng) : x;
}

}  // namespace

Tensor block_forward(const Tensor& x, const BlockParams& block, bool causal, PoolTrace* trace,
                     const DropoutSpec* dropout) {
  Tensor h = x + maybe_dropout(multi_head_self_attention(layer_norm(x, block.ln1_gamma, block.ln1_beta), block.attn,
                                                         causal),
                               dropout);
  Tensor f = silu(matmul(layer_norm(h, block.ln2_gamma, block.ln2_beta), block.w1) + block.b1);
  Tensor out = h + maybe_dropout(matmul(f, block.w2) + block.b2, dropout);
  if (!block.cp) return out;
  auto t = block.cp->trace(out);
  if (trace) *trace = t;
  return t.y;
}

Tensor sinusoidal_positions(std::size_t n, std::size_t d) {
  thread_local std::map<std::pair<std::size_t, std::size_t>, Tensor> cache;
  if (auto it = cache.find({n, d}); it != cache.end()) return it->second;
  std::vector<double> pe(n * d);
  for (std::size_t pos = 0; pos < n; ++pos)
    for (std::size_t i = 0; i < d; ++i) {
      const double freq = std::pow(10000.0, -double(2 * (i / 2)) / double(d));
      pe[pos * d + i] = i % 2 == 0 ? std::sin(double(pos) * freq) : std::cos(double(pos) * freq);
    }
  return cache[{n, d}] = Tensor({n, d}, std::move(pe));
}

Tensor lm_loss(const Tensor& logits, std::span<const int> targets) {
  return cross_entropy(logits, targets) * (1.0 / std::log(2.0));
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

namespace {

Tensor param(Tensor t) { return t.set_requires_grad(); }

}  // namespace

TransformerLM::TransformerLM(TransformerConfig cfg, std::mt19937_64& rng) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const auto d = cfg_.d_model, f = cfg_.ffn_hidden;
  const double proj = 1.0 / std::sqrt(double(d));
  const double out_proj = proj / std::sqrt(2.0 * double(cfg_.layers));
  embedding_ = param(Tensor::randn({cfg_.vocab_size, d}, rng, 1.0));
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    BlockParams b;
    b.ln1_gamma = param(Tensor::ones({d}));
    b.ln1_beta = param(Tensor::zeros({d}));
    b.attn.heads = cfg_.heads;
    b.attn.wq = param(Tensor::randn({d, d}, rng, proj));
    b.attn.wk = param(Tensor::randn({d, d}, rng, proj));
    b.attn.wv = param(Tensor::randn({d, d}, rng, proj));
    b.attn.wo = param(Tensor::randn({d, d}, rng, out_proj));
    b.ln2_gamma = param(Tensor::ones({d}));
    b.ln2_beta = param(Tensor::zeros({d}));
    b.w1 = param(Tensor::randn({d, f}, rng, proj));
    b.b1 = param(Tensor::zeros({f}));
    b.w2 = param(Tensor::randn({f, d}, rng, out_proj * std::sqrt(double(d) / double(f))));
    b.b2 = param(Tensor::zeros({d}));
    if (cfg_.has_cp(l)) {
      auto cp = *cfg_.cp;
      cp.causal = cfg_.causal;
      b.cp.emplace(d, cfg_.max_seq_len, cp, rng);
    }
    blocks_.push_back(std::move(b));
  }
  ln_f_gamma_ = param(Tensor::ones({d}));
  ln_f_beta_ = param(Tensor::zeros({d}));
  head_w_ = param(Tensor::randn({d, cfg_.vocab_size}, rng, proj));
  head_b_ = param(Tensor::zeros({cfg_.vocab_size}));
}

Tensor TransformerLM::forward(std::span<const int> tokens) const { return run(tokens, nullptr, nullptr); }

Tensor TransformerLM::forward(std::span<const int> tokens, std::vector<PoolTrace>& traces) const {
  return run(tokens, &traces, nullptr);
}

Tensor TransformerLM::forward_train(std::span<const int> tokens, double dropout, std::mt19937_64& rng) const {
  const DropoutSpec spec{dropout, &rng};
  return run(tokens, nullptr, &spec);
}

Tensor TransformerLM::run(std::span<const int> tokens, std::vector<PoolTrace>* traces,
                          const DropoutSpec* dropout) const {
  const auto n = tokens.size();
  if (n == 0 || n > cfg_.max_seq_len) {
    throw ShapeError("sequence of " + std::to_string(n) + " tokens; model accepts 1.." +
                     std::to_string(cfg_.max_seq_len));
  }
  for (int t : tokens)
    if (t < 0 || std::size_t(t) >= cfg_.vocab_size)
      throw std::out_of_range("token " + std::to_string(t) + " outside vocabulary of " +
                              std::to_string(cfg_.vocab_size));
  if (traces) traces->clear();
  Tensor x = maybe_dropout(gather_rows(embedding_, tokens) + sinusoidal_positions(n, cfg_.d_model), dropout);
  for (const auto& b : blocks_) {
    PoolTrace t;
    x = block_forward(x, b, cfg_.causal, traces && b.cp ? &t : nullptr, dropout);
    if (traces && b.cp) traces->push_back(std::move(t));
  }
  return matmul(layer_norm(x, ln_f_gamma_, ln_f_beta_), head_w_) + head_b_;
}

std::vector<std::pair<std::string, Tensor>> TransformerLM::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out{{"embedding", embedding_}};
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const auto& b = blocks_[l];
    const auto p = "blocks." + std::to_string(l) + ".";
    out.insert(out.end(), {{p + "ln1.gamma", b.ln1_gamma},
                           {p + "ln1.beta", b.ln1_beta},
                           {p + "attn.wq", b.attn.wq},
                           {p + "attn.wk", b.attn.wk},
                           {p + "attn.wv", b.attn.wv},
                           {p + "attn.wo", b.attn.wo},
                           {p + "ln2.gamma", b.ln2_gamma},
                           {p + "ln2.beta", b.ln2_beta},
                           {p + "ffn.w1", b.w1},
                           {p + "ffn.b1", b.b1},
                           {p + "ffn.w2", b.w2},
                           {p + "ffn.b2", b.b2}});
    if (b.cp)
      for (auto& [name, t] : b.cp->named_parameters()) out.emplace_back(p + "cp." + name, t);
  }
  out.insert(out.end(),
             {{"ln_f.gamma", ln_f_gamma_}, {"ln_f.beta", ln_f_beta_}, {"head.w", head_w_}, {"head.b", head_b_}});
  return out;
}

std::vector<std::pair<std::string, Tensor>> TransformerLM::state() const {
  auto out = named_parameters();
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const auto& b = blocks_[l];
    if (!b.cp || b.cp->sparse_pattern().empty()) continue;
    const auto& pat = b.cp->sparse_pattern();
    out.emplace_back("blocks." + std::to_string(l) + ".cp.sparse_pattern",
                     Tensor({cfg_.max_seq_len, cfg_.max_seq_len}, std::vector<double>(pat.begin(), pat.end())));
  }
  return out;
}

void TransformerLM::load_state(const std::vector<std::pair<std::string, Tensor>>& state) {
  std::map<std::string, Tensor> by_name(state.begin(), state.end());
  auto take = [&](const std::string& name, const Shape& shape) -> const Tensor& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint is missing tensor '" + name + "'");
    if (it->second.shape() != shape) {
      throw ShapeError("checkpoint tensor '" + name + "' has shape " + shape_str(it->second.shape()) + ", expected " +
                       shape_str(shape));
    }
    return it->second;
  };
  for (auto& [name, t] : named_parameters()) {
    const auto& src = take(name, t.shape());
    Tensor dst = t;
    std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
  }
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    auto& b = blocks_[l];
    if (!b.cp || b.cp->sparse_pattern().empty()) continue;
    const auto& src = take("blocks." + std::to_string(l) + ".cp.sparse_pattern", {cfg_.max_seq_len, cfg_.max_seq_len});
    std::vector<std::uint8_t> pat(src.numel());
    for (std::size_t i = 0; i < pat.size(); ++i) pat[i] = src.data()[i] != 0.0 ? 1 : 0;
    b.cp->set_sparse_pattern(std::move(pat));
  }
}

std::size_t TransformerLM::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_parameters()) n += t.numel();
  return n;
}

std::size_t TransformerLM::cp_parameter_count() const {
  std::size_t n = 0;
  for (const auto& b : blocks_)
    if (b.cp)
      for (const auto& [name, t] : b.cp->named_parameters()) n += t.numel();
  return n;
}

std::size_t analytic_cp_parameter_count(const TransformerConfig& cfg) {
  if (!cfg.cp) return 0;
  const auto k = cfg.cp->kernel_size, d = cfg.d_model, h = cfg.cp->hidden_for(d);
  std::size_t layers = 0;
  for (std::size_t l = 0; l < cfg.layers; ++l) layers += cfg.has_cp(l) ? 1 : 0;
  return layers * (k * d * h + h + k * h * 2 + 2);
}

std::size_t analytic_parameter_count(const TransformerConfig& cfg) {
  const auto d = cfg.d_model, f = cfg.ffn_hidden, v = cfg.vocab_size;
  const auto block = 4 * d + 4 * d * d + d * f + f + f * d + d;
  std::size_t nl = 0;
  if (cfg.cp && cfg.cp->weighting == WeightingMode::nonlocal)
    for (std::size_t l = 0; l < cfg.layers; ++l) nl += cfg.has_cp(l) ? 2 * d * d : 0;
  return v * d + cfg.layers * block + 2 * d + d * v + v + analytic_cp_parameter_count(cfg) + nl;
}

}  // namespace cpool
