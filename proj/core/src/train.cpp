#include "cpool/train.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "cpool/autograd.hpp"
#include "cpool/checkpoint.hpp"

namespace cpool {

// ---------------------------------------------------------------------------
// Optimisation
// ---------------------------------------------------------------------------

Adam::Adam(NamedParams params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& [name, t] : params_) {
    m_.emplace_back(t.numel(), 0.0);
    v_.emplace_back(t.numel(), 0.0);
  }
}

void Adam::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, double(t_)), c2 = 1.0 - std::pow(cfg_.beta2, double(t_));
  for (std::size_t p = 0; p < params_.size(); ++p) {
    Tensor t = params_[p].second;
    const auto& g = t.impl()->grad;
    if (g.empty()) continue;
    auto x = t.mutable_data();
    auto& m = m_[p];
    auto& v = v_[p];
    const double decay = t.rank() >= 2 ? 1.0 - lr * cfg_.weight_decay : 1.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      x[i] = x[i] * decay - lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

double global_grad_norm(const NamedParams& params) {
  double sq = 0.0;
  for (const auto& [name, t] : params)
    for (double g : t.impl()->grad) sq += g * g;
  return std::sqrt(sq);
}

double clip_grad_norm(const NamedParams& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (const auto& [name, t] : params)
      for (double& g : t.impl()->grad) g *= scale;
  }
  return norm;
}

double lr_at(std::size_t step, double base_lr, std::size_t warmup_steps, std::size_t total_steps) {
  if (step < warmup_steps) return base_lr * double(step) / double(warmup_steps);
  if (step >= total_steps) return 0.0;
  const double progress = double(step - warmup_steps) / double(total_steps - warmup_steps);
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

namespace {

std::string_view to_string(ModelKind k) { return k == ModelKind::transformer ? "transformer" : "convnet"; }

ModelKind parse_model_kind(std::string_view s) {
  if (s == "transformer") return ModelKind::transformer;
  if (s == "convnet") return ModelKind::convnet;
  throw std::invalid_argument("unknown model '" + std::string(s) + "'");
}

std::string_view to_string(Precision p) { return p == Precision::f64 ? "f64" : "f32"; }

Precision parse_precision(std::string_view s) {
  if (s == "f64") return Precision::f64;
  if (s == "f32") return Precision::f32;
  throw std::invalid_argument("unknown precision '" + std::string(s) + "'");
}

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("train: " + m); };
  data.validate();
  if (!(base_lr > 0.0)) fail("base_lr must be > 0");
  if (warmup_steps > total_steps) fail("warmup_steps must be <= total_steps");
  if (batch_size == 0) fail("batch_size must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (!(clip_norm > 0.0)) fail("clip_norm must be > 0");
  if (eval_interval == 0) fail("eval_interval must be >= 1");
  if (model == ModelKind::transformer) {
    transformer.validate();
    if (data.task == TaskKind::shapes) fail("the shapes task needs the convnet model");
    if (seq_len == 0 || seq_len > transformer.max_seq_len) fail("seq_len must be in [1, max_seq_len]");
    if (data.vocab_size > transformer.vocab_size) fail("data vocab_size exceeds the model vocabulary");
    if (data.task == TaskKind::copy && data.copy_vocab > transformer.vocab_size)
      fail("copy_vocab exceeds the model vocabulary");
  } else {
    convnet.validate();
    if (data.task != TaskKind::shapes) fail("the convnet model needs the shapes task");
    if (convnet.image_size != data.image_size) fail("convnet image_size must match data image_size");
    if (convnet.in_channels != 1 || convnet.num_classes != 3) fail("shapes images have 1 channel and 3 classes");
  }
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"model", std::string(to_string(c.model))},
       {"transformer", c.transformer},
       {"convnet", c.convnet},
       {"data", c.data},
       {"base_lr", c.base_lr},
       {"warmup_steps", c.warmup_steps},
       {"total_steps", c.total_steps},
       {"batch_size", c.batch_size},
       {"seq_len", c.seq_len},
       {"seed", c.seed},
       {"dropout", c.dropout},
       {"weight_decay", c.weight_decay},
       {"clip_norm", c.clip_norm},
       {"eval_interval", c.eval_interval},
       {"eval_limit", c.eval_limit},
       {"precision", std::string(to_string(c.precision))},
       {"out_dir", c.out_dir}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  if (j.contains("model")) c.model = parse_model_kind(j.at("model").get<std::string>());
  if (j.contains("transformer")) c.transformer = j.at("transformer").get<TransformerConfig>();
  if (j.contains("convnet")) c.convnet = j.at("convnet").get<ConvNetConfig>();
  if (j.contains("data")) c.data = j.at("data").get<DatasetSpec>();
  c.base_lr = j.value("base_lr", c.base_lr);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.total_steps = j.value("total_steps", c.total_steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seq_len = j.value("seq_len", c.seq_len);
  c.seed = j.value("seed", c.seed);
  c.dropout = j.value("dropout", c.dropout);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.eval_interval = j.value("eval_interval", c.eval_interval);
  c.eval_limit = j.value("eval_limit", c.eval_limit);
  if (j.contains("precision")) c.precision = parse_precision(j.at("precision").get<std::string>());
  c.out_dir = j.value("out_dir", c.out_dir);
}

void to_json(nlohmann::json& j, const MetricEvent& e) {
  j = {{"step", e.step}, {"split", e.split}, {"loss", e.loss}};
  if (e.bpc) j["bpc"] = *e.bpc;
  if (e.acc) j["acc"] = *e.acc;
  j["lr"] = e.lr;
}

// ---------------------------------------------------------------------------
// Flop estimates
// ---------------------------------------------------------------------------

FlopEstimate flop_estimate(const TransformerConfig& cfg, std::size_t n) {
  const std::uint64_t d = cfg.d_model, f = cfg.ffn_hidden, v = cfg.vocab_size, h = cfg.heads, dh = cfg.d_head();
  FlopEstimate e;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    e.backbone += 3 * 2 * n * d * d;       // q, k, v projections
    e.backbone += h * 2 * n * n * dh;      // q k^T per head
    e.backbone += h * 2 * n * n * dh;      // a v per head
    e.backbone += 2 * n * d * d;           // output projection
    e.backbone += 2 * n * d * f + 2 * n * f * d;
    if (!cfg.has_cp(l)) continue;
    const std::uint64_t k = cfg.cp->kernel_size, hid = cfg.cp->hidden_for(d);
    e.cp += 2 * n * (k * d) * hid + 2 * n * (k * hid) * 2;  // predictor convs
    e.cp += 2 * n * n * d;                                  // pooled sum
    if (cfg.cp->weighting == WeightingMode::nonlocal) e.cp += 2 * (2 * n * d * d) + 2 * n * n * d;
  }
  e.backbone += 2 * n * d * v;  // head
  return e;
}

FlopEstimate flop_estimate(const ConvNetConfig& cfg) {
  FlopEstimate e;
  std::uint64_t cin = cfg.in_channels;
  for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
    const std::uint64_t ext = cfg.extent_at(s), positions = ext * ext;
    if (s > 0 && cfg.pooling == PoolingKind::contextpool) {
      const std::uint64_t prev = cfg.extent_at(s - 1), p = prev * prev, centres = positions;
      const std::uint64_t k = cfg.cp.kernel_size, hid = cfg.cp.hidden_for(cin);
      e.cp += 2 * p * (k * k * cin) * hid + 2 * p * (k * k * hid) * 2;  // predictor convs
      e.cp += 2 * centres * p;                                          // block-mean sigma
      e.cp += 2 * centres * p * cin;                                    // pooled sum
    }
    for (std::size_t i = 0; i < cfg.stages[s].convs; ++i) {
      e.backbone += 2 * positions * (9 * cin) * cfg.stages[s].channels;
      cin = cfg.stages[s].channels;
    }
  }
  e.backbone += 2 * cin * cfg.num_classes;
  return e;
}

// ---------------------------------------------------------------------------
// Runners
// ---------------------------------------------------------------------------

double RunRecord::dev_metric() const {
  if (dev.bpc) return *dev.bpc;
  return dev.acc.value_or(dev.loss);
}

void to_json(nlohmann::json& j, const RunRecord& r) {
  j = {{"config", r.config},
       {"checkpoint", r.checkpoint},
       {"wall_clock_s", r.wall_clock_s},
       {"parameter_count", r.parameter_count},
       {"cp_parameter_count", r.cp_parameter_count},
       {"flop_estimate", {{"backbone", r.flops.backbone}, {"cp", r.flops.cp}, {"total", r.flops.total()}}},
       {"max_clipped_grad_norm", r.max_clipped_grad_norm},
       {"mean_s", r.mean_s},
       {"events", r.events}};
  j["final_train_loss"] = r.final_train_loss ? nlohmann::json(*r.final_train_loss) : nlohmann::json(nullptr);
  nlohmann::json dev = {{"loss", r.dev.loss}, {"count", r.dev.count}};
  if (r.dev.bpc) dev["bpc"] = *r.dev.bpc;
  if (r.dev.acc) dev["acc"] = *r.dev.acc;
  j["dev"] = dev;
}

namespace {

std::size_t argmax_row(std::span<const double> row) {
  return std::size_t(std::max_element(row.begin(), row.end()) - row.begin());
}

// Scores one LM sequence: accumulates bits and (optionally) argmax hits.
void score_lm(const TransformerLM& lm, std::span<const int> input, std::span<const int> target, EvalResult& acc,
              double& bits, std::size_t& hits) {
  const auto logits = lm.forward(input);
  std::size_t scored = 0;
  const auto v = logits.dim(1);
  for (std::size_t t = 0; t < target.size(); ++t) {
    if (target[t] < 0) continue;
    ++scored;
    if (argmax_row(logits.data().subspan(t * v, v)) == std::size_t(target[t])) ++hits;
  }
  if (scored == 0) return;
  bits += lm_loss(logits, target).item() * double(scored);
  acc.count += scored;
}

EvalResult eval_lm(const TransformerLM& lm, const Dataset& data, std::size_t seq_len, std::size_t limit) {
  NoGradGuard ng;
  EvalResult r;
  double bits = 0.0;
  std::size_t hits = 0, windows = 0;
  if (data.spec.task == TaskKind::text) {
    const auto& dev = data.text.dev;
    for (std::size_t at = 0; at + 1 < dev.size() && (limit == 0 || windows < limit); at += seq_len, ++windows) {
      const auto len = std::min(seq_len, dev.size() - 1 - at);
      score_lm(lm, std::span(dev).subspan(at, len), std::span(dev).subspan(at + 1, len), r, bits, hits);
    }
  } else {
    for (const auto& s : data.copy_dev) {
      if (limit != 0 && windows++ >= limit) break;
      score_lm(lm, s.input, s.target, r, bits, hits);
    }
  }
  r.loss = bits / double(std::max<std::size_t>(r.count, 1));
  r.bpc = r.loss;
  if (data.spec.task == TaskKind::copy) r.acc = double(hits) / double(std::max<std::size_t>(r.count, 1));
  return r;
}

EvalResult eval_images(const ConvNet& net, const std::vector<ImageSample>& images, std::size_t limit) {
  NoGradGuard ng;
  EvalResult r;
  double nats = 0.0;
  std::size_t hits = 0;
  for (const auto& img : images) {
    if (limit != 0 && r.count >= limit) break;
    const auto logits = net.forward(img.image);
    const int target[] = {img.label};
    nats += cross_entropy(reshape(logits, {1, logits.numel()}), target).item();
    if (argmax_row(logits.data()) == std::size_t(img.label)) ++hits;
    ++r.count;
  }
  r.loss = nats / double(std::max<std::size_t>(r.count, 1));
  r.acc = double(hits) / double(std::max<std::size_t>(r.count, 1));
  return r;
}

class Runner {
 public:
  Runner(const TrainConfig& cfg, const Dataset& data, std::mt19937_64& init_rng) : cfg_(cfg), data_(data) {
    if (cfg.model == ModelKind::transformer) lm_.emplace(cfg.transformer, init_rng);
    else net_.emplace(cfg.convnet, init_rng);
  }

  NamedParams params() const { return lm_ ? lm_->named_parameters() : net_->named_parameters(); }
  NamedParams state() const { return lm_ ? lm_->state() : net_->named_parameters(); }
  std::size_t parameter_count() const { return lm_ ? lm_->parameter_count() : net_->parameter_count(); }
  std::size_t cp_parameter_count() const {
    if (lm_) return lm_->cp_parameter_count();
    std::size_t n = 0;
    for (const auto& p : net_->params().pools) n += p.parameter_count();
    return n;
  }
  FlopEstimate flops() const {
    return lm_ ? flop_estimate(cfg_.transformer, cfg_.seq_len) : flop_estimate(cfg_.convnet);
  }

  Tensor batch_loss(std::mt19937_64& data_rng, std::mt19937_64& drop_rng) const {
    Tensor total;
    for (std::size_t b = 0; b < cfg_.batch_size; ++b) {
      Tensor loss = sample_loss(data_rng, drop_rng);
      total = total.defined() ? total + loss : loss;
    }
    return total * (1.0 / double(cfg_.batch_size));
  }

  EvalResult eval(std::size_t limit) const {
    return lm_ ? eval_lm(*lm_, data_, cfg_.seq_len, limit) : eval_images(*net_, data_.images_dev, limit);
  }

  std::vector<double> mean_s() const {
    std::vector<double> out;
    if (!lm_) return out;
    std::vector<int> sample;
    if (data_.spec.task == TaskKind::text) {
      const auto len = std::min(cfg_.seq_len, data_.text.dev.size());
      sample.assign(data_.text.dev.begin(), data_.text.dev.begin() + std::ptrdiff_t(len));
    } else {
      sample = data_.copy_dev.front().input;
    }
    NoGradGuard ng;
    std::vector<PoolTrace> traces;
    lm_->forward(sample, traces);
    for (const auto& t : traces) {
      const auto s = t.params.s.data();
      out.push_back(std::accumulate(s.begin(), s.end(), 0.0) / double(s.size()));
    }
    return out;
  }

 private:
  Tensor sample_loss(std::mt19937_64& data_rng, std::mt19937_64& drop_rng) const {
    if (net_) {
      std::uniform_int_distribution<std::size_t> pick(0, data_.images_train.size() - 1);
      const auto& img = data_.images_train[pick(data_rng)];
      Tensor logits = net_->forward(img.image);
      const int target[] = {img.label};
      return cross_entropy(reshape(logits, {1, logits.numel()}), target);
    }
    if (data_.spec.task == TaskKind::text) {
      const auto& train = data_.text.train;
      std::uniform_int_distribution<std::size_t> pick(0, train.size() - cfg_.seq_len - 1);
      const auto at = pick(data_rng);
      const std::span<const int> all(train);
      return lm_loss(lm_->forward_train(all.subspan(at, cfg_.seq_len), cfg_.dropout, drop_rng),
                     all.subspan(at + 1, cfg_.seq_len));
    }
    const auto s = copy_sequence(cfg_.seq_len, data_.spec.copy_vocab, data_.spec.copy_delay, data_rng);
    return lm_loss(lm_->forward_train(s.input, cfg_.dropout, drop_rng), s.target);
  }

  const TrainConfig& cfg_;
  const Dataset& data_;
  std::optional<TransformerLM> lm_;
  std::optional<ConvNet> net_;
};

std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(stream)};
  return std::mt19937_64(seq);
}

}  // namespace

nlohmann::json checkpoint_config(const TrainConfig& cfg) { return {{"kind", "cpool-run"}, {"train", cfg}}; }

RunRecord train(const TrainConfig& cfg, const StepCallback& on_step) {
  tune_allocator();
  cfg.validate();
  PrecisionGuard precision(cfg.precision);
  const auto started = std::chrono::steady_clock::now();

  const Dataset data = make_dataset(cfg.data, cfg.seq_len);
  std::mt19937_64 init_rng(cfg.seed);
  auto data_rng = derived_rng(cfg.seed, 1), drop_rng = derived_rng(cfg.seed, 2);
  Runner runner(cfg, data, init_rng);
  const auto params = runner.params();
  Adam opt(params, {.weight_decay = cfg.weight_decay});

  RunRecord rec;
  rec.config = cfg;
  rec.parameter_count = runner.parameter_count();
  rec.cp_parameter_count = runner.cp_parameter_count();
  rec.flops = runner.flops();

  const std::filesystem::path out = cfg.out_dir;
  std::ofstream metrics;
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(out);
    metrics.open(out / "metrics.jsonl", std::ios::trunc);
    if (!metrics) throw std::runtime_error("cannot write " + (out / "metrics.jsonl").string());
    rec.checkpoint = (out / "model.ckpt").string();
  }
  auto emit = [&](MetricEvent e) {
    if (metrics.is_open()) metrics << nlohmann::json(e).dump() << '\n' << std::flush;
    rec.events.push_back(std::move(e));
  };
  auto emit_dev = [&](std::size_t step, const EvalResult& r) {
    emit({step, "dev", r.loss, r.bpc, r.acc, lr_at(step, cfg.base_lr, cfg.warmup_steps, cfg.total_steps)});
  };
  auto save = [&] {
    if (!cfg.out_dir.empty()) save_checkpoint(rec.checkpoint, checkpoint_config(cfg), runner.state());
  };

  rec.dev = runner.eval(cfg.total_steps == 0 ? 0 : cfg.eval_limit);
  emit_dev(0, rec.dev);

  const bool lm_task = cfg.model == ModelKind::transformer;
  for (std::size_t step = 1; step <= cfg.total_steps; ++step) {
    const double lr = lr_at(step, cfg.base_lr, cfg.warmup_steps, cfg.total_steps);
    opt.zero_grad();
    Tensor loss = runner.batch_loss(data_rng, drop_rng);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      throw TrainingDiverged("loss is " + std::to_string(value) + " at step " + std::to_string(step) +
                             " (lr " + std::to_string(lr) + ")");
    }
    backward(loss);
    clip_grad_norm(params, cfg.clip_norm);
    rec.max_clipped_grad_norm = std::max(rec.max_clipped_grad_norm, global_grad_norm(params));
    opt.step(lr);
    rec.final_train_loss = value;
    emit({step, "train", value, lm_task ? std::optional(value) : std::nullopt, std::nullopt, lr});
    if (on_step) on_step(step, value);
    if (step % cfg.eval_interval == 0 && step != cfg.total_steps) {
      emit_dev(step, runner.eval(cfg.eval_limit));
      save();
    }
  }
  if (cfg.total_steps > 0) {
    rec.dev = runner.eval(0);
    emit_dev(cfg.total_steps, rec.dev);
  }
  rec.mean_s = runner.mean_s();
  save();
  rec.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  if (!cfg.out_dir.empty()) {
    std::ofstream(out / "run.json", std::ios::trunc) << nlohmann::json(rec).dump(2) << '\n';
  }
  return rec;
}

LoadedModel load_model(const std::filesystem::path& checkpoint) {
  const auto ck = load_checkpoint(checkpoint);
  if (ck.config.value("kind", "") != "cpool-run" || !ck.config.contains("train"))
    throw CheckpointError(checkpoint.string() + " was not written by a training run");
  LoadedModel m;
  m.config = ck.config.at("train").get<TrainConfig>();
  m.config.validate();
  std::mt19937_64 rng(m.config.seed);
  if (m.config.model == ModelKind::transformer) {
    m.lm.emplace(m.config.transformer, rng);
    m.lm->load_state(ck.tensors);
  } else {
    m.convnet.emplace(m.config.convnet, rng);
    m.convnet->load_state(ck.tensors);
  }
  return m;
}

EvalResult evaluate(const LoadedModel& model, const Dataset& data, std::size_t limit) {
  PrecisionGuard precision(model.config.precision);
  if (model.lm) return eval_lm(*model.lm, data, model.config.seq_len, limit);
  return eval_images(*model.convnet, data.images_dev, limit);
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

std::vector<Variant> standard_variants(const ContextPoolConfig& base) {
  auto with = [&](auto&& edit) {
    auto c = base;
    edit(c);
    return c;
  };
  return {
      {"learned+gaussian", with([](auto& c) {
         c.weighting = WeightingMode::learned;
         c.locality = LocalityMode::gaussian;
       })},
      {"unnormalized", with([](auto& c) { c.weighting = WeightingMode::unnormalized; c.locality = LocalityMode::gaussian; })},
      {"uniform", with([](auto& c) { c.weighting = WeightingMode::uniform; c.locality = LocalityMode::gaussian; })},
      {"nonlocal", with([](auto& c) { c.weighting = WeightingMode::nonlocal; c.locality = LocalityMode::gaussian; })},
      {"no_locality", with([](auto& c) { c.weighting = WeightingMode::learned; c.locality = LocalityMode::none; })},
      {"fixed_window", with([](auto& c) { c.weighting = WeightingMode::learned; c.locality = LocalityMode::fixed_window; })},
      {"adaptive_window",
       with([](auto& c) { c.weighting = WeightingMode::learned; c.locality = LocalityMode::adaptive_window; })},
      {"random_sparse",
       with([](auto& c) { c.weighting = WeightingMode::learned; c.locality = LocalityMode::random_sparse; })},
  };
}

Variant baseline_variant() { return {"baseline", std::nullopt}; }

double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<bool> AblationTable::wins(const std::string& variant, double tol) const {
  const auto it = std::find_if(rows.begin(), rows.end(), [&](const auto& r) { return r.variant == variant; });
  if (it == rows.end()) throw std::invalid_argument("no row for variant '" + variant + "'");
  std::vector<bool> out;
  for (std::size_t s = 0; s < seeds.size(); ++s) {
    double best = it->metrics[s];
    for (const auto& r : rows) best = higher_is_better ? std::max(best, r.metrics[s]) : std::min(best, r.metrics[s]);
    out.push_back(std::abs(it->metrics[s] - best) <= tol);
  }
  return out;
}

std::string AblationTable::to_markdown() const {
  std::ostringstream os;
  os << "| variant | params | flops (cp) | " << metric << " median | min | max |";
  for (auto s : seeds) os << " seed " << s << " |";
  os << "\n|---|---:|---:|---:|---:|---:|";
  for (std::size_t i = 0; i < seeds.size(); ++i) os << "---:|";
  os << '\n' << std::fixed << std::setprecision(4);
  for (const auto& r : rows) {
    os << "| " << r.variant << " | " << r.params << " | " << r.flops.total() << " (" << r.flops.cp << ") | " << r.median
       << " | " << r.min << " | " << r.max << " |";
    for (double m : r.metrics) os << ' ' << m << " |";
    os << '\n';
  }
  return os.str();
}

void to_json(nlohmann::json& j, const AblationTable& t) {
  auto rows = nlohmann::json::array();
  for (const auto& r : t.rows)
    rows.push_back({{"variant", r.variant},
                    {"params", r.params},
                    {"flops", r.flops.total()},
                    {"cp_flops", r.flops.cp},
                    {"metrics", r.metrics},
                    {"median", r.median},
                    {"min", r.min},
                    {"max", r.max}});
  j = {{"metric", t.metric}, {"higher_is_better", t.higher_is_better}, {"seeds", t.seeds}, {"rows", rows}};
}

AblationTable ablation_sweep(const TrainConfig& base, const std::vector<Variant>& variants,
                             const std::vector<std::uint64_t>& seeds, std::size_t jobs) {
  if (variants.empty() || seeds.empty()) throw std::invalid_argument("ablation needs at least one variant and seed");
  std::vector<TrainConfig> runs;
  for (const auto& v : variants)
    for (auto seed : seeds) {
      auto c = base;
      c.seed = seed;
      if (c.model == ModelKind::transformer) {
        c.transformer.cp = v.cp;
      } else {
        c.convnet.pooling = v.cp ? PoolingKind::contextpool : PoolingKind::average;
        if (v.cp) c.convnet.cp = *v.cp;
      }
      if (!base.out_dir.empty())
        c.out_dir = (std::filesystem::path(base.out_dir) / v.name / ("seed_" + std::to_string(seed))).string();
      c.validate();
      runs.push_back(std::move(c));
    }

  std::vector<RunRecord> records(runs.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < runs.size(); i = next++) {
      try {
        records[i] = train(runs[i]);
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
        next = runs.size();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < std::min(jobs, runs.size()); ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  AblationTable table;
  table.seeds = seeds;
  table.higher_is_better = base.data.task == TaskKind::shapes;
  table.metric = table.higher_is_better ? "dev_acc" : "dev_bpc";
  for (std::size_t v = 0; v < variants.size(); ++v) {
    AblationRow row;
    row.variant = variants[v].name;
    for (std::size_t s = 0; s < seeds.size(); ++s) row.metrics.push_back(records[v * seeds.size() + s].dev_metric());
    row.params = records[v * seeds.size()].parameter_count;
    row.flops = records[v * seeds.size()].flops;
    row.median = median(row.metrics);
    row.min = *std::min_element(row.metrics.begin(), row.metrics.end());
    row.max = *std::max_element(row.metrics.begin(), row.metrics.end());
    table.rows.push_back(std::move(row));
  }
  return table;
}

void tune_allocator() {
#if defined(__GLIBC__)
  static std::once_flag once;
  std::call_once(once, [] {
    mallopt(M_MMAP_THRESHOLD, 32 << 20);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 64 << 20);
  });
#endif
}

}  // namespace cpool
