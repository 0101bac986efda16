#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpool/convnet.hpp"
#include "cpool/data.hpp"
#include "cpool/ops.hpp"
#include "cpool/transformer.hpp"

namespace cpool {

// ---------------------------------------------------------------------------
// Optimisation
// ---------------------------------------------------------------------------

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  /// Decoupled decay, applied to tensors of rank >= 2 only.
  double weight_decay = 0.01;
};

class Adam {
 public:
  Adam(NamedParams params, AdamConfig cfg);

  /// One update from the gradients currently held by the parameters.
  void step(double lr);
  void zero_grad();
  std::size_t steps() const { return t_; }

 private:
  NamedParams params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

double global_grad_norm(const NamedParams& params);
/// Rescales all gradients so the global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_grad_norm(const NamedParams& params, double max_norm);

/// Linear warmup from 0 to base_lr, then cosine decay to 0 at total_steps.
double lr_at(std::size_t step, double base_lr, std::size_t warmup_steps, std::size_t total_steps);

// ---------------------------------------------------------------------------
// Runs
// ---------------------------------------------------------------------------

enum class ModelKind { transformer, convnet };

struct TrainConfig {
  ModelKind model = ModelKind::transformer;
  TransformerConfig transformer;
  ConvNetConfig convnet;
  DatasetSpec data;

  double base_lr = 1e-3;
  std::size_t warmup_steps = 200;
  std::size_t total_steps = 2000;
  std::size_t batch_size = 8;
  std::size_t seq_len = 128;
  std::uint64_t seed = 1;
  double dropout = 0.2;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  std::size_t eval_interval = 500;
  /// Dev windows (text) or sequences/images used per intermediate eval;
  /// 0 means the whole dev split. The final eval always uses all of it.
  std::size_t eval_limit = 0;
  Precision precision = Precision::f64;
  /// When set, metrics.jsonl, run.json and model.ckpt are written here.
  std::string out_dir;

  /// Throws std::invalid_argument naming the first violated field.
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct MetricEvent {
  std::size_t step = 0;
  std::string split;  // "train" or "dev"
  double loss = 0.0;
  std::optional<double> bpc, acc;
  double lr = 0.0;
};

void to_json(nlohmann::json& j, const MetricEvent& e);

struct FlopEstimate {
  std::uint64_t backbone = 0;
  std::uint64_t cp = 0;
  std::uint64_t total() const { return backbone + cp; }
};

/// Forward-pass GEMM flops (2 per multiply-accumulate) for one sequence of n
/// tokens, enumerated per op. CP terms are reported separately.
FlopEstimate flop_estimate(const TransformerConfig& cfg, std::size_t n);
/// Same for one image.
FlopEstimate flop_estimate(const ConvNetConfig& cfg);

struct EvalResult {
  double loss = 0.0;  // BPC for LM tasks, nats for classification
  std::optional<double> bpc, acc;
  std::size_t count = 0;  // scored tokens or images
};

struct RunRecord {
  nlohmann::json config;
  std::vector<MetricEvent> events;
  std::string checkpoint;
  double wall_clock_s = 0.0;
  std::size_t parameter_count = 0;
  std::size_t cp_parameter_count = 0;
  FlopEstimate flops;
  std::optional<double> final_train_loss;
  EvalResult dev;
  /// Largest global gradient norm observed after clipping.
  double max_clipped_grad_norm = 0.0;
  /// Mean predicted s per CP layer on the first dev sample (LM tasks).
  std::vector<double> mean_s;

  /// Dev BPC for LM tasks (lower is better), dev accuracy for shapes.
  double dev_metric() const;
};

void to_json(nlohmann::json& j, const RunRecord& r);

/// Loss became NaN or infinite.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Called after every optimisation step with the step number (1-based) and
/// the train loss.
using StepCallback = std::function<void(std::size_t step, double loss)>;

RunRecord train(const TrainConfig& cfg, const StepCallback& on_step = {});

/// Builds the model a config describes and loads a checkpoint into it.
struct LoadedModel {
  TrainConfig config;
  std::optional<TransformerLM> lm;
  std::optional<ConvNet> convnet;
};

nlohmann::json checkpoint_config(const TrainConfig& cfg);
LoadedModel load_model(const std::filesystem::path& checkpoint);

/// Full dev-split evaluation of a loaded model.
EvalResult evaluate(const LoadedModel& model, const Dataset& data, std::size_t limit = 0);

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

struct Variant {
  std::string name;
  /// Absent means no ContextPool (transformer baseline, or average pooling).
  std::optional<ContextPoolConfig> cp;
};

/// The eight ContextPool configurations: learned+gaussian (the default) and
/// one row per weighting/locality ablation.
std::vector<Variant> standard_variants(const ContextPoolConfig& base);
Variant baseline_variant();

struct AblationRow {
  std::string variant;
  std::size_t params = 0;
  FlopEstimate flops;
  std::vector<double> metrics;  // per seed, in seed order
  double median = 0.0, min = 0.0, max = 0.0;
};

struct AblationTable {
  std::string metric;  // "dev_bpc" or "dev_acc"
  bool higher_is_better = false;
  std::vector<std::uint64_t> seeds;
  std::vector<AblationRow> rows;

  /// For each seed, whether `variant` is best or tied-best (within `tol`).
  std::vector<bool> wins(const std::string& variant, double tol = 1e-9) const;
  std::string to_markdown() const;
};

void to_json(nlohmann::json& j, const AblationTable& t);

/// Trains every variant under every seed. Runs are independent; `jobs` > 1
/// runs them on that many threads.
AblationTable ablation_sweep(const TrainConfig& base, const std::vector<Variant>& variants,
                             const std::vector<std::uint64_t>& seeds, std::size_t jobs = 1);

double median(std::vector<double> v);

/// Keeps freed tensor buffers on the heap instead of returning them to the OS
/// after every step. Idempotent; no-op outside glibc.
void tune_allocator();

}  // namespace cpool
