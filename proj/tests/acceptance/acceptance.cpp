#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cli.hpp"
#include "cpool/autograd.hpp"
#include "cpool/contextpool.hpp"
#include "cpool/data.hpp"
#include "cpool/gradsuite.hpp"
#include "cpool/train.hpp"
#include "cpool/transformer.hpp"
#include "helpers.hpp"
#include "inspect.hpp"

namespace fs = std::filesystem;
using namespace cpool;
using namespace cpool::testing;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Context {
  fs::path out;
  std::ostream& log;
};

struct Criterion {
  int id;
  std::string name;
  std::function<Outcome(Context&)> run;
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// --- 1 -----------------------------------------------------------------------

Outcome gradient_suite(Context& ctx) {
  Stopwatch sw;
  const auto report = run_grad_suite("all", 1, 20);
  const double t = sw.seconds();
  std::map<std::string, double> per_module;
  for (const auto& e : report.entries) per_module[e.module] = std::max(per_module[e.module], e.max_rel_error);
  for (const auto& [m, err] : per_module) ctx.log << "  " << m << " max_rel_error " << err << '\n';
  const auto& w = report.worst();
  return {report.max_rel_error < 1e-4 && t < 60.0,
          fmt("max_rel_error %.3g (%s/%s) over %zu checks in %.1f s", report.max_rel_error, w.module.c_str(),
              w.op.c_str(), report.entries.size(), t)};
}

// --- 2 -----------------------------------------------------------------------

Vec dense_masks(const Vec& sigma, bool causal) {
  const auto n = sigma.size();
  Vec m(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < (causal ? i + 1 : n); ++j) {
      const double o = double(j) - double(i);
      m[i * n + j] = oracle::gauss(o * o, sigma[i]);
    }
  return m;
}

Vec broadcast_rows(const Vec& w) {
  const auto n = w.size();
  Vec out(n * n);
  for (std::size_t i = 0; i < n; ++i) std::copy(w.begin(), w.end(), out.begin() + std::ptrdiff_t(i * n));
  return out;
}

Outcome oracle_equivalence(Context&) {
  Stopwatch sw;
  std::mt19937_64 rng(2);
  double worst_1d = 0.0, worst_2d = 0.0;
  std::uniform_int_distribution<std::size_t> nd(1, 16), dd(1, 8);
  for (int trial = 0; trial < 100; ++trial) {
    ContextPoolConfig cfg;
    cfg.causal = trial % 2 == 1;
    cfg.r = 0.4;
    const auto n = nd(rng), d = dd(rng);
    const auto x = rand_tensor({n, d}, rng);
    const auto w = oracle::softmax(oracle::random_vec(n, rng, -2, 2));
    const auto s = oracle::random_vec(n, rng, 0, 1);
    Vec sigma(n);
    for (std::size_t i = 0; i < n; ++i) sigma[i] = std::max(cfg.r * double(n) * s[i], cfg.sigma_floor);
    const PoolParams p{Tensor({n}, w), Tensor({n}, s), Tensor({n}, sigma), {}};
    const auto expected = oracle::pool_1d(to_vec(x), broadcast_rows(w), dense_masks(sigma, cfg.causal), n, d);
    worst_1d = std::max(worst_1d, max_abs_diff(to_vec(context_pool_1d(x, p, cfg)), expected));
  }
  std::uniform_int_distribution<std::size_t> ext(1, 6), ch(1, 3), st(1, 3);
  for (int trial = 0; trial < 100; ++trial) {
    auto cfg = ContextPoolConfig::for_images();
    cfg.r = 0.5;
    const auto h = ext(rng), wd = ext(rng), c = ch(rng), stride = st(rng);
    const auto x = rand_tensor({h, wd, c}, rng);
    const auto wts = oracle::softmax(oracle::random_vec(h * wd, rng, -2, 2));
    const auto s = oracle::random_vec(h * wd, rng, 0, 1);
    Vec sigma(h * wd);
    for (std::size_t i = 0; i < h * wd; ++i) sigma[i] = std::max(cfg.r * s[i] * double(h + wd) / 2.0, cfg.sigma_floor);
    const PoolParams2d p{Tensor({h, wd}, wts), Tensor({h, wd}, s), Tensor({h, wd}, sigma)};
    const auto expected = oracle::pool_2d(to_vec(x), wts, sigma, h, wd, c, stride);
    worst_2d = std::max(worst_2d, max_abs_diff(to_vec(context_pool_2d(x, p, stride, cfg)), expected));
  }
  const double t = sw.seconds();
  return {worst_1d <= 1e-12 && worst_2d <= 1e-12 && t < 60.0,
          fmt("max |diff| 1d %.2g, 2d %.2g over 100 + 100 instances in %.1f s", worst_1d, worst_2d, t)};
}

// --- 3 -----------------------------------------------------------------------

Outcome identity_and_averaging(Context&) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> nd(1, 64), dd(1, 8);
  double identity = 0.0, averaging = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    ContextPoolConfig cfg;
    cfg.causal = trial % 2 == 1;
    const auto n = nd(rng), d = dd(rng);
    const auto x = rand_tensor({n, d}, rng);
    const auto w = oracle::softmax(oracle::random_vec(n, rng, -3, 3));
    const PoolParams floor{Tensor({n}, w), Tensor::zeros({n}), Tensor::full({n}, cfg.sigma_floor), {}};
    identity = std::max(identity, max_abs_diff(to_vec(context_pool_1d(x, floor, cfg)), to_vec(x)));
  }
  for (int trial = 0; trial < 50; ++trial) {
    auto cfg = ContextPoolConfig::for_images();
    const std::size_t h = 1 + trial % 6, wd = 1 + (trial / 6) % 6, c = 2;
    const auto x = rand_tensor({h, wd, c}, rng);
    const auto wts = oracle::softmax(oracle::random_vec(h * wd, rng, -3, 3));
    const PoolParams2d floor{Tensor({h, wd}, wts), Tensor::zeros({h, wd}), Tensor::full({h, wd}, cfg.sigma_floor)};
    identity = std::max(identity, max_abs_diff(to_vec(context_pool_2d(x, floor, 1, cfg)), to_vec(x)));
  }
  for (int trial = 0; trial < 50; ++trial) {
    ContextPoolConfig cfg;
    cfg.weighting = WeightingMode::uniform;
    cfg.locality = LocalityMode::none;
    const auto n = nd(rng), d = dd(rng);
    const auto x = rand_tensor({n, d}, rng);
    std::mt19937_64 init(rng());
    const auto predictor = PredictorParams::init_1d(d, cfg, n, init);
    const auto y = apply_variant(x, cfg, predictor).y;
    for (std::size_t c = 0; c < d; ++c) {
      long double mean = 0;
      for (std::size_t j = 0; j < n; ++j) mean += x.at(j, c);
      mean /= n;
      for (std::size_t i = 0; i < n; ++i) averaging = std::max(averaging, std::abs(y.at(i, c) - double(mean)));
    }
  }
  return {identity < 1e-6 && averaging < 1e-9,
          fmt("sigma at floor: max |Y-X| %.2g; uniform weights, flat mask: max |row - column mean| %.2g", identity,
              averaging)};
}

// --- 4 -----------------------------------------------------------------------

Outcome causal_isolation(Context&) {
  std::mt19937_64 rng(4);
  const auto variants = standard_variants(ContextPoolConfig{});
  std::size_t changed_rows = 0, nonzero = 0;
  for (int trial = 0; trial < 50; ++trial) {
    TransformerConfig cfg{.layers = 2, .d_model = 12, .heads = 3, .ffn_hidden = 24, .vocab_size = 17, .max_seq_len = 16};
    cfg.cp = variants[std::size_t(trial) % variants.size()].cp;
    cfg.cp->init_sigma = std::uniform_real_distribution<double>(0.5, 3.0)(rng);
    TransformerLM model(cfg, rng);
    const auto n = std::uniform_int_distribution<std::size_t>(2, cfg.max_seq_len)(rng);
    std::vector<int> tokens(n);
    for (auto& t : tokens) t = int(rng() % cfg.vocab_size);
    const auto t = std::uniform_int_distribution<std::size_t>(0, n - 2)(rng);
    auto perturbed = tokens;
    for (std::size_t j = t + 1; j < n; ++j) perturbed[j] = int((tokens[j] + 1 + rng() % (cfg.vocab_size - 1)) % cfg.vocab_size);
    const auto a = model.forward(tokens), b = model.forward(perturbed);
    for (std::size_t c = 0; c < cfg.vocab_size; ++c) nonzero += a.at(t, c) != b.at(t, c);
    bool later = false;
    for (std::size_t c = 0; c < cfg.vocab_size; ++c) later |= a.at(n - 1, c) != b.at(n - 1, c);
    changed_rows += later;
  }
  // Last-position rows must move, or the perturbation tested nothing.
  return {nonzero == 0 && changed_rows == 50,
          fmt("%zu logits at position t changed over 50 triples (8 variants cycled); final position moved in %zu",
              nonzero, changed_rows)};
}

// --- 5 -----------------------------------------------------------------------

Outcome lm_direction(Context& ctx) {
  TrainConfig c;
  c.transformer.layers = 2;
  c.transformer.d_model = 128;
  c.transformer.heads = 4;
  c.transformer.ffn_hidden = 512;
  c.transformer.max_seq_len = 256;
  c.seq_len = 256;
  c.batch_size = 1;
  c.total_steps = 5000;
  c.warmup_steps = 200;
  c.eval_interval = c.total_steps;
  c.dropout = 0.0;
  c.precision = Precision::f32;
  c.data.synthetic_bytes = 600000;
  c.out_dir = (ctx.out / "lm").string();
  Stopwatch sw;
  const auto table = ablation_sweep(c, {baseline_variant(), standard_variants(ContextPoolConfig{})[0]}, {1, 2, 3});
  const double t = sw.seconds();
  std::ofstream(ctx.out / "lm" / "ablation.md") << table.to_markdown();
  ctx.log << table.to_markdown();
  const double base = table.rows[0].median, cp = table.rows[1].median;
  return {cp <= base && t <= 1800.0,
          fmt("median dev BPC: contextpool %.4f, baseline %.4f over 3 seeds, %zu steps on %zu bytes, %.0f s", cp, base,
              c.total_steps, c.data.synthetic_bytes, t)};
}

// --- 6 -----------------------------------------------------------------------

Outcome parameter_overhead(Context& ctx) {
  bool ok = true;
  std::string detail;
  for (std::size_t d : {128, 256, 512, 1024}) {
    TransformerConfig cfg;
    cfg.d_model = d;
    cfg.ffn_hidden = 4 * d;
    auto with_cp = cfg;
    with_cp.cp = ContextPoolConfig{};
    const double ratio = double(analytic_cp_parameter_count(with_cp)) / double(analytic_parameter_count(cfg));
    ok &= ratio <= 0.05;
    detail += fmt("%sd=%zu %.2f%%", detail.empty() ? "" : ", ", d, 100 * ratio);
  }
  // The analytic count must describe the model that is actually built.
  TransformerConfig cfg;
  cfg.cp = ContextPoolConfig{};
  std::mt19937_64 rng(6);
  const TransformerLM model(cfg, rng);
  const bool counted = model.cp_parameter_count() == analytic_cp_parameter_count(cfg) &&
                       model.parameter_count() == analytic_parameter_count(cfg);
  ctx.log << "  built d=128 model: " << model.cp_parameter_count() << " predictor / " << model.backbone_parameter_count()
          << " backbone parameters\n";
  return {ok && counted, "predictor share of backbone: " + detail + (counted ? "" : "; analytic count mismatch")};
}

// --- 7 -----------------------------------------------------------------------

Outcome convnet_direction(Context& ctx) {
  TrainConfig c;
  c.model = ModelKind::convnet;
  c.data.task = TaskKind::shapes;
  c.total_steps = 600;
  c.batch_size = 16;
  c.base_lr = 3e-3;
  c.warmup_steps = 30;
  c.eval_interval = c.total_steps;
  c.dropout = 0.0;
  c.precision = Precision::f32;
  c.out_dir = (ctx.out / "shapes").string();
  Stopwatch sw;
  const auto table =
      ablation_sweep(c, {baseline_variant(), standard_variants(ContextPoolConfig::for_images())[0]}, {1, 2, 3});
  const double t = sw.seconds();
  std::ofstream(ctx.out / "shapes" / "ablation.md") << table.to_markdown();
  ctx.log << table.to_markdown();
  const double avg = table.rows[0].median, cp = table.rows[1].median;
  return {cp >= avg && t <= 600.0,
          fmt("median dev accuracy: contextpool %.4f, average pooling %.4f over 3 seeds, %.0f s", cp, avg, t)};
}

// --- 8 -----------------------------------------------------------------------

Outcome ablation_completeness(Context& ctx) {
  TrainConfig c;
  c.data.task = TaskKind::copy;
  c.data.dev_sequences = 32;
  c.transformer.layers = 2;
  c.transformer.d_model = 32;
  c.transformer.heads = 4;
  c.transformer.ffn_hidden = 64;
  c.transformer.vocab_size = 16;
  c.transformer.max_seq_len = 32;
  c.data.vocab_size = 16;
  c.seq_len = 32;
  c.batch_size = 4;
  c.total_steps = 2000;
  c.warmup_steps = 100;
  c.eval_interval = c.total_steps;
  c.base_lr = 3e-3;
  c.dropout = 0.0;
  c.out_dir = (ctx.out / "copy").string();
  Stopwatch sw;
  const auto table = ablation_sweep(c, standard_variants(ContextPoolConfig{}), {1, 2, 3});
  const auto md = table.to_markdown();
  std::ofstream(ctx.out / "copy" / "ablation.md") << md;
  std::ofstream(ctx.out / "copy" / "ablation.json") << nlohmann::json(table).dump(2) << '\n';
  ctx.log << md;
  bool complete = table.rows.size() == 8;
  for (const auto& r : table.rows) complete &= r.metrics.size() == 3 && std::ranges::all_of(r.metrics, [](double m) {
                                                 return std::isfinite(m);
                                               });
  const auto wins = table.wins("learned+gaussian");
  const auto won = std::ranges::count(wins, true);
  // Best-in-seed is reported, not required.
  return {complete, fmt("%zu variants x 3 seeds trained in %.0f s; learned+gaussian best or tied in %td of 3 seeds",
                        table.rows.size(), sw.seconds(), won)};
}

// --- 9 -----------------------------------------------------------------------

Outcome diagnostics(Context& ctx) {
  const auto dir = ctx.out / "inspect";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ofstream(dir / "config.yaml") << R"(model: transformer
transformer:
  layers: 2
  d_model: 64
  heads: 4
  ffn_hidden: 256
  max_seq_len: 128
  cp: {}
data:
  task: text
  synthetic_bytes: 200000
seq_len: 128
batch_size: 4
total_steps: 600
warmup_steps: 50
eval_interval: 600
eval_limit: 8
dropout: 0.0
)";
  const auto sample = synthetic_corpus(2000, 99);
  std::ofstream(dir / "sample.txt", std::ios::binary).write(reinterpret_cast<const char*>(sample.data()),
                                                             std::streamsize(sample.size()));

  std::ostringstream out, err;
  if (cli::run({"train", "--config", (dir / "config.yaml").string(), "--out", (dir / "run").string(), "--quiet"}, out,
               err) != cli::kExitOk)
    return {false, "train failed: " + err.str()};
  out.str("");
  if (cli::run({"inspect", "--checkpoint", (dir / "run" / "model.ckpt").string(), "--input",
                (dir / "sample.txt").string(), "--dump", (dir / "maskdump.json").string(), "--stats",
                (dir / "stats.csv").string(), "--full-mask"},
               out, err) != cli::kExitOk)
    return {false, "inspect failed: " + err.str()};

  std::ifstream dump_file(dir / "maskdump.json");
  const auto dump = nlohmann::json::parse(dump_file);
  const auto violations = cli::mask_dump_violations(dump);
  for (const auto& v : violations) ctx.log << "  violation: " << v << '\n';

  // Histogram rows must account for every token of the sample, per layer.
  std::ifstream csv(dir / "stats.csv");
  std::string line;
  std::getline(csv, line);
  std::map<std::size_t, std::size_t> counted;
  while (std::getline(csv, line) && line.rfind("layer,", 0) != 0) {
    std::size_t layer = 0, count = 0;
    double lo = 0, hi = 0;
    if (std::sscanf(line.c_str(), "%zu,%lf,%lf,%zu", &layer, &lo, &hi, &count) == 4) counted[layer] += count;
  }
  bool totals = counted.size() == dump.at("layers").size();
  for (const auto& [layer, n] : counted) totals &= n == sample.size();

  ctx.log << out.str();
  std::string means;
  for (std::istringstream report(out.str()); std::getline(report, line);) {
    const auto at = line.find("mean_s ");
    if (at == std::string::npos) continue;
    means += (means.empty() ? "" : ", ") + line.substr(0, line.find(' ', 6)) + " " +
             line.substr(at, line.find(' ', at + 7) - at);
  }
  return {violations.empty() && totals && !means.empty(),
          fmt("%zu layers dumped, %zu invariant violations, histogram totals %s; ", dump.at("layers").size(),
              violations.size(), totals ? "match" : "MISMATCH") +
              means};
}

// --- 10 ----------------------------------------------------------------------

Outcome determinism(Context&) {
  TrainConfig c;
  c.transformer = TransformerConfig{.layers = 2, .d_model = 32, .heads = 4, .ffn_hidden = 64, .max_seq_len = 64};
  c.transformer.cp = ContextPoolConfig{};
  c.data.synthetic_bytes = 50000;
  c.seq_len = 64;
  c.batch_size = 4;
  c.total_steps = 150;
  c.warmup_steps = 20;
  c.eval_interval = 150;
  c.eval_limit = 4;
  c.dropout = 0.1;
  c.precision = Precision::f64;
  c.seed = 10;
  const auto a = train(c), b = train(c);
  auto other = c;
  other.seed = 11;
  const auto d = train(other);
  const double diff = std::abs(*a.final_train_loss - *b.final_train_loss);
  const double seed_gap = std::abs(*a.final_train_loss - *d.final_train_loss);
  return {diff <= 1e-9 && seed_gap > 0.0,
          fmt("final train loss %.12f vs %.12f (|diff| %.2g); another seed differs by %.3g", *a.final_train_loss,
              *b.final_train_loss, diff, seed_gap)};
}

const std::vector<Criterion>& criteria() {
  static const std::vector<Criterion> all{
      {1, "gradient suite", gradient_suite},
      {2, "oracle equivalence", oracle_equivalence},
      {3, "identity and averaging limits", identity_and_averaging},
      {4, "causal isolation", causal_isolation},
      {5, "language model direction", lm_direction},
      {6, "parameter overhead", parameter_overhead},
      {7, "convnet direction", convnet_direction},
      {8, "ablation sweep", ablation_completeness},
      {9, "pool diagnostics", diagnostics},
      {10, "determinism", determinism},
  };
  return all;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks for the cpool library", "cpool_acceptance"};
  std::vector<int> selected;
  std::string out_dir = (fs::temp_directory_path() / "cpool_acceptance").string();
  bool list = false;
  app.add_option("-c,--criterion", selected, "Criteria to run (default: all)")->check(CLI::Range(1, 10));
  app.add_option("-o,--out", out_dir, "Directory for run artifacts");
  app.add_flag("--list", list, "List criteria and exit");
  CLI11_PARSE(app, argc, argv);

  if (list) {
    for (const auto& c : criteria()) std::cout << c.id << "  " << c.name << '\n';
    return 0;
  }
  if (selected.empty())
    for (const auto& c : criteria()) selected.push_back(c.id);

  int failures = 0;
  for (const auto& c : criteria()) {
    if (std::ranges::find(selected, c.id) == selected.end()) continue;
    Context ctx{fs::path(out_dir) / ("criterion_" + std::to_string(c.id)), std::cout};
    fs::create_directories(ctx.out);
    Outcome o;
    Stopwatch sw;
    try {
      o = c.run(ctx);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    const auto line = fmt("criterion %2d %s  %s: ", c.id, o.pass ? "PASS" : "FAIL", c.name.c_str()) + o.detail;
    std::cout << line << fmt("  [%.1f s]", sw.seconds()) << std::endl;
    std::ofstream(ctx.out / "result.txt") << line << '\n';
  }
  return failures == 0 ? 0 : 1;
}
