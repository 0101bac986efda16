#include "cli.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>

#include <CLI11.hpp>

#include "config_file.hpp"
#include "cpool/checkpoint.hpp"
#include "cpool/gradsuite.hpp"
#include "cpool/train.hpp"
#include "inspect.hpp"

namespace cpool::cli {

namespace {

namespace fs = std::filesystem;

constexpr double kGradTolerance = 1e-4;

int fail(std::ostream& err, const std::string& cls, std::string message, int code) {
  std::replace(message.begin(), message.end(), '\n', ' ');
  err << "error: " << cls << ": " << message << '\n';
  return code;
}

void write_file(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f || !(f << content) || !f.flush()) throw std::runtime_error("cannot write " + path.string());
}

TrainConfig load_train_config(const std::string& path) {
  auto cfg = train_config_from_document(path.empty() ? nlohmann::json::object() : read_config_file(path));
  if (const char* env = std::getenv("CP_SEED")) {
    std::uint64_t seed = 0;
    const std::string text(env);
    const auto res = std::from_chars(text.data(), text.data() + text.size(), seed);
    if (text.empty() || res.ec != std::errc() || res.ptr != text.data() + text.size())
      throw ConfigError("CP_SEED must be a non-negative integer, got '" + text + "'");
    cfg.seed = seed;
  }
  return cfg;
}

nlohmann::json eval_json(const EvalResult& r) {
  nlohmann::json j = {{"loss", r.loss}, {"count", r.count}};
  if (r.bpc) j["bpc"] = *r.bpc;
  if (r.acc) j["acc"] = *r.acc;
  return j;
}

// --- subcommands -------------------------------------------------------------

struct TrainArgs {
  std::string config, out;
  bool print_config = false, quiet = false;
};

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  auto cfg = load_train_config(a.config);
  if (!a.out.empty()) cfg.out_dir = a.out;
  if (a.print_config) {
    out << print_config(cfg);
    return kExitOk;
  }
  if (cfg.out_dir.empty()) throw ConfigError("no output directory: pass --out or set out_dir");
  const auto every = cfg.eval_interval;
  const auto rec = train(cfg, [&](std::size_t step, double loss) {
    if (!a.quiet && (step % every == 0 || step == cfg.total_steps))
      err << "step " << step << "/" << cfg.total_steps << " train_loss " << loss << '\n';
  });
  nlohmann::json summary = {{"run", (fs::path(cfg.out_dir) / "run.json").string()},
                            {"checkpoint", rec.checkpoint},
                            {"dev", eval_json(rec.dev)},
                            {"parameter_count", rec.parameter_count},
                            {"wall_clock_s", rec.wall_clock_s}};
  out << summary.dump() << '\n';
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint, out;
  std::size_t limit = 0;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const auto model = load_model(a.checkpoint);
  const auto data = make_dataset(model.config.data, model.config.seq_len);
  const auto r = evaluate(model, data, a.limit);
  nlohmann::json j = {{"checkpoint", a.checkpoint},
                      {"checkpoint_hash", file_hash(a.checkpoint)},
                      {"task", std::string(to_string(model.config.data.task))},
                      {"split", "dev"},
                      {"limit", a.limit}};
  j.update(eval_json(r));
  const auto text = j.dump(2) + "\n";
  if (a.out.empty()) out << text;
  else write_file(a.out, text);
  return kExitOk;
}

struct GradArgs {
  std::string module = "all";
  std::uint64_t seed = 0;
  std::size_t instances = 20;
  bool verbose = false;
};

int cmd_gradcheck(const GradArgs& a, std::ostream& out, std::ostream& err) {
  const auto report = run_grad_suite(a.module, a.seed, a.instances);
  std::map<std::pair<std::string, std::string>, double> worst;
  for (const auto& e : report.entries) {
    auto& w = worst[{e.module, e.op}];
    w = std::max(w, e.max_rel_error);
    if (a.verbose) out << e.module << ' ' << e.op << " #" << e.instance << ' ' << e.max_rel_error << '\n';
  }
  for (const auto& [key, value] : worst) out << key.first << ' ' << key.second << ' ' << value << '\n';
  out << "max_rel_error " << report.max_rel_error << '\n';
  if (report.max_rel_error < kGradTolerance) return kExitOk;
  const auto& w = report.worst();
  return fail(err, "gradcheck",
              w.module + "/" + w.op + " instance " + std::to_string(w.instance) + " has relative error " +
                  std::to_string(w.max_rel_error) + " >= 1e-4",
              kExitRuntime);
}

struct AblateArgs {
  std::string config, out;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<std::string> variants;
  std::size_t jobs = 1;
};

int cmd_ablate(const AblateArgs& a, std::ostream& out) {
  auto base = load_train_config(a.config);
  base.out_dir = a.out;
  const auto cp = base.model == ModelKind::transformer ? base.transformer.cp.value_or(ContextPoolConfig{})
                                                       : base.convnet.cp;
  auto available = standard_variants(cp);
  available.insert(available.begin(), baseline_variant());
  std::vector<Variant> chosen;
  if (a.variants.empty()) {
    chosen.assign(available.begin() + 1, available.end());
  } else {
    for (const auto& name : a.variants) {
      const auto it = std::find_if(available.begin(), available.end(), [&](const auto& v) { return v.name == name; });
      if (it == available.end()) throw ConfigError("unknown variant '" + name + "'");
      chosen.push_back(*it);
    }
  }
  if (base.model == ModelKind::convnet)
    for (const auto& v : chosen)
      if (v.cp && (v.cp->weighting == WeightingMode::nonlocal || v.cp->locality != LocalityMode::gaussian))
        throw ConfigError("variant '" + v.name + "' is not available for the convnet");
  const auto table = ablation_sweep(base, chosen, a.seeds, a.jobs);
  write_file(fs::path(a.out) / "ablation.json", nlohmann::json(table).dump(2) + "\n");
  write_file(fs::path(a.out) / "ablation.md", table.to_markdown());
  out << table.to_markdown();
  return kExitOk;
}

struct InspectArgs {
  std::string checkpoint, input, dump, stats;
  bool full_mask = false;
};

int cmd_inspect(const InspectArgs& a, std::ostream& out) {
  if (a.dump.empty() && a.stats.empty()) throw CLI::ValidationError("inspect", "nothing to do: pass --dump and/or --stats");
  const auto model = load_model(a.checkpoint);
  if (!model.lm) throw std::runtime_error("inspect supports transformer checkpoints only");
  const auto& lm = *model.lm;
  const auto tokens = read_token_file(a.input, lm.config().vocab_size);
  const auto window = model.config.seq_len;
  if (!a.dump.empty()) {
    const auto first = std::span(tokens).first(std::min(window, tokens.size()));
    const auto layers = collect_pool_data(lm, first, a.full_mask);
    const nlohmann::json input = {
        {"path", a.input}, {"hash", file_hash(a.input)}, {"bytes", tokens.size()}, {"tokens_used", first.size()}};
    const nlohmann::json ckpt = {{"path", a.checkpoint}, {"hash", file_hash(a.checkpoint)}};
    const auto dump = mask_dump(layers, input, ckpt, lm.config().cp->weighting);
    if (const auto bad = mask_dump_violations(dump); !bad.empty())
      throw std::runtime_error("mask dump violates its invariants: " + bad.front());
    write_file(a.dump, dump.dump() + "\n");
  }
  const auto stats = pool_stats(lm, tokens, window);
  if (!a.stats.empty()) write_file(a.stats, pool_stats_csv(stats));
  for (const auto& st : stats)
    out << "layer " << st.layer << " tokens " << st.tokens << " mean_s " << st.mean_s << " std_s " << st.std_s << '\n';
  return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"ContextPool transformer and convnet experiments", "cpool"};
  app.require_subcommand(1);
  app.fallthrough(false);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train one model and write metrics, run record and checkpoint");
  train_cmd->add_option("--config", train_args.config, "YAML/JSON config file")->check(CLI::ExistingFile);
  train_cmd->add_option("--out", train_args.out, "Output directory (overrides out_dir)");
  train_cmd->add_flag("--print-config", train_args.print_config, "Print the validated config and exit");
  train_cmd->add_flag("--quiet", train_args.quiet, "No progress lines on stderr");

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on its dev split");
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--out", eval_args.out, "Write the JSON result here instead of stdout");
  eval_cmd->add_option("--limit", eval_args.limit, "Dev windows/sequences/images to score (0 = all)");

  GradArgs grad_args;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient suite; exit 0 iff max error < 1e-4");
  std::vector<std::string> modules{"all"};
  for (const auto& m : grad_suite_modules()) modules.push_back(m);
  grad_cmd->add_option("--module", grad_args.module)->check(CLI::IsMember(modules));
  grad_cmd->add_option("--seed", grad_args.seed);
  grad_cmd->add_option("--instances", grad_args.instances)->check(CLI::PositiveNumber);
  grad_cmd->add_flag("--verbose", grad_args.verbose, "One line per checked instance");

  AblateArgs ablate_args;
  auto* ablate_cmd = app.add_subcommand("ablate", "Train every variant under every seed and tabulate dev metrics");
  ablate_cmd->add_option("--config", ablate_args.config)->check(CLI::ExistingFile);
  ablate_cmd->add_option("--out", ablate_args.out)->required();
  ablate_cmd->add_option("--seeds", ablate_args.seeds)->delimiter(',');
  ablate_cmd->add_option("--variants", ablate_args.variants, "Comma-separated; default: the 8 ContextPool variants")
      ->delimiter(',');
  ablate_cmd->add_option("--jobs", ablate_args.jobs)->check(CLI::PositiveNumber);

  InspectArgs inspect_args;
  auto* inspect_cmd = app.add_subcommand("inspect", "Dump pooling weights/sizes and size histograms");
  inspect_cmd->add_option("--checkpoint", inspect_args.checkpoint)->required()->check(CLI::ExistingFile);
  inspect_cmd->add_option("--input", inspect_args.input, "Text file, one token per byte")
      ->required()
      ->check(CLI::ExistingFile);
  inspect_cmd->add_option("--dump", inspect_args.dump, "MaskDump JSON output");
  inspect_cmd->add_option("--stats", inspect_args.stats, "Per-layer histogram CSV output");
  inspect_cmd->add_flag("--full-mask", inspect_args.full_mask, "Include the n x n locality masks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    return fail(err, "usage", e.what(), kExitUsage);
  }

  try {
    if (train_cmd->parsed()) return cmd_train(train_args, out, err);
    if (eval_cmd->parsed()) return cmd_eval(eval_args, out);
    if (grad_cmd->parsed()) return cmd_gradcheck(grad_args, out, err);
    if (ablate_cmd->parsed()) return cmd_ablate(ablate_args, out);
    return cmd_inspect(inspect_args, out);
  } catch (const CLI::ParseError& e) {
    return fail(err, "usage", e.what(), kExitUsage);
  } catch (const ConfigError& e) {
    return fail(err, "config", e.what(), kExitConfig);
  } catch (const CheckpointError& e) {
    return fail(err, "checkpoint", e.what(), kExitRuntime);
  } catch (const DatasetError& e) {
    return fail(err, "dataset", e.what(), kExitRuntime);
  } catch (const TrainingDiverged& e) {
    return fail(err, "diverged", e.what(), kExitRuntime);
  } catch (const std::exception& e) {
    return fail(err, "runtime", e.what(), kExitRuntime);
  }
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"cpool"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(int(argv.size()), argv.data(), out, err);
}

}  // namespace cpool::cli
