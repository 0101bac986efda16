#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "cli.hpp"
#include "config_file.hpp"
#include "cpool/checkpoint.hpp"
#include "cpool/train.hpp"
#include "inspect.hpp"

namespace cpool::cli {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code;
  std::string out, err;
};

Result cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void expect_error_line(const Result& r, const std::string& cls) {
  EXPECT_TRUE(std::regex_match(r.err, std::regex("error: " + cls + ": [^\n]+\n"))) << r.err;
}

constexpr const char* kTinyLm = R"(
model: transformer
transformer:
  layers: 2
  d_model: 16
  heads: 2
  ffn_hidden: 32
  max_seq_len: 32
  cp: {r: 0.2}
data:
  task: text
  synthetic_bytes: 30000
seq_len: 32
batch_size: 2
total_steps: 8
warmup_steps: 2
eval_interval: 4
eval_limit: 2
dropout: 0.0
)";

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("cpool_cli_" + std::to_string(::getpid()) + "_" +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    ::unsetenv("CP_SEED");
  }
  void TearDown() override {
    ::unsetenv("CP_SEED");
    fs::remove_all(dir_);
  }
  fs::path write(const std::string& name, const std::string& text) {
    std::ofstream(dir_ / name, std::ios::binary) << text;
    return dir_ / name;
  }
  fs::path dir_;
};

// --- exit-code contract --------------------------------------------------------

TEST_F(CliTest, UsageErrorsExitTwo) {
  for (const auto& args : std::vector<std::vector<std::string>>{
           {}, {"bogus"}, {"train", "--no-such-flag"}, {"gradcheck", "--module", "nope"}, {"eval"},
           {"eval", "--checkpoint", (dir_ / "missing.ckpt").string()}}) {
    const auto r = cli(args);
    EXPECT_EQ(r.code, kExitUsage);
    expect_error_line(r, "usage");
  }
  EXPECT_EQ(cli({"--help"}).code, kExitOk);
}

TEST_F(CliTest, ConfigErrorsExitThree) {
  const std::vector<std::pair<std::string, std::string>> cases = {
      {"unknown_top", "batch_sizes: 4\n"},
      {"unknown_nested", "transformer:\n  depth: 3\n"},
      {"unknown_cp", "transformer:\n  cp:\n    radius: 0.1\n"},
      {"wrong_kind", "batch_size: eight\n"},
      {"negative", "total_steps: -5\n"},
      {"fractional", "batch_size: 2.5\n"},
      {"invalid", "warmup_steps: 500\ntotal_steps: 100\n"},
      {"bad_enum", "precision: f16\n"},
      {"malformed", "model: [transformer\n"},
      {"not_a_table", "- 1\n- 2\n"},
  };
  for (const auto& [name, text] : cases) {
    const auto r = cli({"train", "--config", write(name + ".yaml", text).string(), "--print-config"});
    EXPECT_EQ(r.code, kExitConfig) << name << ": " << r.err;
    expect_error_line(r, "config");
  }
  ::setenv("CP_SEED", "abc", 1);
  EXPECT_EQ(cli({"train", "--print-config"}).code, kExitConfig);
}

TEST(ShippedConfigs, AllValidate) {
  std::size_t seen = 0;
  for (const auto& entry : fs::directory_iterator(CPOOL_CONFIG_DIR)) {
    if (entry.path().extension() != ".yaml") continue;
    ++seen;
    const auto cfg = train_config_from_document(read_config_file(entry.path()));
    EXPECT_NO_THROW(cfg.validate()) << entry.path();
  }
  EXPECT_GE(seen, 4u);
}

TEST_F(CliTest, UnknownKeyIsNamed) {
  const auto r = cli({"train", "--config", write("c.yaml", "data:\n  vocab: 3\n").string(), "--print-config"});
  EXPECT_NE(r.err.find("'data.vocab'"), std::string::npos) << r.err;
}

// --- config ------------------------------------------------------------------

TEST_F(CliTest, PrintConfigRoundTrips) {
  const auto first = cli({"train", "--config", write("c.yaml", kTinyLm).string(), "--print-config"});
  ASSERT_EQ(first.code, kExitOk) << first.err;
  const auto printed = write("printed.json", first.out);
  const auto second = cli({"train", "--config", printed.string(), "--print-config"});
  ASSERT_EQ(second.code, kExitOk) << second.err;
  EXPECT_EQ(first.out, second.out);
  const auto a = train_config_from_document(parse_config_text(kTinyLm));
  const auto b = train_config_from_document(read_config_file(printed));
  EXPECT_EQ(a, b);
  EXPECT_EQ(b.transformer.cp->r, 0.2);
  EXPECT_EQ(b.transformer.layers, 2u);
}

TEST_F(CliTest, SeedEnvironmentOverridesConfig) {
  ::setenv("CP_SEED", "4242", 1);
  const auto r = cli({"train", "--config", write("c.yaml", "seed: 3\n").string(), "--print-config"});
  ASSERT_EQ(r.code, kExitOk);
  EXPECT_EQ(nlohmann::json::parse(r.out).at("seed"), 4242);
}

TEST(ConfigText, ScalarsKeepTheirKinds) {
  const auto j = parse_config_text("a: '12'\nb: 12\nc: 1.5e-3\nd: true\ne: ~\nf: text\ng: [1, 2]\n");
  EXPECT_TRUE(j.at("a").is_string());
  EXPECT_TRUE(j.at("b").is_number_unsigned());
  EXPECT_DOUBLE_EQ(j.at("c").get<double>(), 1.5e-3);
  EXPECT_TRUE(j.at("d").is_boolean());
  EXPECT_TRUE(j.at("e").is_null());
  EXPECT_EQ(j.at("f"), "text");
  EXPECT_EQ(j.at("g"), nlohmann::json::array({1, 2}));
  EXPECT_THROW(parse_config_text("a: 1\na: 2\n"), ConfigError);
}

// --- gradcheck -----------------------------------------------------------------

TEST_F(CliTest, GradcheckReportsMaxErrorAndPasses) {
  const auto r = cli({"gradcheck", "--module", "contextpool", "--seed", "7"});
  EXPECT_EQ(r.code, kExitOk) << r.err;
  std::smatch m;
  ASSERT_TRUE(std::regex_search(r.out, m, std::regex("max_rel_error (\\S+)\n$")));
  EXPECT_LT(std::stod(m[1]), 1e-4);
}

// --- train / eval / inspect ------------------------------------------------------

TEST_F(CliTest, TrainEvalInspectAreReproducible) {
  const auto cfg = write("c.yaml", kTinyLm);
  const auto run_dir = dir_ / "run";
  auto r = cli({"train", "--config", cfg.string(), "--out", run_dir.string(), "--quiet"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  ASSERT_TRUE(fs::exists(run_dir / "run.json"));
  const auto ckpt = (run_dir / "model.ckpt").string();

  for (int i = 0; i < 2; ++i) {
    r = cli({"eval", "--checkpoint", ckpt, "--out", (dir_ / ("eval" + std::to_string(i) + ".json")).string()});
    ASSERT_EQ(r.code, kExitOk) << r.err;
  }
  EXPECT_EQ(slurp(dir_ / "eval0.json"), slurp(dir_ / "eval1.json"));
  const auto ev = nlohmann::json::parse(slurp(dir_ / "eval0.json"));
  const auto run = nlohmann::json::parse(slurp(run_dir / "run.json"));
  EXPECT_EQ(ev.at("bpc"), run.at("dev").at("bpc"));

  const auto input = write("sample.txt", "The quick brown fox jumps over the lazy dog, then naps in the sun for a while.");
  for (int i = 0; i < 2; ++i) {
    const auto tag = std::to_string(i);
    r = cli({"inspect", "--checkpoint", ckpt, "--input", input.string(), "--dump", (dir_ / ("m" + tag + ".json")).string(),
             "--stats", (dir_ / ("s" + tag + ".csv")).string(), "--full-mask"});
    ASSERT_EQ(r.code, kExitOk) << r.err;
  }
  EXPECT_EQ(slurp(dir_ / "m0.json"), slurp(dir_ / "m1.json"));
  EXPECT_EQ(slurp(dir_ / "s0.csv"), slurp(dir_ / "s1.csv"));

  const auto dump = nlohmann::json::parse(slurp(dir_ / "m0.json"));
  EXPECT_TRUE(mask_dump_violations(dump).empty());
  ASSERT_EQ(dump.at("layers").size(), 2u);
  EXPECT_EQ(dump.at("layers")[0].at("n"), 32u);
  EXPECT_EQ(dump.at("layers")[1].at("g").size(), 32u);
  EXPECT_EQ(dump.at("checkpoint").at("hash"), file_hash(ckpt));

  // Windows of 32, 32 and 14 bytes; counts partition the tokens.
  std::istringstream csv(slurp(dir_ / "s0.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "layer,bin_lo,bin_hi,count");
  std::map<int, std::size_t> totals;
  std::size_t rows = 0;
  while (std::getline(csv, line) && line != "layer,mean_s,std_s") {
    ++rows;
    totals[std::stoi(line)] += std::stoul(line.substr(line.rfind(',') + 1));
  }
  EXPECT_EQ(rows, 2 * kHistogramBins);
  for (const auto& [layer, total] : totals) EXPECT_EQ(total, 78u) << layer;
  std::size_t summaries = 0;
  while (std::getline(csv, line)) ++summaries;
  EXPECT_EQ(summaries, 2u);
}

TEST_F(CliTest, ZeroPredictorPutsEverySizeInOneBin) {
  auto cfg = train_config_from_document(parse_config_text(kTinyLm));
  std::mt19937_64 rng(1);
  TransformerLM lm(cfg.transformer, rng);
  for (auto& b : lm.blocks()) {
    auto& p = b.cp->predictor();
    for (auto* t : {&p.kernel1, &p.bias1, &p.kernel2, &p.bias2}) {
      Tensor z = *t;
      std::fill(z.mutable_data().begin(), z.mutable_data().end(), 0.0);
    }
  }
  save_checkpoint(dir_ / "zero.ckpt", checkpoint_config(cfg), lm.state());
  const auto input = write("in.txt", std::string(50, 'a'));
  const auto r = cli({"inspect", "--checkpoint", (dir_ / "zero.ckpt").string(), "--input", input.string(), "--dump",
                      (dir_ / "m.json").string(), "--stats", (dir_ / "s.csv").string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto dump = nlohmann::json::parse(slurp(dir_ / "m.json"));
  for (const auto& l : dump.at("layers"))
    for (double s : l.at("s")) EXPECT_EQ(s, 0.5);
  const auto model = load_model(dir_ / "zero.ckpt");
  const auto stats = pool_stats(*model.lm, read_token_file(input, 256), 32);
  for (const auto& st : stats) {
    EXPECT_EQ(std::count_if(st.counts.begin(), st.counts.end(), [](auto c) { return c > 0; }), 1);
    EXPECT_EQ(st.counts[10], 50u);
    EXPECT_EQ(st.mean_s, 0.5);
    EXPECT_EQ(st.std_s, 0.0);
  }
}

TEST_F(CliTest, RuntimeFailuresExitOne) {
  write("bad.ckpt", "not a checkpoint");
  auto r = cli({"eval", "--checkpoint", (dir_ / "bad.ckpt").string()});
  EXPECT_EQ(r.code, kExitRuntime);
  expect_error_line(r, "checkpoint");

  auto cfg = train_config_from_document(parse_config_text(kTinyLm));
  cfg.transformer.cp.reset();
  std::mt19937_64 rng(1);
  TransformerLM lm(cfg.transformer, rng);
  save_checkpoint(dir_ / "plain.ckpt", checkpoint_config(cfg), lm.state());
  const auto input = write("in.txt", "abc");
  r = cli({"inspect", "--checkpoint", (dir_ / "plain.ckpt").string(), "--input", input.string(), "--dump",
           (dir_ / "m.json").string()});
  EXPECT_EQ(r.code, kExitRuntime);
  expect_error_line(r, "runtime");

  write("empty.txt", "");
  auto cfg2 = train_config_from_document(parse_config_text(kTinyLm));
  TransformerLM lm2(cfg2.transformer, rng);
  save_checkpoint(dir_ / "cp.ckpt", checkpoint_config(cfg2), lm2.state());
  r = cli({"inspect", "--checkpoint", (dir_ / "cp.ckpt").string(), "--input", (dir_ / "empty.txt").string(), "--stats",
           (dir_ / "s.csv").string()});
  EXPECT_EQ(r.code, kExitRuntime);
  expect_error_line(r, "dataset");
}

TEST(MaskDumpInvariants, DetectViolations) {
  LayerPoolData l{0, {0.5, 0.5}, {0.1, 0.9}, {1.0, 2.0}, std::nullopt};
  const nlohmann::json input = {{"path", "x"}}, ckpt = {{"hash", "00"}};
  EXPECT_TRUE(mask_dump_violations(mask_dump({l}, input, ckpt, WeightingMode::learned)).empty());
  auto bad_w = l;
  bad_w.w = {0.5, 0.6};
  EXPECT_FALSE(mask_dump_violations(mask_dump({bad_w}, input, ckpt, WeightingMode::learned)).empty());
  EXPECT_TRUE(mask_dump_violations(mask_dump({bad_w}, input, ckpt, WeightingMode::unnormalized)).empty());
  auto bad_s = l;
  bad_s.s = {0.1, 1.2};
  EXPECT_FALSE(mask_dump_violations(mask_dump({bad_s}, input, ckpt, WeightingMode::learned)).empty());
  auto bad_g = l;
  bad_g.g = std::vector<double>{1, 2, 3};
  EXPECT_THROW(mask_dump({bad_g}, input, ckpt, WeightingMode::learned), std::invalid_argument);
  EXPECT_FALSE(mask_dump_violations(mask_dump({l}, input, nlohmann::json::object(), WeightingMode::learned)).empty());
}

// --- ablate ---------------------------------------------------------------------

TEST_F(CliTest, AblateWritesTable) {
  const auto cfg = write("c.yaml", std::string(kTinyLm) + "model: transformer\n");
  auto r = cli({"ablate", "--config", cfg.string(), "--out", (dir_ / "ab").string(), "--seeds", "1,2", "--variants",
                "baseline,learned+gaussian"});
  EXPECT_EQ(r.code, kExitConfig);  // duplicate key
  const auto ok_cfg = write("ok.yaml", std::string(kTinyLm));
  r = cli({"ablate", "--config", ok_cfg.string(), "--out", (dir_ / "ab").string(), "--seeds", "1,2", "--variants",
           "baseline,learned+gaussian"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto table = nlohmann::json::parse(slurp(dir_ / "ab" / "ablation.json"));
  ASSERT_EQ(table.at("rows").size(), 2u);
  EXPECT_EQ(table.at("rows")[0].at("variant"), "baseline");
  EXPECT_EQ(table.at("rows")[1].at("metrics").size(), 2u);
  EXPECT_TRUE(fs::exists(dir_ / "ab" / "learned+gaussian" / "seed_2" / "run.json"));
  r = cli({"ablate", "--config", ok_cfg.string(), "--out", (dir_ / "ab2").string(), "--variants", "mystery"});
  EXPECT_EQ(r.code, kExitConfig);
}

}  // namespace
}  // namespace cpool::cli
