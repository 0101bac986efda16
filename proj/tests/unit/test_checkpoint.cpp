#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>

#include "cpool/checkpoint.hpp"
#include "cpool/transformer.hpp"
#include "helpers.hpp"

namespace cpool {
namespace {

using namespace cpool::testing;
namespace fs = std::filesystem;

class CheckpointTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("cpool_ckpt_" + std::to_string(::getpid()) + "_" +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  }
  void write(const fs::path& p, const std::string& b) { std::ofstream(p, std::ios::binary) << b; }

  fs::path dir_;
};

TEST_F(CheckpointTest, RoundTripsTensorsAndConfig) {
  std::mt19937_64 rng(1);
  const NamedTensors tensors{{"a", rand_tensor({2, 3}, rng)}, {"b.c", Tensor({1}, {-0.0})}, {"d", rand_tensor({4}, rng)}};
  const nlohmann::json config = {{"kind", "test"}, {"depth", 3}};
  save_checkpoint(dir_ / "m.ckpt", config, tensors);
  const auto ck = load_checkpoint(dir_ / "m.ckpt");
  EXPECT_EQ(ck.config, config);
  ASSERT_EQ(ck.tensors.size(), tensors.size());
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    EXPECT_EQ(ck.tensors[i].first, tensors[i].first);
    EXPECT_EQ(ck.tensors[i].second.shape(), tensors[i].second.shape());
    EXPECT_EQ(to_vec(ck.tensors[i].second), to_vec(tensors[i].second));
  }
  EXPECT_TRUE(std::signbit(ck.at("b.c").item()));
  EXPECT_THROW(ck.at("missing"), CheckpointError);
}

TEST_F(CheckpointTest, LayoutIsMagicLengthManifestPayload) {
  save_checkpoint(dir_ / "m.ckpt", {{"k", 1}}, {{"x", Tensor({2}, {1.0, 2.0})}});
  const auto b = bytes(dir_ / "m.ckpt");
  ASSERT_EQ(b.substr(0, 5), "CPKT1");
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= std::uint64_t(static_cast<unsigned char>(b[5 + i])) << (8 * i);
  const auto manifest = nlohmann::json::parse(b.substr(13, len));
  EXPECT_EQ(manifest.at("format"), "CPKT1");
  const auto& entry = manifest.at("tensors").at(0);
  EXPECT_EQ(entry.at("dtype"), "f64");
  EXPECT_EQ(entry.at("nbytes"), 16);
  EXPECT_EQ(entry.at("shape"), nlohmann::json::array({2}));
  ASSERT_EQ(b.size(), 13 + len + 16);
  // 1.0 little-endian: 00 .. 00 f0 3f
  EXPECT_EQ(static_cast<unsigned char>(b[13 + len + 7]), 0x3f);
  EXPECT_EQ(static_cast<unsigned char>(b[13 + len + 6]), 0xf0);
}

TEST_F(CheckpointTest, RejectsCorruptFiles) {
  save_checkpoint(dir_ / "m.ckpt", {}, {{"x", Tensor({3}, {1, 2, 3})}});
  const auto good = bytes(dir_ / "m.ckpt");
  write(dir_ / "magic.ckpt", "CPKT2" + good.substr(5));
  EXPECT_THROW(load_checkpoint(dir_ / "magic.ckpt"), CheckpointError);
  write(dir_ / "short.ckpt", good.substr(0, good.size() - 4));
  EXPECT_THROW(load_checkpoint(dir_ / "short.ckpt"), CheckpointError);
  write(dir_ / "tiny.ckpt", "CPK");
  EXPECT_THROW(load_checkpoint(dir_ / "tiny.ckpt"), CheckpointError);
  EXPECT_THROW(load_checkpoint(dir_ / "absent.ckpt"), CheckpointError);
  EXPECT_THROW(save_checkpoint(dir_ / "dup.ckpt", {}, {{"x", Tensor({1}, {1})}, {"x", Tensor({1}, {2})}}),
               CheckpointError);
}

TEST_F(CheckpointTest, HashIsStableAndContentSensitive) {
  save_checkpoint(dir_ / "a.ckpt", {}, {{"x", Tensor({2}, {1, 2})}});
  save_checkpoint(dir_ / "b.ckpt", {}, {{"x", Tensor({2}, {1, 2})}});
  save_checkpoint(dir_ / "c.ckpt", {}, {{"x", Tensor({2}, {1, 2.5})}});
  EXPECT_EQ(file_hash(dir_ / "a.ckpt"), file_hash(dir_ / "b.ckpt"));
  EXPECT_NE(file_hash(dir_ / "a.ckpt"), file_hash(dir_ / "c.ckpt"));
  EXPECT_EQ(file_hash(dir_ / "a.ckpt").size(), 16u);
  write(dir_ / "empty", "");
  EXPECT_EQ(file_hash(dir_ / "empty"), "cbf29ce484222325");
}

TEST_F(CheckpointTest, TransformerStateSurvivesFileRoundTrip) {
  TransformerConfig cfg{.layers = 2, .d_model = 8, .heads = 2, .ffn_hidden = 16, .vocab_size = 11, .max_seq_len = 6};
  cfg.cp = ContextPoolConfig{};
  cfg.cp->locality = LocalityMode::random_sparse;
  std::mt19937_64 ra(1), rb(2);
  TransformerLM a(cfg, ra), b(cfg, rb);
  save_checkpoint(dir_ / "lm.ckpt", nlohmann::json(cfg), a.state());
  const auto ck = load_checkpoint(dir_ / "lm.ckpt");
  EXPECT_EQ(ck.config.get<TransformerConfig>(), cfg);
  b.load_state(ck.tensors);
  const std::vector<int> toks{1, 5, 7, 0, 3, 10};
  EXPECT_EQ(to_vec(a.forward(toks)), to_vec(b.forward(toks)));
}

}  // namespace
}  // namespace cpool
