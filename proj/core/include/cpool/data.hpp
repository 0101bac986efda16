#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "cpool/tensor.hpp"

namespace cpool {

enum class TaskKind { text, copy, shapes };

std::string_view to_string(TaskKind k);
TaskKind parse_task_kind(std::string_view s);

struct DatasetSpec {
  TaskKind task = TaskKind::text;

  // text: byte-level corpus from `path`, or a synthetic corpus when empty.
  std::string path;
  std::size_t max_bytes = 1 << 20;
  std::size_t synthetic_bytes = 600000;
  std::size_t vocab_size = 256;

  // copy: uniform tokens in [0, copy_vocab), target[t] = input[t - copy_delay].
  std::size_t copy_vocab = 16;
  std::size_t copy_delay = 4;
  std::size_t dev_sequences = 32;

  // shapes: one filled square, cross or disc per image.
  std::size_t image_size = 16;
  std::size_t train_images = 2000;
  std::size_t dev_images = 300;
  std::size_t test_images = 300;
  double noise = 0.15;

  /// Seeds every generator; dev/test data depend on this only, never on the
  /// training seed, so runs that differ in training seed share held-out data.
  std::uint64_t data_seed = 20240601;

  void validate() const;
  bool operator==(const DatasetSpec&) const = default;
};

void to_json(nlohmann::json& j, const DatasetSpec& s);
void from_json(const nlohmann::json& j, DatasetSpec& s);

/// Empty corpus, unreadable file, or a token outside the vocabulary.
class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TextSplits {
  std::vector<int> train, dev, test;
};

/// 90/5/5 split by position: train = floor(0.9 n), dev = floor(0.05 n), test
/// takes the remainder.
TextSplits split_corpus(std::span<const std::uint8_t> bytes);

/// First `max_bytes` bytes of a file.
std::vector<std::uint8_t> read_corpus(const std::filesystem::path& path, std::size_t max_bytes);

/// Deterministic English-like prose: a seeded syllable lexicon with Zipfian
/// word frequencies, per-word follower preferences, and sentence/paragraph
/// punctuation. Exactly `bytes` long.
std::vector<std::uint8_t> synthetic_corpus(std::size_t bytes, std::uint64_t seed);

struct CopySequence {
  std::vector<int> input;
  std::vector<int> target;  // -1 where no source token exists yet
};

CopySequence copy_sequence(std::size_t length, std::size_t vocab, std::size_t delay, std::mt19937_64& rng);

enum class ShapeKind { square = 0, cross = 1, disc = 2 };

struct ImageSample {
  Tensor image;  // [size x size x 1], values in about [0, 1] plus noise
  int label = 0;
};

ImageSample render_shape(ShapeKind kind, std::size_t size, double ci, double cj, double radius, double noise,
                         std::mt19937_64& rng);
std::vector<ImageSample> shapes_dataset(std::size_t count, std::size_t size, double noise, std::uint64_t seed);

struct Dataset {
  DatasetSpec spec;
  TextSplits text;
  std::vector<CopySequence> copy_dev;
  std::vector<ImageSample> images_train, images_dev, images_test;
};

/// `seq_len` sizes the copy task's held-out sequences.
Dataset make_dataset(const DatasetSpec& spec, std::size_t seq_len);

}  // namespace cpool
