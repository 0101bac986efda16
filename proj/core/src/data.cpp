#include "cpool/data.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace cpool {

std::string_view to_string(TaskKind k) {
  switch (k) {
    case TaskKind::text: return "text";
    case TaskKind::copy: return "copy";
    case TaskKind::shapes: return "shapes";
  }
  return "?";
}

TaskKind parse_task_kind(std::string_view s) {
  if (s == "text") return TaskKind::text;
  if (s == "copy") return TaskKind::copy;
  if (s == "shapes") return TaskKind::shapes;
  throw std::invalid_argument("unknown task '" + std::string(s) + "'");
}

void DatasetSpec::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("data: " + m); };
  if (vocab_size == 0 || vocab_size > 256) fail("vocab_size must be in [1, 256]");
  if (task == TaskKind::text && path.empty() && synthetic_bytes < 20) fail("synthetic_bytes must be >= 20");
  if (task == TaskKind::text && max_bytes == 0) fail("max_bytes must be >= 1");
  if (copy_vocab < 2) fail("copy_vocab must be >= 2");
  if (dev_sequences == 0) fail("dev_sequences must be >= 1");
  if (image_size < 8) fail("image_size must be >= 8");
  if (train_images == 0 || dev_images == 0) fail("train_images and dev_images must be >= 1");
  if (!(noise >= 0.0)) fail("noise must be >= 0");
}

void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = {{"task", std::string(to_string(s.task))},
       {"path", s.path},
       {"max_bytes", s.max_bytes},
       {"synthetic_bytes", s.synthetic_bytes},
       {"vocab_size", s.vocab_size},
       {"copy_vocab", s.copy_vocab},
       {"copy_delay", s.copy_delay},
       {"dev_sequences", s.dev_sequences},
       {"image_size", s.image_size},
       {"train_images", s.train_images},
       {"dev_images", s.dev_images},
       {"test_images", s.test_images},
       {"noise", s.noise},
       {"data_seed", s.data_seed}};
}

void from_json(const nlohmann::json& j, DatasetSpec& s) {
  s = DatasetSpec{};
  if (j.contains("task")) s.task = parse_task_kind(j.at("task").get<std::string>());
  s.path = j.value("path", s.path);
  s.max_bytes = j.value("max_bytes", s.max_bytes);
  s.synthetic_bytes = j.value("synthetic_bytes", s.synthetic_bytes);
  s.vocab_size = j.value("vocab_size", s.vocab_size);
  s.copy_vocab = j.value("copy_vocab", s.copy_vocab);
  s.copy_delay = j.value("copy_delay", s.copy_delay);
  s.dev_sequences = j.value("dev_sequences", s.dev_sequences);
  s.image_size = j.value("image_size", s.image_size);
  s.train_images = j.value("train_images", s.train_images);
  s.dev_images = j.value("dev_images", s.dev_images);
  s.test_images = j.value("test_images", s.test_images);
  s.noise = j.value("noise", s.noise);
  s.data_seed = j.value("data_seed", s.data_seed);
}

TextSplits split_corpus(std::span<const std::uint8_t> bytes) {
  const auto n = bytes.size();
  const auto n_train = n * 90 / 100, n_dev = n * 5 / 100;
  TextSplits s;
  s.train.assign(bytes.begin(), bytes.begin() + std::ptrdiff_t(n_train));
  s.dev.assign(bytes.begin() + std::ptrdiff_t(n_train), bytes.begin() + std::ptrdiff_t(n_train + n_dev));
  s.test.assign(bytes.begin() + std::ptrdiff_t(n_train + n_dev), bytes.end());
  return s;
}

std::vector<std::uint8_t> read_corpus(const std::filesystem::path& path, std::size_t max_bytes) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot read corpus " + path.string());
  std::vector<std::uint8_t> out;
  out.reserve(std::min<std::size_t>(max_bytes, 1 << 20));
  for (auto it = std::istreambuf_iterator<char>(in); it != std::istreambuf_iterator<char>() && out.size() < max_bytes;
       ++it)
    out.push_back(static_cast<std::uint8_t>(*it));
  if (out.empty()) throw DatasetError("corpus " + path.string() + " is empty");
  return out;
}

std::vector<std::uint8_t> synthetic_corpus(std::size_t bytes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  static constexpr std::string_view onsets[] = {"b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r",
                                                "s", "t", "v", "w", "th", "st", "br", "tr", "ch", "sh", "pl", ""};
  static constexpr std::string_view nuclei[] = {"a", "e", "i", "o", "u", "ea", "ou", "ai", "io", "y"};
  static constexpr std::string_view codas[] = {"", "", "", "n", "r", "s", "t", "l", "nd", "st", "ng", "m"};
  constexpr std::size_t lexicon = 2000, followers = 6;

  std::vector<std::string> words(lexicon);
  std::uniform_int_distribution<std::size_t> on(0, std::size(onsets) - 1), nu(0, std::size(nuclei) - 1),
      co(0, std::size(codas) - 1), syl(1, 3);
  for (auto& w : words) {
    for (std::size_t s = syl(rng); s > 0; --s) (w += onsets[on(rng)]) += nuclei[nu(rng)];
    w += codas[co(rng)];
  }
  // Zipf(1) over lexicon ranks.
  std::vector<double> zipf(lexicon);
  for (std::size_t r = 0; r < lexicon; ++r) zipf[r] = 1.0 / double(r + 1);
  std::discrete_distribution<std::size_t> pick(zipf.begin(), zipf.end());
  std::vector<std::array<std::size_t, followers>> next(lexicon);
  for (auto& f : next)
    for (auto& v : f) v = pick(rng);

  std::bernoulli_distribution follow(0.6), comma(0.08);
  std::uniform_int_distribution<int> sentence_len(4, 14), paragraph_len(3, 7), end_mark(0, 9);
  std::uniform_int_distribution<std::size_t> fpick(0, followers - 1);

  std::string text;
  text.reserve(bytes + 64);
  std::size_t prev = pick(rng);
  while (text.size() < bytes) {
    for (int s = paragraph_len(rng); s > 0 && text.size() < bytes; --s) {
      const int len = sentence_len(rng);
      for (int i = 0; i < len; ++i) {
        const std::size_t w = follow(rng) ? next[prev][fpick(rng)] : pick(rng);
        std::string word = words[w];
        if (i == 0) word[0] = char(std::toupper(static_cast<unsigned char>(word[0])));
        text += word;
        if (i + 1 < len) text += comma(rng) ? ", " : " ";
        prev = w;
      }
      const int m = end_mark(rng);
      text += m == 0 ? "? " : m == 1 ? "! " : ". ";
    }
    text += "\n\n";
  }
  text.resize(bytes);
  return {text.begin(), text.end()};
}

CopySequence copy_sequence(std::size_t length, std::size_t vocab, std::size_t delay, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> tok(0, int(vocab) - 1);
  CopySequence s;
  s.input.resize(length);
  s.target.assign(length, -1);
  for (auto& t : s.input) t = tok(rng);
  for (std::size_t t = delay; t < length; ++t) s.target[t] = s.input[t - delay];
  return s;
}

ImageSample render_shape(ShapeKind kind, std::size_t size, double ci, double cj, double radius, double noise,
                         std::mt19937_64& rng) {
  std::normal_distribution<double> jitter(0.0, 1.0);
  const double bar = std::max(0.75, radius / 3.0);
  std::vector<double> px(size * size);
  for (std::size_t i = 0; i < size; ++i)
    for (std::size_t j = 0; j < size; ++j) {
      const double di = std::abs(double(i) - ci), dj = std::abs(double(j) - cj);
      bool on = false;
      switch (kind) {
        case ShapeKind::square: on = di <= radius && dj <= radius; break;
        case ShapeKind::cross: on = (di <= bar && dj <= radius) || (dj <= bar && di <= radius); break;
        case ShapeKind::disc: on = di * di + dj * dj <= radius * radius; break;
      }
      px[i * size + j] = (on ? 1.0 : 0.0) + (noise > 0.0 ? noise * jitter(rng) : 0.0);
    }
  return {Tensor({size, size, 1}, std::move(px)), static_cast<int>(kind)};
}

std::vector<ImageSample> shapes_dataset(std::size_t count, std::size_t size, double noise, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> kind(0, 2);
  const double max_radius = std::max(2.5, double(size) / 3.0);
  std::uniform_real_distribution<double> radius(2.0, max_radius), unit(0.0, 1.0);
  std::vector<ImageSample> out;
  out.reserve(count);
  for (std::size_t n = 0; n < count; ++n) {
    const auto k = static_cast<ShapeKind>(kind(rng));
    const double r = radius(rng);
    const double lo = r, hi = double(size) - 1.0 - r;
    const double ci = lo + (hi - lo) * unit(rng), cj = lo + (hi - lo) * unit(rng);
    out.push_back(render_shape(k, size, ci, cj, r, noise, rng));
  }
  return out;
}

Dataset make_dataset(const DatasetSpec& spec, std::size_t seq_len) {
  spec.validate();
  Dataset d;
  d.spec = spec;
  switch (spec.task) {
    case TaskKind::text: {
      const auto bytes = spec.path.empty() ? synthetic_corpus(spec.synthetic_bytes, spec.data_seed)
                                           : read_corpus(spec.path, spec.max_bytes);
      if (bytes.empty()) throw DatasetError("corpus is empty");
      for (auto b : bytes)
        if (b >= spec.vocab_size)
          throw DatasetError("byte " + std::to_string(b) + " overflows vocabulary of " + std::to_string(spec.vocab_size));
      d.text = split_corpus(bytes);
      if (d.text.train.size() < seq_len + 1 || d.text.dev.size() < 2)
        throw DatasetError("corpus of " + std::to_string(bytes.size()) + " bytes is too small for seq_len " +
                           std::to_string(seq_len));
      break;
    }
    case TaskKind::copy: {
      if (spec.copy_vocab > spec.vocab_size)
        throw DatasetError("copy vocabulary " + std::to_string(spec.copy_vocab) + " overflows model vocabulary " +
                           std::to_string(spec.vocab_size));
      if (spec.copy_delay >= seq_len) throw DatasetError("copy delay must be shorter than seq_len");
      std::mt19937_64 rng(spec.data_seed);
      for (std::size_t i = 0; i < spec.dev_sequences; ++i)
        d.copy_dev.push_back(copy_sequence(seq_len, spec.copy_vocab, spec.copy_delay, rng));
      break;
    }
    case TaskKind::shapes:
      d.images_train = shapes_dataset(spec.train_images, spec.image_size, spec.noise, spec.data_seed);
      d.images_dev = shapes_dataset(spec.dev_images, spec.image_size, spec.noise, spec.data_seed + 1);
      d.images_test = shapes_dataset(spec.test_images, spec.image_size, spec.noise, spec.data_seed + 2);
      break;
  }
  return d;
}

}  // namespace cpool
