#include "cpool/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

namespace cpool {

namespace {

constexpr std::size_t kMagicLen = sizeof(kCheckpointMagic) - 1;

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
  return v;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

const Tensor& Checkpoint::at(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw CheckpointError("checkpoint has no tensor '" + name + "'");
}

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& config, const NamedTensors& tensors) {
  nlohmann::json manifest = {{"format", kCheckpointMagic}, {"version", kCheckpointVersion}, {"config", config}};
  auto entries = nlohmann::json::array();
  std::string payload;
  std::set<std::string> seen;
  for (const auto& [name, t] : tensors) {
    if (!seen.insert(name).second) throw CheckpointError("duplicate tensor name '" + name + "'");
    const auto nbytes = t.numel() * sizeof(double);
    entries.push_back({{"name", name}, {"shape", t.shape()}, {"dtype", "f64"}, {"offset", payload.size()},
                       {"nbytes", nbytes}});
    for (double v : t.data()) put_u64(payload, std::bit_cast<std::uint64_t>(v));
  }
  manifest["tensors"] = std::move(entries);
  const auto text = manifest.dump();

  std::string bytes(kCheckpointMagic, kMagicLen);
  put_u64(bytes, text.size());
  bytes += text;
  bytes += payload;

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // Write to a sibling and rename so readers never observe a partial file.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < kMagicLen + 8 || std::memcmp(bytes.data(), kCheckpointMagic, kMagicLen) != 0)
    throw CheckpointError(path.string() + " is not a CPKT1 checkpoint");
  const auto mlen = get_u64(raw + kMagicLen);
  const auto payload_at = kMagicLen + 8 + mlen;
  if (mlen > bytes.size() || payload_at > bytes.size()) throw CheckpointError(path.string() + ": truncated manifest");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(kMagicLen + 8, mlen));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": bad manifest: " + e.what());
  }
  if (manifest.value("version", 0) != kCheckpointVersion)
    throw CheckpointError(path.string() + ": unsupported checkpoint version " + manifest.value("version", nlohmann::json()).dump());

  Checkpoint ck;
  ck.config = manifest.value("config", nlohmann::json::object());
  const auto payload_len = bytes.size() - payload_at;
  for (const auto& e : manifest.at("tensors")) {
    const auto name = e.at("name").get<std::string>();
    if (e.value("dtype", "") != "f64") throw CheckpointError("tensor '" + name + "' has unsupported dtype");
    const auto shape = e.at("shape").get<Shape>();
    const auto offset = e.at("offset").get<std::size_t>(), nbytes = e.at("nbytes").get<std::size_t>();
    if (nbytes != numel_of(shape) * sizeof(double) || offset > payload_len || nbytes > payload_len - offset)
      throw CheckpointError("tensor '" + name + "' lies outside the payload");
    std::vector<double> data(numel_of(shape));
    for (std::size_t i = 0; i < data.size(); ++i)
      data[i] = std::bit_cast<double>(get_u64(raw + payload_at + offset + i * sizeof(double)));
    ck.tensors.emplace_back(name, Tensor(shape, std::move(data)));
  }
  return ck;
}

std::string file_hash(const std::filesystem::path& path) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : read_file(path)) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace cpool
