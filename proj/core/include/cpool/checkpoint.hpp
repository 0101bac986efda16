#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpool/tensor.hpp"

namespace cpool {

/// Unreadable, truncated or inconsistent checkpoint file.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// On-disk layout:
///   "CPKT1"                       5 bytes
///   manifest length               uint64, little-endian
///   manifest                      UTF-8 JSON
///   payload                       f64 little-endian, tensors back to back
/// The manifest holds {"format","version","config","tensors":[{name, shape,
/// dtype, offset, nbytes}]}; offsets are relative to the payload start.
struct Checkpoint {
  nlohmann::json config;
  NamedTensors tensors;

  const Tensor& at(const std::string& name) const;
};

inline constexpr char kCheckpointMagic[] = "CPKT1";
inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& config, const NamedTensors& tensors);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// 64-bit FNV-1a of the file bytes, as 16 lowercase hex digits.
std::string file_hash(const std::filesystem::path& path);

}  // namespace cpool
