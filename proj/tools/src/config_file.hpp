#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "cpool/train.hpp"

namespace cpool::cli {

/// Malformed document, unknown key, wrong value kind, or a failed validate().
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Parses a YAML (or JSON) document into JSON. Quoted scalars stay strings;
/// plain scalars become null, bool, integer or float when they parse as such.
nlohmann::json parse_config_text(const std::string& text, const std::string& origin = "<config>");
nlohmann::json read_config_file(const std::filesystem::path& path);

/// Rejects keys the TrainConfig tree does not have and values of the wrong
/// kind, then builds and validates the config.
TrainConfig train_config_from_document(const nlohmann::json& doc);

/// The canonical form printed by `train --print-config`.
std::string print_config(const TrainConfig& cfg);

}  // namespace cpool::cli
