#include "config_file.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include <yaml-cpp/yaml.h>

namespace cpool::cli {

namespace {

nlohmann::json scalar_to_json(const YAML::Node& node) {
  const auto& text = node.Scalar();
  if (node.Tag() == "!") return text;  // quoted
  if (text == "true" || text == "True" || text == "TRUE") return true;
  if (text == "false" || text == "False" || text == "FALSE") return false;
  if (text == "null" || text == "Null" || text == "NULL" || text == "~") return nullptr;
  const char* first = text.data();
  const char* last = first + text.size();
  if (!text.empty() && text.front() == '+') ++first;
  if (text.find_first_of(".eE") == std::string::npos) {
    if (std::uint64_t u; text.front() != '-' && std::from_chars(first, last, u).ptr == last && first != last) return u;
    if (std::int64_t i; std::from_chars(first, last, i).ptr == last && first != last) return i;
  }
  if (double d; first != last && std::from_chars(first, last, d).ptr == last && std::isfinite(d)) return d;
  return text;
}

nlohmann::json yaml_to_json(const YAML::Node& node) {
  switch (node.Type()) {
    case YAML::NodeType::Null:
    case YAML::NodeType::Undefined:
      return nullptr;
    case YAML::NodeType::Scalar:
      return scalar_to_json(node);
    case YAML::NodeType::Sequence: {
      auto out = nlohmann::json::array();
      for (const auto& item : node) out.push_back(yaml_to_json(item));
      return out;
    }
    case YAML::NodeType::Map: {
      auto out = nlohmann::json::object();
      for (const auto& kv : node) {
        const auto key = kv.first.as<std::string>();
        if (out.contains(key)) throw ConfigError("duplicate key '" + key + "'");
        out[key] = yaml_to_json(kv.second);
      }
      return out;
    }
  }
  return nullptr;
}

// Every key and value kind a config document may contain. Null leaves accept
// any scalar (optional numbers); object leaves also accept null (disabled CP).
nlohmann::json schema() {
  TrainConfig full;
  full.transformer.cp = ContextPoolConfig{};
  auto s = nlohmann::json(full);
  s["transformer"]["cp_layers"] = nlohmann::json::array({0});
  return s;
}

std::string kind_of(const nlohmann::json& v) {
  if (v.is_object()) return "table";
  if (v.is_array()) return "list";
  if (v.is_string()) return "string";
  if (v.is_boolean()) return "bool";
  if (v.is_number_integer() || v.is_number_unsigned()) return "integer";
  if (v.is_number_float()) return "float";
  return "null";
}

void check(const nlohmann::json& value, const nlohmann::json& expected, const std::string& path) {
  const auto where = path.empty() ? std::string("document") : "'" + path + "'";
  if (expected.is_null()) {
    if (value.is_object() || value.is_array()) throw ConfigError(where + " must be a scalar");
    return;
  }
  if (expected.is_object()) {
    if (value.is_null() && !path.empty()) return;
    if (!value.is_object()) throw ConfigError(where + " must be a table, got " + kind_of(value));
    for (const auto& [key, v] : value.items()) {
      const auto sub = path.empty() ? key : path + "." + key;
      if (!expected.contains(key)) throw ConfigError("unknown key '" + sub + "'");
      check(v, expected.at(key), sub);
    }
    return;
  }
  if (expected.is_array()) {
    if (!value.is_array()) throw ConfigError(where + " must be a list, got " + kind_of(value));
    for (std::size_t i = 0; i < value.size(); ++i)
      check(value[i], expected.empty() ? nlohmann::json() : expected[0], path + "[" + std::to_string(i) + "]");
    return;
  }
  if (expected.is_boolean() && !value.is_boolean()) throw ConfigError(where + " must be a bool, got " + kind_of(value));
  if (expected.is_string() && !value.is_string())
    throw ConfigError(where + " must be a string, got " + kind_of(value));
  if (expected.is_number_unsigned() || expected.is_number_integer()) {
    if (!value.is_number_unsigned()) throw ConfigError(where + " must be a non-negative integer, got " + kind_of(value));
  }
  if (expected.is_number_float() && !value.is_number()) throw ConfigError(where + " must be a number, got " + kind_of(value));
}

}  // namespace

nlohmann::json parse_config_text(const std::string& text, const std::string& origin) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  auto doc = yaml_to_json(root);
  if (doc.is_null()) doc = nlohmann::json::object();
  return doc;
}

nlohmann::json read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config_text(text.str(), path.string());
}

TrainConfig train_config_from_document(const nlohmann::json& doc) {
  check(doc, schema(), "");
  TrainConfig cfg;
  try {
    cfg = doc.get<TrainConfig>();
    cfg.validate();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

std::string print_config(const TrainConfig& cfg) { return nlohmann::json(cfg).dump(2) + "\n"; }

}  // namespace cpool::cli
