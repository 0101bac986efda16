#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace cpool {

struct GradSuiteEntry {
  std::string module;
  std::string op;
  std::size_t instance = 0;
  double max_rel_error = 0.0;
};

struct GradSuiteReport {
  std::vector<GradSuiteEntry> entries;
  double max_rel_error = 0.0;
  /// Entry with the largest error; requires a non-empty report.
  const GradSuiteEntry& worst() const;
};

/// "ops", "contextpool", "attention", "convnet".
const std::vector<std::string>& grad_suite_modules();

/// Finite-difference checks (eps 1e-5, float64) of every differentiable op of
/// `module` (or of every module for "all") on `instances` random inputs with
/// sequence lengths <= 8 and widths <= 6. Throws std::invalid_argument for an
/// unknown module.
GradSuiteReport run_grad_suite(const std::string& module, std::uint64_t seed, std::size_t instances = 20);

}  // namespace cpool
