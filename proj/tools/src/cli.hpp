#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace cpool::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitConfig = 3;

/// Dispatches `train | eval | gradcheck | ablate | inspect`. Failures print a
/// single `error: <class>: <message>` line to `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cpool::cli
