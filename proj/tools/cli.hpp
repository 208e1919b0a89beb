#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace mtlforge::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitIo = 2;
inline constexpr int kExitUsage = 64;

/// Runs one subcommand. `args` excludes the program name. Each successful run
/// prints "run directory: <path>" as its last line on `out`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mtlforge::cli
