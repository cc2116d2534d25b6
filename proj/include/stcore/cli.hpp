#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace stcore::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitVerifyFailed = 1;
inline constexpr int kExitUsage = 2;

/// Entry point of the `stcore` tool: train, eval, fuse, verify, energy,
/// gen-data. Returns the process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
/// Same, with args[0] taken as the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace stcore::cli
