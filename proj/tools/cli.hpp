#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace it3d::cli {

// Exit codes shared by every subcommand.
inline constexpr int kOk = 0;
inline constexpr int kFailed = 1;  // gradcheck failures, unexpected errors
inline constexpr int kUsage = 2;
inline constexpr int kMissingInput = 3;
inline constexpr int kOracleFailure = 4;

/// Runs `it3d <args...>` (args exclude the program name). Results go to `out`,
/// logs and diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace it3d::cli
