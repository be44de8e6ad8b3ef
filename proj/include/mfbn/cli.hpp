#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mfbn::cli {

// Exit codes shared by every subcommand.
constexpr int kOk = 0;
constexpr int kStatisticalFailure = 1;
constexpr int kUsageError = 2;

// Entry point of the `mfbn` tool. `args` excludes the program name. Data goes
// to `out` (and to files under --out), progress and diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mfbn::cli
