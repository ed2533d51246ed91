#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace congeal {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

// Entry point of the `congeal` tool. args[0] is the program name. Returns 0 on
// success, 2 for bad flags (usage on `err`), 1 for runtime failures (one line
// on `err`).
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, const char* const* argv);

}  // namespace congeal
