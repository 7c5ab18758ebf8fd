#pragma once

#include <iosfwd>

namespace tspeft {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitConfig = 3;

// Entry point behind the tspeft executable. Progress and errors go to
// `err`; usage/help text to `out`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace tspeft
