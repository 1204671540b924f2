#pragma once

#include <string>
#include <vector>

namespace cpf {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

// Entry point of the command-line tool. `args` excludes the program name.
// Failures print one JSON line {"error", "kind"[, "stage"]} on stderr.
int run_command(const std::vector<std::string>& args);

}  // namespace cpf
