#pragma once

// The nqe command line. Exit codes: 0 success, 1 usage, 2 validation, 3 runtime fault.

#include <iosfwd>
#include <string>
#include <vector>

namespace nqe {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitFault = 3;

/// Build version recorded in manifests.
const char* version();

/// args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace nqe
