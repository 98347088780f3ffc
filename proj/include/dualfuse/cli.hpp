#pragma once

#include <iostream>

namespace dualfuse {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitFailure = 2;

// Subcommands: synth, train, fuse, eval-fusion, eval-detect, gradcheck.
// Returns 0 on success, 1 on usage errors and 2 on runtime failures.
int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr);

}  // namespace dualfuse
