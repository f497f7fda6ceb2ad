#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace tacood {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitVerification = 4;

// Runs one command line (without the program name) and returns the exit code.
// Subcommands: simulate, fuse, eval, gradcheck, train-toy, ablate.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace tacood
