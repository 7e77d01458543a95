#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace unionret::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1; // bad flags, invalid data, failed checks
inline constexpr int kExitIo = 2;         // missing files, malformed file formats

// Runs one subcommand. `args` excludes the program name.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace unionret::cli
