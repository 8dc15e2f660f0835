#pragma once

#include <iosfwd>
#include <span>
#include <string>

namespace wepe::cli {

/// Runs one `wepe` subcommand. Arguments exclude the program name.
/// Returns 0 on success, 1 on a validation error (bad flags, missing files,
/// malformed inputs) and 2 on a runtime failure.
int run_command(std::span<const std::string> args, std::ostream& out, std::ostream& err);

int run_command(int argc, char** argv);

}  // namespace wepe::cli
