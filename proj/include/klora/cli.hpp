#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace klora::cli {

/// Runs the command line `args` (args[0] is the program name). Exit codes: 0 success,
/// 2 input or format errors, 1 internal errors.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace klora::cli
