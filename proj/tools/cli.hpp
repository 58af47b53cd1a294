#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace gradtrace::cli {

// Runs the command line `args` (args[0] is the program name) and returns
// the process exit code: 0 success, 2 usage/config, 3 data, 4 I/O,
// 5 internal.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace gradtrace::cli
