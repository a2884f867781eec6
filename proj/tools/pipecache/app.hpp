#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace pipecache::app {

enum ExitCode : int {
  kOk = 0,
  kConfigError = 2,
  kDataError = 3,
  kRuntimeError = 4,
};

/// Runs the command line `args` (args[0] is the program name), writing
/// results to `out` and diagnostics to `err`. Returns the exit code.
int main(const std::vector<std::string>& args, std::ostream& out,
         std::ostream& err);

}  // namespace pipecache::app
