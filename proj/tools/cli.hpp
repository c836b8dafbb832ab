#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace gtm::cli {

/// Runs one command line (without the program name). Machine-readable JSON
/// goes to `out`, everything else to `err`. Returns the process exit code:
/// 0 success, 2 usage or input error, 3 runtime or numerical failure.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace gtm::cli
