#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace structobs::cli {

/// Runs one command line (without the program name). Returns 0 on success,
/// 1 on runtime errors and 2 on usage or configuration errors.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace structobs::cli
