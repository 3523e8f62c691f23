#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace emt {

/// Entry point of the `emt` tool. args excludes the program name. Returns the
/// process exit status (0 ok, 1 runtime failure, 2 usage or config error).
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace emt
