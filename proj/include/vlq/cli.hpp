#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace vlq {

enum ExitCode : int { kExitOk = 0, kExitUsage = 2, kExitNumerical = 3 };

// Entry point shared by the `vlq` tool and the CLI tests.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace vlq
