#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace dgb {

/// Runs the `dgbench` command line. `args` excludes the program name.
///
/// Returns 0 on success, 1 when a command fails and 2 for usage errors
/// (unknown subcommand or flag, missing required option).
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dgb
