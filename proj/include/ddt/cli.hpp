#pragma once

#include <iostream>
#include <string>
#include <vector>

namespace ddt::cli {

/// Process exit statuses.
enum ExitCode : int {
    kOk = 0,
    kRuntimeError = 1,  // I/O, format and training failures
    kUsageError = 2,    // unknown subcommand or flag, missing argument
    kConfigError = 3,   // invalid configuration value
};

/// Runs one `ddt` command. `args` holds argv including the program name.
/// Structured log records go to `out`, diagnostics to `err`.
int dispatch(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr);

}  // namespace ddt::cli
