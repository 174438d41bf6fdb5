#pragma once

#include <iosfwd>

namespace sonofield {

/// Exit codes: 0 success, 1 internal failure, 2 usage, 3 I/O or parse, 4
/// contract/config/numeric. Failures print one line "error: <category>: <message>"
/// to err.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

int exit_code_for(const class Error& error);

}  // namespace sonofield
