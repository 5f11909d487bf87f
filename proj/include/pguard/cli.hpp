#pragma once

#include <string>
#include <vector>

namespace pguard {

/// Runs one subcommand. Returns the process exit code: 0 success, 1 usage
/// error, 2 data/format error, 3 pipeline failure. Diagnostics go to
/// stderr; machine-readable results go to files or stdout only.
int dispatch(const std::vector<std::string>& args);

}  // namespace pguard
