#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace kvshrink {

/// Runs the full command-line interface in-process. `args` excludes the
/// program name. Returns the process exit code: 0 success, 1 usage error,
/// 2 validation/format/consistency error, 3 numerical failure.
int cli_run(const std::vector<std::string>& args, std::ostream& out,
            std::ostream& err);

} // namespace kvshrink
