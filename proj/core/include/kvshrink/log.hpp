#pragma once

#include <string>

namespace kvshrink {

enum class LogLevel { error = 0, info = 1, debug = 2 };

/// Current level, read once from KVSHRINK_LOG (error|info|debug) on first
/// use; unset or unrecognized values mean `error`.
LogLevel log_level();

/// Overrides the level for this process (tests, CLI flags).
void set_log_level(LogLevel level);

/// Writes "[level] message\n" to stderr when `level` is enabled.
void log_message(LogLevel level, const std::string& message);

void log_error(const std::string& message);
void log_info(const std::string& message);
void log_debug(const std::string& message);

} // namespace kvshrink
