#include "kvshrink/log.hpp"

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <mutex>

namespace kvshrink {

namespace {

std::atomic<int> g_level{-1}; // -1: not yet read from the environment
std::mutex g_write_mutex;

LogLevel level_from_env() {
    const char* env = std::getenv("KVSHRINK_LOG");
    if (env == nullptr) {
        return LogLevel::error;
    }
    std::string s(env);
    if (s == "debug") return LogLevel::debug;
    if (s == "info") return LogLevel::info;
    return LogLevel::error;
}

const char* level_name(LogLevel level) {
    switch (level) {
    case LogLevel::error: return "error";
    case LogLevel::info: return "info";
    case LogLevel::debug: return "debug";
    }
    return "error";
}

} // namespace

LogLevel log_level() {
    int v = g_level.load(std::memory_order_relaxed);
    if (v < 0) {
        v = static_cast<int>(level_from_env());
        g_level.store(v, std::memory_order_relaxed);
    }
    return static_cast<LogLevel>(v);
}

void set_log_level(LogLevel level) {
    g_level.store(static_cast<int>(level), std::memory_order_relaxed);
}

void log_message(LogLevel level, const std::string& message) {
    if (static_cast<int>(level) > static_cast<int>(log_level())) {
        return;
    }
    std::lock_guard<std::mutex> lock(g_write_mutex);
    std::fprintf(stderr, "[%s] %s\n", level_name(level), message.c_str());
}

void log_error(const std::string& message) {
    log_message(LogLevel::error, message);
}

void log_info(const std::string& message) {
    log_message(LogLevel::info, message);
}

void log_debug(const std::string& message) {
    log_message(LogLevel::debug, message);
}

} // namespace kvshrink
