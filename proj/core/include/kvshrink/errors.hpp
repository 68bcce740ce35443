#pragma once

#include <stdexcept>
#include <string>

namespace kvshrink {

// Malformed or truncated file on disk (bad magic, version, sizes).
class FormatError : public std::runtime_error {
public:
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Artifacts that do not belong together (e.g. Gram stats collected
// from a different checkpoint than the one being compressed).
class ConsistencyError : public std::runtime_error {
public:
    explicit ConsistencyError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerical failure: divergent loss, eigensolver non-convergence, NaN.
class NumericalError : public std::runtime_error {
public:
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

// A bounded resource is exhausted (KV cache at max_seq_len).
class CapacityError : public std::runtime_error {
public:
    explicit CapacityError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace kvshrink
