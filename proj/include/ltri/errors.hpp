#pragma once

#include <stdexcept>
#include <string>

namespace ltri {

/// Malformed or inconsistent trace input (non-finite values, broken causality,
/// position gaps, dimension mismatches).
struct InvalidTrace : std::runtime_error {
    explicit InvalidTrace(const std::string& msg) : std::runtime_error("invalid trace: " + msg) {}
};

/// Bad configuration value or an unsatisfiable configuration request.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

/// Out-of-range span/token/block index.
struct IndexError : std::out_of_range {
    explicit IndexError(const std::string& msg) : std::out_of_range("index error: " + msg) {}
};

/// Violation of an internal invariant (duplicate block id, empty index on an
/// indexed tier).
struct InternalError : std::logic_error {
    explicit InternalError(const std::string& msg) : std::logic_error("internal error: " + msg) {}
};

/// Operation called in the wrong phase (decode before prefill finished, double
/// finish).
struct StateError : std::logic_error {
    explicit StateError(const std::string& msg) : std::logic_error("state error: " + msg) {}
};

} // namespace ltri
