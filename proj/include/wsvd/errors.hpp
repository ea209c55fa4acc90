#pragma once

#include <stdexcept>
#include <string>

namespace wsvd {

/// Base class for all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Dimension or state precondition violated (bad shapes, empty caches, rank out of range).
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

/// Numeric failure: non-convergence, non-finite values, singular systems.
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

/// Invalid configuration supplied by the caller or a config file.
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

/// Filesystem / serialization problems.
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

} // namespace wsvd
