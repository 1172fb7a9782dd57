#pragma once

#include <stdexcept>
#include <string>

namespace lplab {

// Base class for everything this library throws on purpose.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Incompatible tensor shapes.
class DimensionError : public Error {
public:
    explicit DimensionError(const std::string& msg) : Error("dimension error: " + msg) {}
};

// API misuse: missing gradients, non-scalar loss, bad labels, ...
class UsageError : public Error {
public:
    explicit UsageError(const std::string& msg) : Error("usage error: " + msg) {}
};

// Bad configuration value or file.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error("config error: " + msg) {}
};

// A state invariant would be violated (e.g. reviving a pruned weight).
class InvariantError : public Error {
public:
    explicit InvariantError(const std::string& msg) : Error("invariant error: " + msg) {}
};

// Malformed checkpoint or report file.
class FormatError : public Error {
public:
    explicit FormatError(const std::string& msg) : Error("format error: " + msg) {}
};

// NaN/Inf escaped a numeric operation.
class NumericError : public Error {
public:
    explicit NumericError(const std::string& msg) : Error("numeric error: " + msg) {}
};

} // namespace lplab
