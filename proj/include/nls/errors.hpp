#pragma once

#include <stdexcept>
#include <string>

namespace nls {

/// Invalid configuration: bad hyperparameter, incompatible layer widths,
/// malformed config file. Maps to CLI exit code 2.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Invalid runtime input: dimension mismatch, malformed data file.
class InputError : public std::runtime_error {
public:
    explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Non-finite value produced where the contract requires finite arithmetic.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace nls
