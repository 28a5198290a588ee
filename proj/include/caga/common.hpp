#pragma once

#include <stdexcept>
#include <string>

namespace caga {

inline constexpr const char* kVersion = "caga-0.1.0";

// Default experiment seed used everywhere unless overridden.
inline constexpr unsigned long long kDefaultSeed = 82;

// Thrown when tensor/layer shapes disagree.
class ShapeError : public std::runtime_error {
public:
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown when an operation's precondition is violated.
class ContractError : public std::runtime_error {
public:
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown on NaN/Inf propagation into ops that forbid it.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown on malformed config/input data.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown on file-system and parse failures.
class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace caga
