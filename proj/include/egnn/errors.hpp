#pragma once

#include <stdexcept>
#include <string>

namespace egnn {

/// Tensor shapes do not conform for the requested operation.
class ShapeError : public std::runtime_error {
public:
    explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

/// A numerical guard tripped: NaN/Inf values, denominator underflow, etc.
class NumericsError : public std::runtime_error {
public:
    explicit NumericsError(const std::string& what) : std::runtime_error(what) {}
};

/// Invalid configuration: bad dimensions, unknown keys, incompatible settings.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Malformed or inconsistent data files (datasets, checkpoints).
class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

} // namespace egnn
