#pragma once

#include <stdexcept>
#include <string>

namespace bgn {

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape disagreement between operands.
class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// NaN/Inf produced by a forward op, nonpositive variance, etc.
class NumericError : public Error {
public:
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

// Malformed CSV, schema mismatch, bad checkpoint, degenerate dataset.
class DataError : public Error {
public:
    explicit DataError(const std::string& msg) : Error(msg) {}
};

// Invalid configuration value or unknown config key.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Divergence or other unrecoverable failure inside a training loop.
class TrainingError : public Error {
public:
    explicit TrainingError(const std::string& msg) : Error(msg) {}
};

}  // namespace bgn
