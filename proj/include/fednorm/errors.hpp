#pragma once

#include <stdexcept>
#include <string>

namespace fednorm {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

/// A normalization hit a vector it cannot normalize (zero norm or zero
/// variance with epsilon = 0).
class DegenerateInputError : public Error {
public:
    using Error::Error;
};

/// NaN/Inf produced or consumed where finite values are required.
class NumericError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed or truncated input file.
class FormatError : public Error {
public:
    using Error::Error;
};

}  // namespace fednorm
