#pragma once

#include <stdexcept>
#include <string>

namespace uvx {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Incompatible or invalid tensor extents.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Non-finite values, division by zero, log of non-positive input.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration values or keys.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed or truncated files and other I/O failures.
class FormatError : public Error {
public:
    using Error::Error;
};

/// API misuse, e.g. calling backward on a non-scalar.
class ContractError : public Error {
public:
    using Error::Error;
};

} // namespace uvx
