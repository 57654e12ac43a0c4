#pragma once

#include <stdexcept>
#include <string>

namespace realdiff {

// Base class for all errors raised by this library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes. Messages name both shapes involved.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Index or slice outside the valid range.
class BoundsError : public Error {
public:
    using Error::Error;
};

// NaN/inf encountered, or training diverged.
class NumericError : public Error {
public:
    using Error::Error;
};

// API misuse: non-scalar loss, tensor on the wrong tape, etc.
class ContractError : public Error {
public:
    using Error::Error;
};

// Invalid or inconsistent run configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Malformed input file.
class FormatError : public Error {
public:
    using Error::Error;
};

}  // namespace realdiff
