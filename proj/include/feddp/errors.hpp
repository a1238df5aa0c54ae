#pragma once

#include <stdexcept>
#include <string>

namespace feddp {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Shape, name, or ordering mismatch between structures that must agree.
class StructureError : public Error {
public:
    using Error::Error;
};

/// A NaN or Inf appeared where only finite values are valid.
class NumericError : public Error {
public:
    using Error::Error;
};

/// An API contract was violated (e.g. backward on a consumed tape).
class UsageError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration or an impossible requested setup.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// File could not be read, or its contents violate the expected format.
class IoError : public Error {
public:
    using Error::Error;
};

} // namespace feddp
