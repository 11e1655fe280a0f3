#pragma once

#include <stdexcept>
#include <string>

namespace layerswap {

/// Root of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shapes that cannot be combined.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// NaN or Inf produced by an operation.
class NumericError : public Error {
public:
    using Error::Error;
};

/// A documented precondition was violated by the caller.
class ContractError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

/// Checkpoint/dataset file could not be decoded. `field()` names the part of the
/// file that failed validation ("magic", "version", "payload", "crc32", ...).
class LoadError : public Error {
public:
    LoadError(std::string field, const std::string& what)
        : Error(what), field_(std::move(field)) {}

    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

/// Filesystem failure (missing file, unwritable directory).
class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace layerswap
