#pragma once

#include <stdexcept>
#include <string>

namespace covifex {

// Base for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Input violates a documented contract (bad manifest row, NaN feature,
// degenerate labels, width mismatch, ...). CLI exit code 2.
class ValidationError : public Error {
public:
    using Error::Error;
};

// File missing, unreadable, truncated or corrupt. CLI exit code 3.
class IoError : public Error {
public:
    using Error::Error;
};

// Persisted container that parses but is not acceptable (version, magic,
// checksum). Treated as an I/O failure by the CLI.
class FormatError : public IoError {
public:
    using IoError::IoError;
};

} // namespace covifex
