#pragma once

#include <stdexcept>
#include <string>

namespace kelixpq {

/// Base of every error raised by the library. `exit_code()` is what the CLI
/// returns when the error escapes a subcommand.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 1; }
};

/// Bad arguments or violated preconditions (exit 1).
class UsageError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 1; }
};

/// Malformed, truncated or inconsistent data on disk (exit 2).
class FormatError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

/// File does not start with the expected magic bytes.
class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// NaN/Inf, non-scalar losses and similar numeric failures (exit 3).
class NumericError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

}  // namespace kelixpq
