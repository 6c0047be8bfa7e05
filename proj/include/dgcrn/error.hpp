#pragma once

#include <stdexcept>
#include <string>

namespace dgcrn {

// Root of every library error. The CLI maps NumericError to exit code 2 and
// everything else to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not conform.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid or inconsistent configuration (missing dynamic graph, bad split
// ratios, empty split, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Caller broke a documented precondition (P == 0, horizon out of range, ...).
class PreconditionError : public Error {
 public:
  using Error::Error;
};

// Input data cannot support the requested computation (zero variance,
// all-missing node, zero-sum row).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf appeared where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// The finite-difference oracle produced a non-finite value.
class OracleError : public NumericError {
 public:
  using NumericError::NumericError;
};

// File could not be read, written or parsed.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace dgcrn
