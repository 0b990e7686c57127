#pragma once

#include <stdexcept>
#include <string>

namespace fvi {

/// Base of all library errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad input: shape mismatch, out-of-domain argument, malformed file.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Numerical failures map to CLI exit code 2.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class NonPositiveDefinite : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class NonFinite : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

}  // namespace fvi
