#pragma once

#include <stdexcept>
#include <string>

namespace mbsde {

/// Base of every error raised by the library. The CLI maps all of these to
/// exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Requested problem size exceeds a memory or node-count cap.
class ResourceError : public Error {
 public:
  using Error::Error;
};

/// f cannot be written as z.g(z) with continuous g (f(0) != 0 or f not
/// differentiable at 0).
class NotRepresentableError : public Error {
 public:
  using Error::Error;
};

/// A one-step density multiplier is nonpositive.
class InvalidDensityError : public Error {
 public:
  using Error::Error;
};

/// An input violates a structural contract (e.g. a non-martingale passed to
/// the representation operator).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Regression design matrix is singular or the basis is too large.
class BasisError : public Error {
 public:
  using Error::Error;
};

/// Importance weights degenerated (effective sample size collapse).
class ImportanceWeightError : public Error {
 public:
  using Error::Error;
};

/// Malformed or schema-violating configuration document.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace mbsde
