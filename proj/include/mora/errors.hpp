#pragma once

#include <stdexcept>
#include <string>

namespace mora {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke a documented precondition (shape mismatch, bad index, ...).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

/// A numeric parameter is out of its admissible range.
class ParameterError : public ContractViolation {
 public:
  using ContractViolation::ContractViolation;
};

/// A forward value became non-finite.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Unrecognised file (bad magic string, unparsable content).
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

/// File parses but its contents disagree with its declared header.
class SchemaError : public IoError {
 public:
  using IoError::IoError;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// The attack was handed an input the defense already misclassifies.
class MisclassifiedInput : public ContractViolation {
 public:
  using ContractViolation::ContractViolation;
};

/// Exhaustive search refused because the grid would be too large.
class ComplexityError : public ContractViolation {
 public:
  using ContractViolation::ContractViolation;
};

}  // namespace mora
