// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace sella {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke an operation's precondition (shape rule, argument range).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

/// An index or id fell outside the table it addresses.
class LookupError : public Error {
 public:
  using Error::Error;
};

/// A computation produced NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed or empty input data.
class DataError : public Error {
 public:
  using Error::Error;
};

/// A metric is undefined for the given input (e.g. single-class labels).
class MetricError : public Error {
 public:
  using Error::Error;
};

/// A pipeline stage ran without the checkpoints it depends on.
class PrerequisiteError : public Error {
 public:
  using Error::Error;
};

/// A frozen parameter group changed during a stage.
class FreezeViolation : public Error {
 public:
  using Error::Error;
};

}  // namespace sella
