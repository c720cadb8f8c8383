#pragma once

#include <stdexcept>
#include <string>

namespace sdream {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not fit together.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Class index or element index out of range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// API misuse, e.g. calling backward on a non-scalar.
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents. Carries enough context to locate the problem.
class ParseError : public IoError {
 public:
  using IoError::IoError;
};

/// Dataset contents that violate a precondition (e.g. an empty class).
class DataError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace sdream
