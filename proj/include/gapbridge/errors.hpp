#pragma once

#include <stdexcept>
#include <string>

namespace gapbridge {

/// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Contract violations on otherwise well-formed input. The CLI maps these to
// exit code 1.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class DegenerateInputError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class InsufficientDataError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class PairingError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class NotPositiveDefiniteError : public ValidationError {
 public:
  NotPositiveDefiniteError(const std::string& what, long pivot)
      : ValidationError(what), pivot_(pivot) {}
  long pivot() const noexcept { return pivot_; }

 private:
  long pivot_;
};

/// Non-finite value encountered during training.
class DivergenceError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Storage problems. The CLI maps these to exit code 2.
class IoError : public Error {
 public:
  using Error::Error;
};

class FormatError : public IoError {
 public:
  using IoError::IoError;
};

class CorruptionError : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace gapbridge
