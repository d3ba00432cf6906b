#pragma once

#include <stdexcept>
#include <string>

namespace voxseg {

/// Base class for all voxseg failures.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor/volume shapes do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyperparameter, option, or config file content.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Unusable input data (bad labels, unreadable files, malformed payloads).
class DataError : public Error {
 public:
  using Error::Error;
};

/// File content that fails structural validation (magic, datatype, truncation).
class ParseError : public DataError {
 public:
  using DataError::DataError;
};

/// Missing or inconsistent runtime state (e.g. gradients not populated).
class StateError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint files that cannot be applied (version or architecture mismatch).
class CheckpointError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values where the training loop cannot continue.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace voxseg
