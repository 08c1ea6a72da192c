#pragma once

#include <stdexcept>
#include <string>

namespace rcalign {

// Base of every error thrown by the library. The CLI maps the subclasses
// onto stable exit codes (see exit_code()).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or dimension mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Integer index outside its valid range (embedding ids, symbol ids).
class IndexError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration value (config files, hyperparameters).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Out-of-domain argument value (e.g. a duration < 1).
class ValueError : public Error {
 public:
  using Error::Error;
};

// API misuse: non-scalar backward root, empty inputs, length mismatches.
class UsageError : public Error {
 public:
  using Error::Error;
};

// A recurrent state that violates its invariants, e.g. an unnormalized
// alignment fed back into a recursion.
class StateCorruptionError : public Error {
 public:
  using Error::Error;
};

// Operation requested on a mechanism that does not support it.
class CapabilityError : public Error {
 public:
  using Error::Error;
};

// Non-finite values detected during training.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed or inconsistent files.
class FormatError : public Error {
 public:
  using Error::Error;
};

class MagicError : public FormatError {
 public:
  using FormatError::FormatError;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedFileError : public FormatError {
 public:
  using FormatError::FormatError;
};

class ShapeMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

// Process exit codes: 0 success, 2 usage/config, 3 data error, 4 numeric abort.
inline int exit_code(const Error& e) {
  if (dynamic_cast<const NumericError*>(&e) != nullptr) return 4;
  if (dynamic_cast<const FormatError*>(&e) != nullptr) return 3;
  if (dynamic_cast<const IndexError*>(&e) != nullptr) return 3;
  return 2;
}

}  // namespace rcalign
