#pragma once

#include <stdexcept>
#include <string>

namespace wepe {

/// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad input supplied by the caller: malformed file, unknown id, out-of-range
/// argument. The CLI maps these to exit code 1.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A file that should exist does not.
class MissingFileError : public ValidationError {
 public:
  explicit MissingFileError(const std::string& path)
      : ValidationError("file not found: " + path), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

/// A checkpoint tensor whose shape disagrees with the architecture.
class ShapeMismatchError : public ValidationError {
 public:
  ShapeMismatchError(const std::string& tensor, const std::string& detail)
      : ValidationError("shape mismatch for tensor '" + tensor + "': " + detail), tensor_(tensor) {}
  const std::string& tensor() const noexcept { return tensor_; }

 private:
  std::string tensor_;
};

/// Failure while running a computation (divergence, codec failure, I/O).
/// The CLI maps these to exit code 2.
class RuntimeFailure : public Error {
 public:
  using Error::Error;
};

}  // namespace wepe
