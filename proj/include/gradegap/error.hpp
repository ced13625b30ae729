#pragma once

#include <stdexcept>
#include <string>

namespace gradegap {

// Input or configuration problems the caller can fix. The CLI maps these to
// exit code 1; anything else escaping a subcommand is an internal error.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
  virtual const char* kind() const noexcept { return "validation"; }
};

class SchemaError : public ValidationError {
 public:
  using ValidationError::ValidationError;
  const char* kind() const noexcept override { return "schema"; }
};

class DuplicateKeyError : public ValidationError {
 public:
  using ValidationError::ValidationError;
  const char* kind() const noexcept override { return "duplicate_key"; }
};

// Zero-variance cells, single-level regressors, collinear designs.
class DegenerateError : public ValidationError {
 public:
  using ValidationError::ValidationError;
  const char* kind() const noexcept override { return "degenerate"; }
};

class ConvergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace gradegap
