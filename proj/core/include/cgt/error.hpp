#pragma once

#include <stdexcept>
#include <string>

namespace cgt {

/// Process exit codes used by the command-line tool. Each error type below
/// maps onto exactly one of them.
enum class ExitCode : int {
  kOk = 0,
  kValidation = 2,
  kMissingArtifact = 3,
  kNumerical = 4,
};

class Error : public std::runtime_error {
 public:
  Error(ExitCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

/// Malformed input, violated precondition, or inconsistent configuration.
class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what) : Error(ExitCode::kValidation, what) {}
};

/// A file or upstream pipeline artifact that should exist does not.
class MissingArtifactError : public Error {
 public:
  explicit MissingArtifactError(const std::string& what)
      : Error(ExitCode::kMissingArtifact, what) {}
};

/// Non-convergence, overflow, or a non-finite loss.
class NumericalError : public Error {
 public:
  NumericalError(const std::string& what, double residual = 0.0)
      : Error(ExitCode::kNumerical, what), residual_(residual) {}
  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

}  // namespace cgt
