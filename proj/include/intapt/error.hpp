#pragma once

#include <stdexcept>
#include <string>

namespace intapt {

/// Exit codes shared by the CLI and the pipeline driver.
enum class ExitCode : int {
  kOk = 0,
  kConfigError = 1,
  kStageFailure = 2,
  kInvariantViolation = 3,
};

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string &what, ExitCode code)
      : std::runtime_error(what), code_(code) {}
  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

/// Invalid arguments, preconditions or configuration values.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string &what)
      : Error(what, ExitCode::kConfigError) {}
};

/// A computation that could not complete (divergence, infeasible target,
/// corrupt file, ...).
class StageError : public Error {
 public:
  explicit StageError(const std::string &what)
      : Error(what, ExitCode::kStageFailure) {}
};

/// A contract that must never break did (fingerprint drift, split overlap).
class InvariantViolation : public Error {
 public:
  explicit InvariantViolation(const std::string &what)
      : Error(what, ExitCode::kInvariantViolation) {}
};

}  // namespace intapt
