#pragma once

#include <stdexcept>
#include <string>

namespace advae {

// Process exit codes used by the CLI. Stable contract for CI scripts.
enum class ExitCode : int {
  ok = 0,
  validation = 1,
  runtime = 2,
  io = 3,
};

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what, ExitCode code = ExitCode::runtime)
      : std::runtime_error(what), code_(code) {}
  ExitCode exit_code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

/// Invalid configuration value or unknown config key.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config error: " + what, ExitCode::validation) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error("shape error: " + what) {}
};

/// Non-finite value encountered in a forward pass, loss or gradient.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error("numeric error: " + what) {}
};

/// Value outside the domain of an operation (unknown topic, empty topic, ...).
class DomainError : public Error {
 public:
  explicit DomainError(const std::string& what) : Error("domain error: " + what) {}
};

/// Filesystem or dataset failure. Always carries the offending path.
class IoError : public Error {
 public:
  IoError(const std::string& what, const std::string& path)
      : Error("i/o error: " + what + ": " + path, ExitCode::io), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

/// Corrupted or truncated artifact.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error("format error: " + what, ExitCode::io) {}
};

/// Artifact written by an incompatible format version.
class IncompatibleError : public Error {
 public:
  explicit IncompatibleError(const std::string& what) : Error("incompatible artifact: " + what, ExitCode::io) {}
};

class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, long step)
      : Error("training error at step " + std::to_string(step) + ": " + what), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

/// Evaluation protocol violated (e.g. overlapping train/test splits).
class ProtocolError : public Error {
 public:
  explicit ProtocolError(const std::string& what) : Error("protocol error: " + what) {}
};

}  // namespace advae
