#pragma once

#include <stdexcept>
#include <string>

namespace cdformer {

// Exit codes used by the command-line tool; one per error class.
enum class ExitCode : int {
  ok = 0,
  internal = 1,
  usage = 2,
  config = 3,
  data = 4,
  io = 5,
  numeric = 6,
  dimension = 7,
  contract = 8,
};

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual ExitCode exit_code() const { return ExitCode::internal; }
  virtual const char* kind() const { return "error"; }
};

/// Tensor shapes that do not fit together.
class DimensionError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const override { return ExitCode::dimension; }
  const char* kind() const override { return "dimension"; }
};

/// Invalid hyperparameters or configuration documents.
class ConfigError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const override { return ExitCode::config; }
  const char* kind() const override { return "config"; }
};

/// Precondition violated by the caller (internal misuse).
class ContractError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const override { return ExitCode::contract; }
  const char* kind() const override { return "contract"; }
};

/// Malformed or inconsistent battery data.
class DataError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const override { return ExitCode::data; }
  const char* kind() const override { return "data"; }
};

/// NaN/Inf values or diverged optimisation.
class NumericError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const override { return ExitCode::numeric; }
  const char* kind() const override { return "numeric"; }
};

class IoError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const override { return ExitCode::io; }
  const char* kind() const override { return "io"; }
};

}  // namespace cdformer
