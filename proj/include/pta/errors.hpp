#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace pta {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An argument lies outside the domain of an operation (zero vector, empty set, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// A configuration value violates its contract.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite intermediate values or an iterative method that failed to converge.
class NumericError : public Error {
 public:
  using Error::Error;
};

class LookupError : public Error {
 public:
  using Error::Error;
};

/// A caller-side precondition that the operation can check but not repair.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// The constraint set of an optimization problem is empty.
class InfeasibleError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file. `row()` is 1-based; 0 when the error is not tied to a row.
class ParseError : public Error {
 public:
  ParseError(std::size_t row, const std::string& what)
      : Error(row == 0 ? what : "row " + std::to_string(row) + ": " + what), row_(row) {}

  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

/// Every violated field of a configuration, collected before any work starts.
class ValidationError : public ConfigError {
 public:
  explicit ValidationError(std::vector<std::string> violations)
      : ConfigError(join(violations)), violations_(std::move(violations)) {}

  const std::vector<std::string>& violations() const noexcept { return violations_; }

 private:
  static std::string join(const std::vector<std::string>& v) {
    std::string out = "invalid configuration:";
    for (const auto& s : v) out += "\n  - " + s;
    return out;
  }

  std::vector<std::string> violations_;
};

}  // namespace pta
