#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace magad {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A precondition of an operation was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid argument value (degenerate sizes, out-of-range rates, ...).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// Dataset files missing or inconsistent.
class IngestionError : public Error {
 public:
  using Error::Error;
};

class IntegrityError : public IngestionError {
 public:
  IntegrityError(const std::string& file, std::size_t line, const std::string& what)
      : IngestionError(file + ":" + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Support/query sampling impossible (e.g. a single-class dataset).
class EpisodeError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& where, int step)
      : Error(where + ": non-finite loss at step " + std::to_string(step)), step_(step) {}
  int step() const { return step_; }

 private:
  int step_;
};

/// Metric undefined for the given labels (e.g. ROC-AUC with one class).
class MetricError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace magad
