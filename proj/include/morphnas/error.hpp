#pragma once

#include <stdexcept>
#include <string>

namespace morphnas {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed text input. `field` names the offending JSON path when known.
class ParseError : public Error {
 public:
  ParseError(const std::string& message, std::string field = {}, int line = 0)
      : Error(format(message, field, line)), field_(std::move(field)), line_(line) {}

  const std::string& field() const noexcept { return field_; }
  int line() const noexcept { return line_; }

 private:
  static std::string format(const std::string& message, const std::string& field, int line) {
    std::string out;
    if (line > 0) out += "line " + std::to_string(line) + ": ";
    if (!field.empty()) out += "field '" + field + "': ";
    return out + message;
  }

  std::string field_;
  int line_ = 0;
};

/// An architecture or morph result that breaks an IR invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Spatial size collapsed to zero during shape inference or stacking.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// A morph that cannot be applied to the given architecture.
class ActionError : public Error {
 public:
  using Error::Error;
};

/// A bundle that the policy could never have produced under the current masks.
class ImpossibleActionError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values in gradients, losses or parameters.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Invalid run configuration. `field` is the config path at fault.
class ConfigError : public Error {
 public:
  ConfigError(const std::string& message, std::string field = {})
      : Error(field.empty() ? message : field + ": " + message), field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// The evaluator could not be reached at all (spawn or handshake failure).
class EvaluatorUnavailable : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace morphnas
