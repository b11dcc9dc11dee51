#ifndef FEDGP_ERRORS_HPP_
#define FEDGP_ERRORS_HPP_

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fedgp {

// Base of every error thrown by the library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Numerical failures. The CLI maps these onto exit code 3.
struct NumericalError : Error {
  using Error::Error;
};

struct NotPositiveDefinite : NumericalError {
  using NumericalError::NumericalError;
};

struct NonFiniteGradient : NumericalError {
  using NumericalError::NumericalError;
};

struct AllUnitsFailed : NumericalError {
  using NumericalError::NumericalError;
};

// Invalid configuration or malformed arguments. The CLI maps these onto exit
// code 2.
struct ConfigError : Error {
  using Error::Error;
};

struct DimensionMismatch : ConfigError {
  using ConfigError::ConfigError;
};

struct ShapeMismatch : ConfigError {
  using ConfigError::ConfigError;
};

struct EmptyDataset : ConfigError {
  using ConfigError::ConfigError;
};

struct InconsistentDimension : ConfigError {
  using ConfigError::ConfigError;
};

struct ParseError : ConfigError {
  ParseError(std::size_t line, const std::string &what)
      : ConfigError("line " + std::to_string(line) + ": " + what), line(line) {}
  std::size_t line;
};

// Wire and file format errors.
struct FormatError : Error {
  using Error::Error;
};

struct VersionMismatch : FormatError {
  using FormatError::FormatError;
};

struct TruncatedPayload : FormatError {
  using FormatError::FormatError;
};

struct TransportError : Error {
  using Error::Error;
};

struct ProtocolViolation : TransportError {
  using TransportError::TransportError;
};

struct IoError : Error {
  using Error::Error;
};

} // namespace fedgp

#endif // FEDGP_ERRORS_HPP_
