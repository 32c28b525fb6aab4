#pragma once

#include <stdexcept>
#include <string>

namespace hmil {

// Base class for all library errors. Subclasses map onto the failure
// categories surfaced by the CLI exit codes.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Input/config validation problems (exit code 1 territory).
struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error("config error: " + msg) {}
};

struct TaxonomyError : Error {
  explicit TaxonomyError(const std::string& msg) : Error("taxonomy error: " + msg) {}
};

struct FormatError : Error {
  explicit FormatError(const std::string& msg) : Error("format error: " + msg) {}
};

struct IoError : Error {
  explicit IoError(const std::string& msg) : Error("io error: " + msg) {}
};

struct IncompatibilityError : Error {
  explicit IncompatibilityError(const std::string& msg)
      : Error("incompatibility error: " + msg) {}
};

// Runtime/numeric problems (exit code 2 territory).
struct ShapeError : Error {
  explicit ShapeError(const std::string& msg) : Error("shape error: " + msg) {}
};

struct DomainError : Error {
  explicit DomainError(const std::string& msg) : Error("domain error: " + msg) {}
};

struct DegenerateInputError : Error {
  explicit DegenerateInputError(const std::string& msg)
      : Error("degenerate input: " + msg) {}
};

struct GraphError : Error {
  explicit GraphError(const std::string& msg) : Error("graph error: " + msg) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& msg) : Error("numeric error: " + msg) {}
};

struct ScheduleError : Error {
  explicit ScheduleError(const std::string& msg) : Error("schedule error: " + msg) {}
};

// Raised when a verification command (gradcheck) exceeds its threshold.
struct ThresholdBreach : Error {
  explicit ThresholdBreach(const std::string& msg) : Error("threshold breach: " + msg) {}
};

}  // namespace hmil
