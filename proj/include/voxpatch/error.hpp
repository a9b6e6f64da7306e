#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace voxpatch {

enum class ErrorKind {
  DimensionMismatch,
  UnsupportedRotation,
  InvalidRatio,
  EmptyGrid,
  UnknownCategory,
  EmptyShape,
  ConfigError,
  Divergence,
  ContextOverflow,
  FrozenSetViolation,
  CorruptCheckpoint,
  ConfigMismatch,
  FormatError,
  UsageError,
  FileError,
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::UnsupportedRotation: return "UnsupportedRotation";
    case ErrorKind::InvalidRatio: return "InvalidRatio";
    case ErrorKind::EmptyGrid: return "EmptyGrid";
    case ErrorKind::UnknownCategory: return "UnknownCategory";
    case ErrorKind::EmptyShape: return "EmptyShape";
    case ErrorKind::ConfigError: return "ConfigError";
    case ErrorKind::Divergence: return "Divergence";
    case ErrorKind::ContextOverflow: return "ContextOverflow";
    case ErrorKind::FrozenSetViolation: return "FrozenSetViolation";
    case ErrorKind::CorruptCheckpoint: return "CorruptCheckpoint";
    case ErrorKind::ConfigMismatch: return "ConfigMismatch";
    case ErrorKind::FormatError: return "FormatError";
    case ErrorKind::UsageError: return "UsageError";
    case ErrorKind::FileError: return "FileError";
  }
  return "Unknown";
}

/// Every failure raised by the library carries a machine-readable kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) {
    fail(kind, message);
  }
}

}  // namespace voxpatch
