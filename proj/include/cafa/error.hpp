#pragma once

#include <stdexcept>
#include <string>

namespace cafa {

enum class ErrorKind {
  InvalidArgument,
  DimensionMismatch,
  NotPositiveDefinite,
  EmptyInput,
  BatchTooSmall,
  NonFiniteLoss,
  MissingClass,
  UnknownClass,
  SingleClass,
  Io,
  FormatVersionMismatch,
  CorruptChecksum,
  ConfigInvalid,
  TrainingDiverged,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::NotPositiveDefinite: return "NotPositiveDefinite";
    case ErrorKind::EmptyInput: return "EmptyInput";
    case ErrorKind::BatchTooSmall: return "BatchTooSmall";
    case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::MissingClass: return "MissingClass";
    case ErrorKind::UnknownClass: return "UnknownClass";
    case ErrorKind::SingleClass: return "SingleClass";
    case ErrorKind::Io: return "Io";
    case ErrorKind::FormatVersionMismatch: return "FormatVersionMismatch";
    case ErrorKind::CorruptChecksum: return "CorruptChecksum";
    case ErrorKind::ConfigInvalid: return "ConfigInvalid";
    case ErrorKind::TrainingDiverged: return "TrainingDiverged";
  }
  return "Unknown";
}

/// Every failure raised by the library. The kind is what callers branch on;
/// the message is for humans.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

namespace detail {

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) throw Error(kind, what);
}

}  // namespace detail
}  // namespace cafa
