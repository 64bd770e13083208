#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cgrasp {

enum class ErrorKind {
  InvalidPose,
  EmptyInput,
  NormalsRequired,
  InsufficientSamples,
  GrammarError,
  UnknownLink,
  InvalidSteering,
  LayoutError,
  InsufficientPoints,
  TruncationError,
  OracleFailure,
  VocabularyMismatch,
  Format,
  InvalidArgument,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidPose: return "InvalidPose";
    case ErrorKind::EmptyInput: return "EmptyInput";
    case ErrorKind::NormalsRequired: return "NormalsRequired";
    case ErrorKind::InsufficientSamples: return "InsufficientSamples";
    case ErrorKind::GrammarError: return "GrammarError";
    case ErrorKind::UnknownLink: return "UnknownLink";
    case ErrorKind::InvalidSteering: return "InvalidSteering";
    case ErrorKind::LayoutError: return "LayoutError";
    case ErrorKind::InsufficientPoints: return "InsufficientPoints";
    case ErrorKind::TruncationError: return "TruncationError";
    case ErrorKind::OracleFailure: return "OracleFailure";
    case ErrorKind::VocabularyMismatch: return "VocabularyMismatch";
    case ErrorKind::Format: return "Format";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

/// Single exception type for the library; callers dispatch on kind().
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace cgrasp
