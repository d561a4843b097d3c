#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace nmtdesk {

enum class ErrorKind {
  kUsage,
  kEmptyCorpus,
  kInsufficientData,
  kShapeMismatch,
  kEmptyInput,
  kMissingCache,
  kDropoutActive,
  kInvalidEpsilon,
  kNonFiniteGradient,
  kNonFiniteLoss,
  kDimensionMismatch,
  kLengthMismatch,
  kEmptyReference,
  kTooFewSentences,
  kFormat,
  kIo,
  kMisaligned,
  kDuplicateSystemLabel,
  kUnknownCampaign,
  kUnknownEvaluator,
  kUnknownItem,
  kCampaignClosed,
  kOutOfRangeScore,
  kInternal,
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kUsage: return "Usage";
    case ErrorKind::kEmptyCorpus: return "EmptyCorpus";
    case ErrorKind::kInsufficientData: return "InsufficientData";
    case ErrorKind::kShapeMismatch: return "ShapeMismatch";
    case ErrorKind::kEmptyInput: return "EmptyInput";
    case ErrorKind::kMissingCache: return "MissingCache";
    case ErrorKind::kDropoutActive: return "DropoutActive";
    case ErrorKind::kInvalidEpsilon: return "InvalidEpsilon";
    case ErrorKind::kNonFiniteGradient: return "NonFiniteGradient";
    case ErrorKind::kNonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::kDimensionMismatch: return "DimensionMismatch";
    case ErrorKind::kLengthMismatch: return "LengthMismatch";
    case ErrorKind::kEmptyReference: return "EmptyReference";
    case ErrorKind::kTooFewSentences: return "TooFewSentences";
    case ErrorKind::kFormat: return "Format";
    case ErrorKind::kIo: return "Io";
    case ErrorKind::kMisaligned: return "Misaligned";
    case ErrorKind::kDuplicateSystemLabel: return "DuplicateSystemLabel";
    case ErrorKind::kUnknownCampaign: return "UnknownCampaign";
    case ErrorKind::kUnknownEvaluator: return "UnknownEvaluator";
    case ErrorKind::kUnknownItem: return "UnknownItem";
    case ErrorKind::kCampaignClosed: return "CampaignClosed";
    case ErrorKind::kOutOfRangeScore: return "OutOfRangeScore";
    case ErrorKind::kInternal: return "Internal";
  }
  return "Unknown";
}

/// Every failure raised by the library carries a kind so callers (the CLI,
/// the HTTP layer) can map it to an exit code or status without parsing text.
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

}  // namespace nmtdesk
