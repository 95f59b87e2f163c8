#include "musefuse/error.hpp"

namespace musefuse {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::TruncatedRecord: return "TruncatedRecord";
    case ErrorCode::NonMonotonicTimestamp: return "NonMonotonicTimestamp";
    case ErrorCode::InvalidRecord: return "InvalidRecord";
    case ErrorCode::TriggerCountMismatch: return "TriggerCountMismatch";
    case ErrorCode::NoTriggers: return "NoTriggers";
    case ErrorCode::NoSoftwareTrigger: return "NoSoftwareTrigger";
    case ErrorCode::InvalidCutoff: return "InvalidCutoff";
    case ErrorCode::InvalidCenter: return "InvalidCenter";
    case ErrorCode::NonFiniteInput: return "NonFiniteInput";
    case ErrorCode::ZeroQuaternion: return "ZeroQuaternion";
    case ErrorCode::EmptySource: return "EmptySource";
    case ErrorCode::IncompleteScan: return "IncompleteScan";
    case ErrorCode::InsufficientHistory: return "InsufficientHistory";
    case ErrorCode::FoldOutOfRange: return "FoldOutOfRange";
    case ErrorCode::SessionOutOfRange: return "SessionOutOfRange";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonDivisibleShape: return "NonDivisibleShape";
    case ErrorCode::InvalidRate: return "InvalidRate";
    case ErrorCode::NoGraph: return "NoGraph";
    case ErrorCode::ConfigInvalid: return "ConfigInvalid";
    case ErrorCode::EmptyPartition: return "EmptyPartition";
    case ErrorCode::DivergedLoss: return "DivergedLoss";
    case ErrorCode::ZeroVariance: return "ZeroVariance";
    case ErrorCode::SpecInvalid: return "SpecInvalid";
    case ErrorCode::UnknownMode: return "UnknownMode";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::UsageError: return "UsageError";
  }
  return "Unknown";
}

}  // namespace musefuse
