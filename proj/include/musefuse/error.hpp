#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace musefuse {

enum class ErrorCode {
  // streams
  BadMagic,
  TruncatedRecord,
  NonMonotonicTimestamp,
  InvalidRecord,
  TriggerCountMismatch,
  NoTriggers,
  NoSoftwareTrigger,
  // sigproc
  InvalidCutoff,
  InvalidCenter,
  NonFiniteInput,
  ZeroQuaternion,
  EmptySource,
  // dataset
  IncompleteScan,
  InsufficientHistory,
  FoldOutOfRange,
  SessionOutOfRange,
  // nn engine
  ShapeMismatch,
  NonDivisibleShape,
  InvalidRate,
  NoGraph,
  // models
  ConfigInvalid,
  // traineval
  EmptyPartition,
  DivergedLoss,
  ZeroVariance,
  // synth
  SpecInvalid,
  UnknownMode,
  // io / cli
  IoError,
  UsageError,
};

std::string_view to_string(ErrorCode code) noexcept;

/// Exception carrying a machine-readable code. `what()` is "<Code>: <detail>".
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& detail)
      : std::runtime_error(std::string(to_string(code)) + ": " + detail), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace musefuse
