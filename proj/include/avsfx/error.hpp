#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace avsfx {

enum class ErrorCode {
  // embedding store
  ZeroVector,
  DimMismatch,
  BadMagic,
  VersionUnsupported,
  DuplicateId,
  TruncatedFile,
  IoFailure,
  BadMetadata,
  BadConfig,
  // similarity
  EmptyCandidateSet,
  UnknownId,
  FilteredOut,
  // curation
  EmptyExemplars,
  NoTags,
  BackendUnavailable,
  EmptyCompletion,
  NoFramesAvailable,
  InsufficientItems,
  // training
  BatchMismatch,
  BadTemperature,
  EmptyTrainingSet,
  // evaluation
  EmptyInput,
  EmptyTestSet,
  // study
  InsufficientFrames,
  PoolTooSmall,
  UnknownComparison,
  UnknownSession,
  DuplicateVote,
  BadArgs,
};

std::string_view to_string(ErrorCode code) noexcept;

/// Every failure raised by the library carries one of the codes above so that
/// the CLI and the HTTP layer can map it to an exit status or a status code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace avsfx
