#include "avsfx/error.hpp"

namespace avsfx {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::VersionUnsupported: return "VersionUnsupported";
    case ErrorCode::DuplicateId: return "DuplicateId";
    case ErrorCode::TruncatedFile: return "TruncatedFile";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::BadMetadata: return "BadMetadata";
    case ErrorCode::BadConfig: return "BadConfig";
    case ErrorCode::EmptyCandidateSet: return "EmptyCandidateSet";
    case ErrorCode::UnknownId: return "UnknownId";
    case ErrorCode::FilteredOut: return "FilteredOut";
    case ErrorCode::EmptyExemplars: return "EmptyExemplars";
    case ErrorCode::NoTags: return "NoTags";
    case ErrorCode::BackendUnavailable: return "BackendUnavailable";
    case ErrorCode::EmptyCompletion: return "EmptyCompletion";
    case ErrorCode::NoFramesAvailable: return "NoFramesAvailable";
    case ErrorCode::InsufficientItems: return "InsufficientItems";
    case ErrorCode::BatchMismatch: return "BatchMismatch";
    case ErrorCode::BadTemperature: return "BadTemperature";
    case ErrorCode::EmptyTrainingSet: return "EmptyTrainingSet";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::EmptyTestSet: return "EmptyTestSet";
    case ErrorCode::InsufficientFrames: return "InsufficientFrames";
    case ErrorCode::PoolTooSmall: return "PoolTooSmall";
    case ErrorCode::UnknownComparison: return "UnknownComparison";
    case ErrorCode::UnknownSession: return "UnknownSession";
    case ErrorCode::DuplicateVote: return "DuplicateVote";
    case ErrorCode::BadArgs: return "BadArgs";
  }
  return "Unknown";
}

}  // namespace avsfx
