#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace psfm {

enum class ErrorCode {
  kInvalidArgument,
  kCheiralityViolation,
  kInvalidDepth,
  kOutOfBounds,
  kParseError,
  kInconsistentDims,
  kDanglingReference,
  kIoError,
  kDegenerateSample,
  kNotEnoughInliers,
  kAllSamplesDegenerate,
  kDegenerateGeometry,
  kBehindAllCameras,
  kNoViablePair,
  kInitializationFailed,
  kRegistrationFailed,
  kNoRegistrableImage,
  kNotSupported,
  kSpecInfeasible,
  kDegenerateTrajectory,
  kLengthMismatch,
  kEmptyReconstruction,
};

inline std::string_view ErrorCodeName(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kCheiralityViolation: return "CheiralityViolation";
    case ErrorCode::kInvalidDepth: return "InvalidDepth";
    case ErrorCode::kOutOfBounds: return "OutOfBounds";
    case ErrorCode::kParseError: return "ParseError";
    case ErrorCode::kInconsistentDims: return "InconsistentDims";
    case ErrorCode::kDanglingReference: return "DanglingReference";
    case ErrorCode::kIoError: return "IoError";
    case ErrorCode::kDegenerateSample: return "DegenerateSample";
    case ErrorCode::kNotEnoughInliers: return "NotEnoughInliers";
    case ErrorCode::kAllSamplesDegenerate: return "AllSamplesDegenerate";
    case ErrorCode::kDegenerateGeometry: return "DegenerateGeometry";
    case ErrorCode::kBehindAllCameras: return "BehindAllCameras";
    case ErrorCode::kNoViablePair: return "NoViablePair";
    case ErrorCode::kInitializationFailed: return "InitializationFailed";
    case ErrorCode::kRegistrationFailed: return "RegistrationFailed";
    case ErrorCode::kNoRegistrableImage: return "NoRegistrableImage";
    case ErrorCode::kNotSupported: return "NotSupported";
    case ErrorCode::kSpecInfeasible: return "SpecInfeasible";
    case ErrorCode::kDegenerateTrajectory: return "DegenerateTrajectory";
    case ErrorCode::kLengthMismatch: return "LengthMismatch";
    case ErrorCode::kEmptyReconstruction: return "EmptyReconstruction";
  }
  return "Unknown";
}

// Every failure raised by the library carries a machine-readable code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(ErrorCodeName(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void Throw(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace psfm
