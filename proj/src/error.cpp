#include "lbyl/error.hpp"

namespace lbyl {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kGeometryError: return "GeometryError";
    case ErrorCode::kNotPositiveDefinite: return "NotPositiveDefinite";
    case ErrorCode::kAsymmetricInput: return "AsymmetricInput";
    case ErrorCode::kNonFinite: return "NonFinite";
    case ErrorCode::kInvalidBN: return "InvalidBN";
    case ErrorCode::kUnknownArch: return "UnknownArch";
    case ErrorCode::kBadMagic: return "BadMagic";
    case ErrorCode::kUnsupportedVersion: return "UnsupportedVersion";
    case ErrorCode::kChecksumMismatch: return "ChecksumMismatch";
    case ErrorCode::kTruncatedStream: return "TruncatedStream";
    case ErrorCode::kMalformedManifest: return "MalformedManifest";
    case ErrorCode::kDegenerateLayer: return "DegenerateLayer";
    case ErrorCode::kAllPruned: return "AllPruned";
    case ErrorCode::kPlanShapeMismatch: return "PlanShapeMismatch";
    case ErrorCode::kIllegalResidualPrune: return "IllegalResidualPrune";
    case ErrorCode::kDegenerateTarget: return "DegenerateTarget";
    case ErrorCode::kMissingTap: return "MissingTap";
    case ErrorCode::kEmptyDelivery: return "EmptyDelivery";
    case ErrorCode::kConfig: return "ConfigError";
    case ErrorCode::kIO: return "IOError";
  }
  return "Unknown";
}

ErrorCategory category_of(ErrorCode code) {
  switch (code) {
    case ErrorCode::kNotPositiveDefinite:
    case ErrorCode::kAsymmetricInput:
    case ErrorCode::kNonFinite:
    case ErrorCode::kDegenerateTarget:
      return ErrorCategory::kNumerical;
    case ErrorCode::kBadMagic:
    case ErrorCode::kUnsupportedVersion:
    case ErrorCode::kChecksumMismatch:
    case ErrorCode::kTruncatedStream:
    case ErrorCode::kMalformedManifest:
    case ErrorCode::kIO:
      return ErrorCategory::kIO;
    default:
      return ErrorCategory::kConfig;
  }
}

}  // namespace lbyl
