#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace lbyl {

enum class ErrorCode {
  kShapeMismatch,
  kGeometryError,
  kNotPositiveDefinite,
  kAsymmetricInput,
  kNonFinite,
  kInvalidBN,
  kUnknownArch,
  kBadMagic,
  kUnsupportedVersion,
  kChecksumMismatch,
  kTruncatedStream,
  kMalformedManifest,
  kDegenerateLayer,
  kAllPruned,
  kPlanShapeMismatch,
  kIllegalResidualPrune,
  kDegenerateTarget,
  kMissingTap,
  kEmptyDelivery,
  kConfig,
  kIO,
};

std::string_view to_string(ErrorCode code);

/// Broad failure class, used by the CLI to pick an exit code.
enum class ErrorCategory { kConfig, kNumerical, kIO };

ErrorCategory category_of(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }
  ErrorCategory category() const noexcept { return category_of(code_); }

 private:
  ErrorCode code_;
};

}  // namespace lbyl
