#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace aligntree {

enum class ErrorCode {
  InvalidSelection,
  IoError,
  InvalidDataset,
  FormatError,
  UnsupportedVersion,
  TruncationError,
  InvalidBundle,
  EmptyClass,
  ShapeError,
  KeyMismatch,
  MissingPosition,
  SingleClassError,
  TooFewSamples,
  StratificationError,
  InsufficientModels,
  EmptyTraining,
  RangeError,
  ManifestError,
  ProvenanceError,
  SpecError,
  EmptyDataset,
};

std::string_view to_string(ErrorCode code) noexcept;

// Every failure raised by the library carries one of the codes above so the
// CLI and the service can map it without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

}  // namespace aligntree
