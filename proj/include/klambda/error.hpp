#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace klambda {

enum class Errc {
  TooFewPoints,
  NonMonotone,
  DuplicateRate,
  NoOverlap,
  FitFailure,
  InvalidArgument,
  EncoderFailure,
  LogParseFailure,
  MissingColumn,
  MalformedRow,
  EmptyLog,
  TooFewVectors,
  BudgetExceeded,
  DimensionMismatch,
  EmptyDataset,
  NonFiniteLoss,
  FeatureLayoutMismatch,
  EmptyManifest,
  TooFew,
  InvalidFraction,
  EmptyOutcomes,
  EmptyInput,
  IoError,
  FormatError,
  UnknownCommand,
};

std::string_view to_string(Errc code) noexcept;

/// Every failure raised by the toolkit carries one of the codes above.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace klambda
