#include "klambda/error.hpp"

#include <cstdio>
#include <cstdlib>

#include "klambda/format.hpp"

namespace klambda {

std::string_view to_string(Errc code) noexcept {
  switch (code) {
    case Errc::TooFewPoints: return "TooFewPoints";
    case Errc::NonMonotone: return "NonMonotone";
    case Errc::DuplicateRate: return "DuplicateRate";
    case Errc::NoOverlap: return "NoOverlap";
    case Errc::FitFailure: return "FitFailure";
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::EncoderFailure: return "EncoderFailure";
    case Errc::LogParseFailure: return "LogParseFailure";
    case Errc::MissingColumn: return "MissingColumn";
    case Errc::MalformedRow: return "MalformedRow";
    case Errc::EmptyLog: return "EmptyLog";
    case Errc::TooFewVectors: return "TooFewVectors";
    case Errc::BudgetExceeded: return "BudgetExceeded";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::EmptyDataset: return "EmptyDataset";
    case Errc::NonFiniteLoss: return "NonFiniteLoss";
    case Errc::FeatureLayoutMismatch: return "FeatureLayoutMismatch";
    case Errc::EmptyManifest: return "EmptyManifest";
    case Errc::TooFew: return "TooFew";
    case Errc::InvalidFraction: return "InvalidFraction";
    case Errc::EmptyOutcomes: return "EmptyOutcomes";
    case Errc::EmptyInput: return "EmptyInput";
    case Errc::IoError: return "IoError";
    case Errc::FormatError: return "FormatError";
    case Errc::UnknownCommand: return "UnknownCommand";
  }
  return "Unknown";
}

std::string format_number(double value) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", value);
  return buf;
}

double round_sig9(double value) { return std::strtod(format_number(value).c_str(), nullptr); }

}  // namespace klambda
