#include "klambda/lambda_model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "klambda/error.hpp"

namespace klambda {

char to_char(FrameType type) noexcept {
  switch (type) {
    case FrameType::I: return 'I';
    case FrameType::P: return 'P';
    case FrameType::B: return 'B';
  }
  return '?';
}

FrameType parse_frame_type(std::string_view text) {
  if (text == "I" || text == "i") return FrameType::I;
  if (text == "P" || text == "p") return FrameType::P;
  if (text == "B" || text == "b") return FrameType::B;
  throw Error(Errc::InvalidArgument, "frame type must be I, P or B, got '" + std::string(text) + "'");
}

namespace {

void check_q(int q) {
  if (q < kMinQp || q > kMaxQp) {
    throw Error(Errc::InvalidArgument, "quantiser " + std::to_string(q) + " outside [0, 51]");
  }
}

}  // namespace

double default_lambda(int q, FrameType frame_type) {
  check_q(q);
  const double offset = static_cast<double>(q - 12);
  const double base = std::exp2(offset / 3.0);
  switch (frame_type) {
    case FrameType::I: return 0.57 * base;
    case FrameType::P: return 0.85 * base;
    case FrameType::B: return 0.68 * std::max(2.0, std::min(4.0, offset / 6.0)) * base;
  }
  return base;
}

double scaled_lambda(const LambdaSpec& spec) {
  if (!(spec.k > 0.0) || !std::isfinite(spec.k)) {
    throw Error(Errc::InvalidArgument, "k must be positive and finite");
  }
  return spec.k * default_lambda(spec.q, spec.frame_type);
}

double legacy_lambda(int q) {
  if (q < 0) throw Error(Errc::InvalidArgument, "quantiser must be non-negative");
  const double qd = q;
  return 0.85 * qd * qd;
}

}  // namespace klambda
