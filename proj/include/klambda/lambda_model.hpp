#pragma once

#include <string_view>

namespace klambda {

enum class FrameType { I, P, B };

char to_char(FrameType type) noexcept;
/// Accepts I, P or B (case-insensitive). Throws InvalidArgument otherwise.
FrameType parse_frame_type(std::string_view text);

inline constexpr int kMinQp = 0;
inline constexpr int kMaxQp = 51;

/// A quantiser, a frame type and the per-clip multiplier scale k.
struct LambdaSpec {
  int q = 32;
  FrameType frame_type = FrameType::P;
  double k = 1.0;
};

/// Codec-default Lagrangian multiplier for a frame type at quantiser q.
///   I: 0.57 * 2^((q-12)/3)
///   P: 0.85 * 2^((q-12)/3)
///   B: 0.68 * clamp((q-12)/6, 2, 4) * 2^((q-12)/3)
double default_lambda(int q, FrameType frame_type);

/// k * default_lambda(q, frame_type). The same k scales all three frame types.
double scaled_lambda(const LambdaSpec& spec);

/// The older single-formula multiplier 0.85 * q^2, kept for comparison plots.
double legacy_lambda(int q);

}  // namespace klambda
