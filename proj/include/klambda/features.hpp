#pragma once

#include <array>
#include <cstddef>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "klambda/encoder.hpp"
#include "klambda/stats_log.hpp"

namespace klambda {

inline constexpr std::size_t kClipBlockSize = 23;
inline constexpr std::size_t kFrameSlots = 150;
inline constexpr std::size_t kFrameBlockSize = kFrameSlots * kFrameFeatureCount;  // 1500
inline constexpr std::size_t kSemanticSize = 1000;
inline constexpr std::size_t kEncodingFeatureSize = kClipBlockSize + kFrameBlockSize;  // 1523
inline constexpr std::size_t kFullFeatureSize = kEncodingFeatureSize + kSemanticSize;  // 2523

/// 1-based frame the semantic provider is asked for by default (index 74).
inline constexpr int kSemanticFrame = 75;

/// Clip block layout, fixed:
///   0 avg bitrate, 1-4 avg PSNR Y/U/V/global, 5-7 I/P/B frame counts,
///   8-10 I/P/B bitrates, 11-13 I PSNR Y/U/V, 14-16 P PSNR Y/U/V,
///   17-19 B PSNR Y/U/V, 20 total frames, 21 average QP, 22 elapsed seconds.
std::array<double, kClipBlockSize> clip_block_values(const ClipStats& stats);
ClipStats clip_stats_from_block(std::span<const double> block);

struct SemanticFeatures {
  std::string clip_id;
  std::vector<double> values;  ///< exactly kSemanticSize entries
};

/// Model input for one clip: clip block, then frame-major per-frame block
/// (all ten features of frame 0, then frame 1, ...), then the optional
/// semantic block.
struct FeatureVector {
  std::string clip_id;
  std::vector<double> values;
  bool has_semantic = false;
  bool padded = false;     ///< the log had fewer than 150 frames; tail slots are zero
  bool truncated = false;  ///< the log had more than 150 frames; the rest were dropped

  std::size_t size() const noexcept { return values.size(); }
  std::span<const double> clip_block() const { return {values.data(), kClipBlockSize}; }
  std::span<const double> frame_block() const {
    return {values.data() + kClipBlockSize, kFrameBlockSize};
  }
  std::span<const double> semantic_block() const {
    return has_semantic ? std::span<const double>(values.data() + kEncodingFeatureSize, kSemanticSize)
                        : std::span<const double>();
  }
};

/// Builds the 2523-wide vector, or the 1523-wide encoding-only vector when
/// `semantic` is absent. Throws InvalidArgument on a semantic block of the
/// wrong width or non-finite values.
FeatureVector assemble_features(const StatsLog& stats, const SemanticFeatures* semantic = nullptr,
                                std::string clip_id = {});

struct UnpackedFeatures {
  ClipStats clip;
  std::vector<std::array<double, kFrameFeatureCount>> frames;  ///< min(total frames, 150) entries
  std::vector<double> semantic;
};

/// Inverse of assemble_features on the documented layout.
UnpackedFeatures unpack_features(const FeatureVector& vector);

/// Per-dimension standardization statistics (population standard deviation).
struct NormStats {
  std::vector<double> mean;
  std::vector<double> stddev;

  static constexpr double kMinStd = 1e-12;

  std::size_t size() const noexcept { return mean.size(); }
  /// Dimensions with stddev < kMinStd map to 0.
  std::vector<double> apply(std::span<const double> values) const;
  /// Degenerate dimensions map back to their mean.
  std::vector<double> invert(std::span<const double> values) const;

  friend bool operator==(const NormStats&, const NormStats&) = default;
};

/// Throws TooFewVectors (fewer than two) or DimensionMismatch.
NormStats fit_norm_stats(std::span<const FeatureVector> vectors);

struct NormalizedSet {
  std::vector<std::vector<double>> vectors;
  NormStats stats;
};

NormalizedSet normalize_features(std::span<const FeatureVector> vectors);

/// Supplies semantic features for a clip; the frame index is 1-based.
class SemanticProvider {
 public:
  virtual ~SemanticProvider() = default;
  virtual std::optional<SemanticFeatures> features_for(const ClipRef& clip,
                                                       int frame = kSemanticFrame) const = 0;
};

/// Reads precomputed values from a `clip_id,f0,...,f999` CSV.
class CsvSemanticProvider final : public SemanticProvider {
 public:
  explicit CsvSemanticProvider(const std::string& path);
  std::optional<SemanticFeatures> features_for(const ClipRef& clip,
                                               int frame = kSemanticFrame) const override;
  std::size_t size() const noexcept { return table_.size(); }

 private:
  std::map<std::string, SemanticFeatures> table_;
};

std::map<std::string, SemanticFeatures> read_semantic_csv(std::istream& in);

// Feature persistence: `clip_id,c0..c22,f0..f1499[,s0..s999]`, one row per clip.
void write_features_csv(std::ostream& out, std::span<const FeatureVector> vectors);
std::vector<FeatureVector> read_features_csv(std::istream& in);

}  // namespace klambda
