#pragma once

#include <array>
#include <cstddef>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "klambda/lambda_model.hpp"

namespace klambda {

/// Per-frame encoder statistics. The first ten numeric fields, in the order
/// returned by frame_features(), are the per-frame model inputs.
struct FrameStats {
  FrameType type = FrameType::P;
  double bits = 0.0;
  double ip_cost_ratio = 0.0;
  double psnr_y = 0.0;
  double psnr_u = 0.0;
  double psnr_v = 0.0;
  double avg_chroma_dist = 0.0;
  double avg_res_energy = 0.0;
  double avg_luma = 0.0;
  double avg_cb = 0.0;
  double avg_cr = 0.0;
  // Optional columns; only meaningful when the owning log says they are present.
  double qp = 0.0;
  double encode_ms = 0.0;

  friend bool operator==(const FrameStats&, const FrameStats&) = default;
};

inline constexpr std::size_t kFrameFeatureCount = 10;

std::array<double, kFrameFeatureCount> frame_features(const FrameStats& frame);
FrameStats frame_from_features(const std::array<double, kFrameFeatureCount>& values,
                               FrameType type = FrameType::P);

/// Clip-level aggregates derived from the frame records.
struct ClipStats {
  double avg_bitrate_kbps = 0.0;
  double psnr_y = 0.0;
  double psnr_u = 0.0;
  double psnr_v = 0.0;
  double psnr_global = 0.0;  ///< (6 Y + U + V) / 8
  int count_i = 0;
  int count_p = 0;
  int count_b = 0;
  double bitrate_i = 0.0;  ///< kbps if every frame cost as much as the average I frame
  double bitrate_p = 0.0;
  double bitrate_b = 0.0;
  std::array<double, 3> psnr_i{};  ///< Y, U, V; zero when the clip has no frame of the type
  std::array<double, 3> psnr_p{};
  std::array<double, 3> psnr_b{};
  int total_frames = 0;
  double avg_qp = 0.0;     ///< zero when the log carries no qp column
  double elapsed_s = 0.0;  ///< zero when the log carries no encode_ms column

  friend bool operator==(const ClipStats&, const ClipStats&) = default;
};

struct StatsLog {
  ClipStats clip;
  std::vector<FrameStats> frames;
  double fps = 30.0;
  bool has_qp = false;
  bool has_timing = false;
};

/// Aggregates frame records into a StatsLog. Throws EmptyLog or
/// LogParseFailure (non-finite PSNR).
StatsLog make_stats_log(std::vector<FrameStats> frames, double fps = 30.0, bool has_qp = false,
                        bool has_timing = false);

enum class LogFormat { Canonical, X265 };

/// Canonical column name -> column name in the x265 per-frame CSV.
const std::map<std::string, std::string>& x265_column_map();

/// Parses a per-frame statistics CSV. Throws EmptyLog, MissingColumn (the
/// message names the column) or MalformedRow (1-based data row index).
StatsLog parse_stats(std::istream& in, LogFormat format = LogFormat::Canonical,
                     double fps = 30.0);
StatsLog parse_stats_file(const std::string& path, LogFormat format = LogFormat::Canonical,
                          double fps = 30.0);

/// Writes the canonical CSV. parse_stats on the output reproduces it byte for byte.
void write_stats(std::ostream& out, const StatsLog& log);

}  // namespace klambda
