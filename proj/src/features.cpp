#include "klambda/features.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>

#include "csv_util.hpp"
#include "klambda/error.hpp"

namespace klambda {

std::array<double, kClipBlockSize> clip_block_values(const ClipStats& c) {
  return {c.avg_bitrate_kbps,
          c.psnr_y,
          c.psnr_u,
          c.psnr_v,
          c.psnr_global,
          static_cast<double>(c.count_i),
          static_cast<double>(c.count_p),
          static_cast<double>(c.count_b),
          c.bitrate_i,
          c.bitrate_p,
          c.bitrate_b,
          c.psnr_i[0],
          c.psnr_i[1],
          c.psnr_i[2],
          c.psnr_p[0],
          c.psnr_p[1],
          c.psnr_p[2],
          c.psnr_b[0],
          c.psnr_b[1],
          c.psnr_b[2],
          static_cast<double>(c.total_frames),
          c.avg_qp,
          c.elapsed_s};
}

ClipStats clip_stats_from_block(std::span<const double> b) {
  if (b.size() != kClipBlockSize) throw Error(Errc::DimensionMismatch, "clip block must hold 23 values");
  ClipStats c;
  c.avg_bitrate_kbps = b[0];
  c.psnr_y = b[1];
  c.psnr_u = b[2];
  c.psnr_v = b[3];
  c.psnr_global = b[4];
  c.count_i = static_cast<int>(b[5]);
  c.count_p = static_cast<int>(b[6]);
  c.count_b = static_cast<int>(b[7]);
  c.bitrate_i = b[8];
  c.bitrate_p = b[9];
  c.bitrate_b = b[10];
  c.psnr_i = {b[11], b[12], b[13]};
  c.psnr_p = {b[14], b[15], b[16]};
  c.psnr_b = {b[17], b[18], b[19]};
  c.total_frames = static_cast<int>(b[20]);
  c.avg_qp = b[21];
  c.elapsed_s = b[22];
  return c;
}

FeatureVector assemble_features(const StatsLog& stats, const SemanticFeatures* semantic,
                                std::string clip_id) {
  if (stats.frames.empty()) throw Error(Errc::EmptyLog, "cannot assemble features from an empty log");
  FeatureVector fv;
  fv.clip_id = std::move(clip_id);
  fv.values.reserve(semantic ? kFullFeatureSize : kEncodingFeatureSize);

  const auto clip = clip_block_values(stats.clip);
  fv.values.insert(fv.values.end(), clip.begin(), clip.end());

  const std::size_t kept = std::min(stats.frames.size(), kFrameSlots);
  for (std::size_t i = 0; i < kept; ++i) {
    const auto frame = frame_features(stats.frames[i]);
    fv.values.insert(fv.values.end(), frame.begin(), frame.end());
  }
  fv.values.resize(kEncodingFeatureSize, 0.0);
  fv.padded = stats.frames.size() < kFrameSlots;
  fv.truncated = stats.frames.size() > kFrameSlots;

  if (semantic) {
    if (semantic->values.size() != kSemanticSize) {
      throw Error(Errc::InvalidArgument, "semantic block for '" + semantic->clip_id + "' has " +
                                             std::to_string(semantic->values.size()) +
                                             " values, expected 1000");
    }
    fv.values.insert(fv.values.end(), semantic->values.begin(), semantic->values.end());
    fv.has_semantic = true;
  }
  for (double v : fv.values) {
    if (!std::isfinite(v)) throw Error(Errc::InvalidArgument, "non-finite feature value");
  }
  return fv;
}

UnpackedFeatures unpack_features(const FeatureVector& fv) {
  const std::size_t expected = fv.has_semantic ? kFullFeatureSize : kEncodingFeatureSize;
  if (fv.values.size() != expected) {
    throw Error(Errc::DimensionMismatch, "feature vector has " + std::to_string(fv.values.size()) +
                                             " values, expected " + std::to_string(expected));
  }
  UnpackedFeatures out;
  out.clip = clip_stats_from_block(fv.clip_block());
  const auto frames = std::min<std::size_t>(static_cast<std::size_t>(std::max(out.clip.total_frames, 0)),
                                            kFrameSlots);
  const auto block = fv.frame_block();
  for (std::size_t i = 0; i < frames; ++i) {
    std::array<double, kFrameFeatureCount> f{};
    std::copy_n(block.begin() + static_cast<std::ptrdiff_t>(i * kFrameFeatureCount), kFrameFeatureCount,
                f.begin());
    out.frames.push_back(f);
  }
  const auto sem = fv.semantic_block();
  out.semantic.assign(sem.begin(), sem.end());
  return out;
}

std::vector<double> NormStats::apply(std::span<const double> values) const {
  if (values.size() != mean.size()) {
    throw Error(Errc::DimensionMismatch, "normalizer expects " + std::to_string(mean.size()) +
                                             " values, got " + std::to_string(values.size()));
  }
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    out[i] = stddev[i] < kMinStd ? 0.0 : (values[i] - mean[i]) / stddev[i];
  }
  return out;
}

std::vector<double> NormStats::invert(std::span<const double> values) const {
  if (values.size() != mean.size()) throw Error(Errc::DimensionMismatch, "normalizer width mismatch");
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    out[i] = stddev[i] < kMinStd ? mean[i] : values[i] * stddev[i] + mean[i];
  }
  return out;
}

NormStats fit_norm_stats(std::span<const FeatureVector> vectors) {
  if (vectors.size() < 2) throw Error(Errc::TooFewVectors, "normalization needs at least two vectors");
  const std::size_t width = vectors.front().size();
  for (const auto& v : vectors) {
    if (v.size() != width) throw Error(Errc::DimensionMismatch, "feature vectors differ in width");
  }
  const double n = static_cast<double>(vectors.size());
  NormStats stats;
  stats.mean.assign(width, 0.0);
  stats.stddev.assign(width, 0.0);
  for (const auto& v : vectors) {
    for (std::size_t i = 0; i < width; ++i) stats.mean[i] += v.values[i];
  }
  for (auto& m : stats.mean) m /= n;
  for (const auto& v : vectors) {
    for (std::size_t i = 0; i < width; ++i) {
      const double d = v.values[i] - stats.mean[i];
      stats.stddev[i] += d * d;
    }
  }
  for (auto& s : stats.stddev) s = std::sqrt(s / n);
  return stats;
}

NormalizedSet normalize_features(std::span<const FeatureVector> vectors) {
  NormalizedSet set;
  set.stats = fit_norm_stats(vectors);
  set.vectors.reserve(vectors.size());
  for (const auto& v : vectors) set.vectors.push_back(set.stats.apply(v.values));
  return set;
}

std::map<std::string, SemanticFeatures> read_semantic_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw Error(Errc::FormatError, "empty semantic features file");
  const auto header = detail::split_csv(line);
  if (header.size() != kSemanticSize + 1 || header[0] != "clip_id") {
    throw Error(Errc::FormatError, "semantic CSV header must be clip_id,f0,...,f999");
  }
  std::map<std::string, SemanticFeatures> table;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    ++row;
    const auto fields = detail::split_csv(line);
    if (fields.size() != kSemanticSize + 1) {
      throw Error(Errc::MalformedRow, "semantic row " + std::to_string(row) + " has wrong width");
    }
    SemanticFeatures sf;
    sf.clip_id = std::string(fields[0]);
    sf.values.reserve(kSemanticSize);
    for (std::size_t i = 1; i < fields.size(); ++i) {
      const auto v = detail::parse_double(fields[i]);
      if (!v) throw Error(Errc::MalformedRow, "semantic row " + std::to_string(row));
      sf.values.push_back(*v);
    }
    table.emplace(sf.clip_id, std::move(sf));
  }
  return table;
}

CsvSemanticProvider::CsvSemanticProvider(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::IoError, "cannot open " + path);
  table_ = read_semantic_csv(in);
}

std::optional<SemanticFeatures> CsvSemanticProvider::features_for(const ClipRef& clip, int) const {
  // Rows are precomputed on the requested frame; the index is not re-applied.
  const auto it = table_.find(clip.id);
  if (it == table_.end()) return std::nullopt;
  return it->second;
}

void write_features_csv(std::ostream& out, std::span<const FeatureVector> vectors) {
  if (vectors.empty()) return;
  const bool semantic = vectors.front().has_semantic;
  out << "clip_id";
  for (std::size_t i = 0; i < kClipBlockSize; ++i) out << ",c" << i;
  for (std::size_t i = 0; i < kFrameBlockSize; ++i) out << ",f" << i;
  if (semantic) {
    for (std::size_t i = 0; i < kSemanticSize; ++i) out << ",s" << i;
  }
  out << '\n';
  for (const auto& v : vectors) {
    if (v.has_semantic != semantic) {
      throw Error(Errc::FeatureLayoutMismatch, "mixed semantic and encoding-only vectors");
    }
    out << v.clip_id;
    for (double x : v.values) out << ',' << detail::shortest(x);
    out << '\n';
  }
}

std::vector<FeatureVector> read_features_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw Error(Errc::FormatError, "empty features file");
  const auto header = detail::split_csv(line);
  const std::size_t width = header.size() - 1;
  if (header.empty() || header[0] != "clip_id" ||
      (width != kEncodingFeatureSize && width != kFullFeatureSize)) {
    throw Error(Errc::FormatError, "features CSV must have 1523 or 2523 value columns");
  }
  std::vector<FeatureVector> vectors;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    ++row;
    const auto fields = detail::split_csv(line);
    if (fields.size() != header.size()) {
      throw Error(Errc::MalformedRow, "features row " + std::to_string(row) + " has wrong width");
    }
    FeatureVector fv;
    fv.clip_id = std::string(fields[0]);
    fv.has_semantic = width == kFullFeatureSize;
    fv.values.reserve(width);
    for (std::size_t i = 1; i < fields.size(); ++i) {
      const auto v = detail::parse_double(fields[i]);
      if (!v) throw Error(Errc::MalformedRow, "features row " + std::to_string(row));
      fv.values.push_back(*v);
    }
    const int frames = static_cast<int>(fv.values[20]);
    fv.padded = frames < static_cast<int>(kFrameSlots);
    fv.truncated = frames > static_cast<int>(kFrameSlots);
    vectors.push_back(std::move(fv));
  }
  return vectors;
}

}  // namespace klambda
