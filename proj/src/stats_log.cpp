#include "klambda/stats_log.hpp"

#include <cmath>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>

#include "csv_util.hpp"
#include "klambda/error.hpp"

namespace klambda {

namespace {

constexpr std::array<const char*, 11> kRequiredColumns = {
    "frame_type",     "bits",     "psnr_y", "psnr_u", "psnr_v",       "avg_chroma_dist",
    "avg_res_energy", "avg_luma", "avg_cb", "avg_cr", "ip_cost_ratio"};

// Pointer-to-member for every numeric column, in canonical order.
struct NumericColumn {
  const char* name;
  double FrameStats::*field;
};

constexpr std::array<NumericColumn, 10> kNumericColumns = {{
    {"bits", &FrameStats::bits},
    {"psnr_y", &FrameStats::psnr_y},
    {"psnr_u", &FrameStats::psnr_u},
    {"psnr_v", &FrameStats::psnr_v},
    {"avg_chroma_dist", &FrameStats::avg_chroma_dist},
    {"avg_res_energy", &FrameStats::avg_res_energy},
    {"avg_luma", &FrameStats::avg_luma},
    {"avg_cb", &FrameStats::avg_cb},
    {"avg_cr", &FrameStats::avg_cr},
    {"ip_cost_ratio", &FrameStats::ip_cost_ratio},
}};

std::optional<FrameType> parse_type_field(std::string_view text, LogFormat format) {
  if (format == LogFormat::X265) {
    // x265 writes I-SLICE, P-SLICE, B-SLICE and b-SLICE (non-reference B).
    if (text.empty()) return std::nullopt;
    switch (text.front()) {
      case 'I': case 'i': return FrameType::I;
      case 'P': case 'p': return FrameType::P;
      case 'B': case 'b': return FrameType::B;
      default: return std::nullopt;
    }
  }
  if (text == "I") return FrameType::I;
  if (text == "P") return FrameType::P;
  if (text == "B") return FrameType::B;
  return std::nullopt;
}

}  // namespace

std::array<double, kFrameFeatureCount> frame_features(const FrameStats& f) {
  return {f.bits,           f.ip_cost_ratio,  f.psnr_y,   f.psnr_u, f.psnr_v,
          f.avg_chroma_dist, f.avg_res_energy, f.avg_luma, f.avg_cb, f.avg_cr};
}

FrameStats frame_from_features(const std::array<double, kFrameFeatureCount>& v, FrameType type) {
  FrameStats f;
  f.type = type;
  f.bits = v[0];
  f.ip_cost_ratio = v[1];
  f.psnr_y = v[2];
  f.psnr_u = v[3];
  f.psnr_v = v[4];
  f.avg_chroma_dist = v[5];
  f.avg_res_energy = v[6];
  f.avg_luma = v[7];
  f.avg_cb = v[8];
  f.avg_cr = v[9];
  return f;
}

StatsLog make_stats_log(std::vector<FrameStats> frames, double fps, bool has_qp, bool has_timing) {
  if (frames.empty()) throw Error(Errc::EmptyLog, "statistics log has no frame records");
  if (!(fps > 0.0)) throw Error(Errc::InvalidArgument, "fps must be positive");

  struct TypeSums {
    int count = 0;
    double bits = 0.0;
    std::array<double, 3> psnr{};
  };
  std::array<TypeSums, 3> by_type{};
  double bits = 0.0, y = 0.0, u = 0.0, v = 0.0, qp = 0.0, ms = 0.0;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const auto& f = frames[i];
    if (!std::isfinite(f.psnr_y) || !std::isfinite(f.psnr_u) || !std::isfinite(f.psnr_v)) {
      throw Error(Errc::LogParseFailure, "non-finite PSNR in frame " + std::to_string(i));
    }
    auto& t = by_type[static_cast<std::size_t>(f.type)];
    ++t.count;
    t.bits += f.bits;
    t.psnr[0] += f.psnr_y;
    t.psnr[1] += f.psnr_u;
    t.psnr[2] += f.psnr_v;
    bits += f.bits;
    y += f.psnr_y;
    u += f.psnr_u;
    v += f.psnr_v;
    qp += f.qp;
    ms += f.encode_ms;
  }

  const double n = static_cast<double>(frames.size());
  ClipStats c;
  c.total_frames = static_cast<int>(frames.size());
  c.avg_bitrate_kbps = bits / n * fps / 1000.0;
  c.psnr_y = y / n;
  c.psnr_u = u / n;
  c.psnr_v = v / n;
  c.psnr_global = (6.0 * c.psnr_y + c.psnr_u + c.psnr_v) / 8.0;
  c.count_i = by_type[0].count;
  c.count_p = by_type[1].count;
  c.count_b = by_type[2].count;
  const auto type_rate = [fps](const TypeSums& t) {
    return t.count ? t.bits / t.count * fps / 1000.0 : 0.0;
  };
  const auto type_psnr = [](const TypeSums& t) {
    std::array<double, 3> out{};
    if (t.count) {
      for (int i = 0; i < 3; ++i) out[i] = t.psnr[i] / t.count;
    }
    return out;
  };
  c.bitrate_i = type_rate(by_type[0]);
  c.bitrate_p = type_rate(by_type[1]);
  c.bitrate_b = type_rate(by_type[2]);
  c.psnr_i = type_psnr(by_type[0]);
  c.psnr_p = type_psnr(by_type[1]);
  c.psnr_b = type_psnr(by_type[2]);
  c.avg_qp = has_qp ? qp / n : 0.0;
  c.elapsed_s = has_timing ? ms / 1000.0 : 0.0;

  StatsLog log;
  log.clip = c;
  log.frames = std::move(frames);
  log.fps = fps;
  log.has_qp = has_qp;
  log.has_timing = has_timing;
  return log;
}

const std::map<std::string, std::string>& x265_column_map() {
  static const std::map<std::string, std::string> map = {
      {"frame_type", "Type"},
      {"bits", "Bits"},
      {"psnr_y", "Y PSNR"},
      {"psnr_u", "U PSNR"},
      {"psnr_v", "V PSNR"},
      {"avg_chroma_dist", "Avg Chroma Distortion"},
      {"avg_res_energy", "Avg Residual Energy"},
      {"avg_luma", "Avg Luma Level"},
      {"avg_cb", "Avg Cb Level"},
      {"avg_cr", "Avg Cr Level"},
      // Not in stock x265 frame logs; expected from the lambda-scale build.
      {"ip_cost_ratio", "I/P cost ratio"},
      {"qp", "QP"},
      {"encode_ms", "Total frame time"},
  };
  return map;
}

StatsLog parse_stats(std::istream& in, LogFormat format, double fps) {
  std::string line;
  if (!std::getline(in, line) || detail::trim(line).empty()) {
    throw Error(Errc::EmptyLog, "statistics log is empty");
  }
  const auto header = detail::split_csv(line);
  const auto column_name = [format](const std::string& canonical) {
    return format == LogFormat::X265 ? x265_column_map().at(canonical) : canonical;
  };
  const auto find_column = [&](const std::string& canonical) -> std::optional<std::size_t> {
    const std::string name = column_name(canonical);
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return i;
    }
    return std::nullopt;
  };

  std::array<std::size_t, kRequiredColumns.size()> index{};
  for (std::size_t i = 0; i < kRequiredColumns.size(); ++i) {
    const auto col = find_column(kRequiredColumns[i]);
    if (!col) throw Error(Errc::MissingColumn, column_name(kRequiredColumns[i]));
    index[i] = *col;
  }
  const auto qp_col = find_column("qp");
  const auto ms_col = find_column("encode_ms");

  std::vector<FrameStats> frames;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    ++row;
    const auto fields = detail::split_csv(line);
    const auto malformed = [row](const std::string& why) {
      return Error(Errc::MalformedRow, "row " + std::to_string(row) + ": " + why);
    };
    if (fields.size() < header.size()) throw malformed("expected " + std::to_string(header.size()) + " fields");
    FrameStats f;
    const auto type = parse_type_field(fields[index[0]], format);
    if (!type) throw malformed("bad frame type '" + std::string(fields[index[0]]) + "'");
    f.type = *type;
    for (std::size_t c = 0; c < kNumericColumns.size(); ++c) {
      const auto value = detail::parse_double(fields[index[c + 1]]);
      if (!value) throw malformed("bad number in column " + std::string(kRequiredColumns[c + 1]));
      f.*(kNumericColumns[c].field) = *value;
    }
    if (qp_col) {
      const auto value = detail::parse_double(fields[*qp_col]);
      if (!value) throw malformed("bad number in column qp");
      f.qp = *value;
    }
    if (ms_col) {
      const auto value = detail::parse_double(fields[*ms_col]);
      if (!value) throw malformed("bad number in column encode_ms");
      f.encode_ms = *value;
    }
    frames.push_back(f);
  }
  if (frames.empty()) throw Error(Errc::EmptyLog, "statistics log has a header but no rows");
  return make_stats_log(std::move(frames), fps, qp_col.has_value(), ms_col.has_value());
}

StatsLog parse_stats_file(const std::string& path, LogFormat format, double fps) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::IoError, "cannot open " + path);
  return parse_stats(in, format, fps);
}

void write_stats(std::ostream& out, const StatsLog& log) {
  for (std::size_t i = 0; i < kRequiredColumns.size(); ++i) {
    out << (i ? "," : "") << kRequiredColumns[i];
  }
  if (log.has_qp) out << ",qp";
  if (log.has_timing) out << ",encode_ms";
  out << '\n';
  for (const auto& f : log.frames) {
    out << to_char(f.type);
    for (const auto& col : kNumericColumns) out << ',' << detail::shortest(f.*(col.field));
    if (log.has_qp) out << ',' << detail::shortest(f.qp);
    if (log.has_timing) out << ',' << detail::shortest(f.encode_ms);
    out << '\n';
  }
}

}  // namespace klambda
