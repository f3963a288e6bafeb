#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "klambda/bd_metrics.hpp"
#include "klambda/stats_log.hpp"

namespace klambda {

/// Parametric clip model with a known optimal k.
///
/// quality(crf) = p0 - s (crf - 22)
/// rate(crf, k) = r0 2^(-(crf - 22) / gamma) (1 - g exp(-(ln k - ln k_star)^2 / (2 sigma^2)))
struct SyntheticClipParams {
  double r0 = 5000.0;
  double gamma = 6.0;
  double p0 = 45.0;
  double s = 0.8;
  double k_star = 1.0;
  double g = 0.1;
  double sigma = 0.5;
  std::uint64_t seed = 0;

  /// Throws InvalidArgument when a field is out of range.
  void validate() const;
  double quality(int crf) const;
  double rate(int crf, double k) const;

  friend bool operator==(const SyntheticClipParams&, const SyntheticClipParams&) = default;
};

struct ClipRef {
  std::string id;
  std::variant<SyntheticClipParams, std::filesystem::path> source;
  int frame_count = 150;
  int width = 1920;
  int height = 1080;

  bool is_synthetic() const { return std::holds_alternative<SyntheticClipParams>(source); }
  const SyntheticClipParams& synthetic() const { return std::get<SyntheticClipParams>(source); }
};

struct EncodeResult {
  RDPoint point;
  StatsLog stats;
};

inline const std::vector<int>& default_crf_list() {
  static const std::vector<int> crfs = {22, 27, 32, 37, 42};
  return crfs;
}

/// The CRF at which features for the predictor are collected, with k = 1.
inline constexpr int kFeatureCrf = 33;

/// Uniform encode interface. Every successful or failed encode attempt is
/// counted, and the counter is safe to read from any thread.
class EncoderBackend {
 public:
  virtual ~EncoderBackend() = default;

  /// Throws InvalidArgument for crf outside [0, 51] or k <= 0.
  EncodeResult encode(const ClipRef& clip, int crf, double k);

  std::uint64_t encode_count() const noexcept { return count_.load(); }
  virtual std::string identity() const = 0;

 protected:
  virtual EncodeResult do_encode(const ClipRef& clip, int crf, double k) = 0;

 private:
  std::atomic<std::uint64_t> count_{0};
};

/// Closed-form simulator. Pure: no filesystem or clock access.
class SyntheticEncoder final : public EncoderBackend {
 public:
  std::string identity() const override { return "synthetic"; }

 protected:
  EncodeResult do_encode(const ClipRef& clip, int crf, double k) override;
};

/// Per-frame statistics of a synthetic encode. Frame noise is seeded from the
/// clip seed and crf, and is recentred so that the aggregates equal the closed
/// form exactly (up to rounding).
StatsLog synthesize_stats(const SyntheticClipParams& params, int frame_count, int crf, double k);

/// Drives an external encoder through a command template.
///
/// Placeholders: {input} {crf} {k} {output} {log}. The binary must accept a
/// lambda scale argument and write a per-frame CSV log to {log}; the RD point
/// is read from that log (average bitrate, global PSNR).
class ExternalEncoder final : public EncoderBackend {
 public:
  ExternalEncoder(std::string command_template, std::filesystem::path work_dir,
                  LogFormat log_format = LogFormat::Canonical, double fps = 30.0);

  std::string identity() const override { return "external:" + template_; }

  /// Expands the template for one encode; exposed for inspection.
  std::string expand(const ClipRef& clip, int crf, double k) const;

 protected:
  EncodeResult do_encode(const ClipRef& clip, int crf, double k) override;

 private:
  std::filesystem::path artifact_stem(const ClipRef& clip, int crf, double k) const;

  std::string template_;
  std::filesystem::path work_dir_;
  LogFormat log_format_;
  double fps_;
};

/// One encode per CRF, validated into an RDCurve labelled "k=<k>".
RDCurve rd_curve(EncoderBackend& backend, const ClipRef& clip, const std::vector<int>& crf_list,
                 double k);

/// The demonstration clip used by `synth:demo` (k_star = 0.7).
SyntheticClipParams demo_clip_params();

}  // namespace klambda
