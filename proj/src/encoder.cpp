#include "klambda/encoder.hpp"

#include <sys/wait.h>

#include <cctype>
#include <cmath>
#include <cstdlib>
#include <system_error>

#include "klambda/error.hpp"
#include "klambda/format.hpp"
#include "klambda/rng.hpp"

namespace klambda {

void SyntheticClipParams::validate() const {
  const auto require = [](bool ok, const char* what) {
    if (!ok) throw Error(Errc::InvalidArgument, std::string("synthetic clip: ") + what);
  };
  require(r0 > 0.0 && std::isfinite(r0), "r0 must be positive");
  require(gamma > 0.0 && std::isfinite(gamma), "gamma must be positive");
  require(std::isfinite(p0), "p0 must be finite");
  require(s > 0.0 && std::isfinite(s), "s must be positive");
  require(k_star >= 0.2 && k_star <= 3.0, "k_star must lie in [0.2, 3]");
  require(g >= 0.0 && g < 0.5, "g must lie in [0, 0.5)");
  require(sigma > 0.0 && std::isfinite(sigma), "sigma must be positive");
}

double SyntheticClipParams::quality(int crf) const { return p0 - s * (crf - 22); }

double SyntheticClipParams::rate(int crf, double k) const {
  const double d = std::log(k) - std::log(k_star);
  const double dip = std::exp(-(d * d) / (2.0 * sigma * sigma));
  return r0 * std::exp2(-(crf - 22) / gamma) * (1.0 - g * dip);
}

SyntheticClipParams demo_clip_params() {
  SyntheticClipParams p;
  p.r0 = 5000.0;
  p.gamma = 6.0;
  p.p0 = 45.0;
  p.s = 0.8;
  p.k_star = 0.7;
  p.g = 0.1;
  p.sigma = 0.5;
  p.seed = 7;
  return p;
}

EncodeResult EncoderBackend::encode(const ClipRef& clip, int crf, double k) {
  if (crf < 0 || crf > 51) {
    throw Error(Errc::InvalidArgument, "crf " + std::to_string(crf) + " outside [0, 51]");
  }
  if (!(k > 0.0) || !std::isfinite(k)) throw Error(Errc::InvalidArgument, "k must be positive");
  if (clip.frame_count < 1) throw Error(Errc::InvalidArgument, "clip has no frames");
  count_.fetch_add(1);
  return do_encode(clip, crf, k);
}

namespace {

FrameType frame_type_at(int index) {
  if (index == 0) return FrameType::I;
  return index % 4 == 0 ? FrameType::P : FrameType::B;
}

double symmetric(Rng& rng) { return 2.0 * rng.uniform() - 1.0; }

}  // namespace

StatsLog synthesize_stats(const SyntheticClipParams& params, int frame_count, int crf, double k) {
  constexpr double kFps = 30.0;
  const auto n = static_cast<std::size_t>(frame_count);

  // Clip content: fixed per seed, shared by every encode of the clip.
  Rng content(mix_seed(params.seed, 0));
  const double luma_level = content.uniform(60.0, 180.0);
  const double cb_level = content.uniform(118.0, 138.0);
  const double cr_level = content.uniform(118.0, 138.0);
  const double u_offset = content.uniform(0.5, 3.0);
  const double v_offset = content.uniform(0.5, 3.0);
  const double chroma_scale = content.uniform(2.0, 6.0);
  // Temporal complexity descriptors track the log distance of k_star from 0.75.
  const double log_offset = std::log(params.k_star / 0.75);
  const double ip_ratio = 0.45 + 0.12 * log_offset;
  const double residual = 30.0 * std::exp(0.3 * log_offset);

  Rng noise(mix_seed(params.seed, 1000 + static_cast<std::uint64_t>(crf)));
  std::vector<FrameStats> frames(n);
  double weight_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    auto& f = frames[i];
    f.type = frame_type_at(static_cast<int>(i));
    const double type_weight = f.type == FrameType::I ? 8.0 : f.type == FrameType::P ? 3.0 : 1.0;
    f.bits = type_weight * (1.0 + 0.15 * symmetric(noise));
    weight_sum += f.bits;
    const double type_psnr = f.type == FrameType::I ? 0.6 : f.type == FrameType::P ? 0.2 : -0.3;
    f.psnr_y = type_psnr + 0.3 * symmetric(noise);
    f.psnr_u = f.psnr_y + u_offset + 0.3 * symmetric(noise);
    f.psnr_v = f.psnr_y + v_offset + 0.3 * symmetric(noise);
    f.ip_cost_ratio = ip_ratio + 0.03 * symmetric(noise);
    f.avg_res_energy =
        residual * std::exp2(-(crf - 22) / 10.0) * (1.0 + 0.1 * symmetric(noise));
    f.avg_chroma_dist =
        chroma_scale * std::exp2((crf - 22) / 8.0) * (1.0 + 0.1 * symmetric(noise));
    f.avg_luma = luma_level + 5.0 * symmetric(noise);
    f.avg_cb = cb_level + 2.0 * symmetric(noise);
    f.avg_cr = cr_level + 2.0 * symmetric(noise);
    f.qp = crf + (f.type == FrameType::I ? -3.0 : f.type == FrameType::P ? -1.0 : 1.0);
  }

  // Rescale bits so the average bitrate is the closed-form rate, and shift all
  // three planes so the mean global PSNR is the closed-form quality.
  const double total_bits = params.rate(crf, k) * 1000.0 * static_cast<double>(n) / kFps;
  const double target_q = params.quality(crf);
  double global_sum = 0.0;
  for (auto& f : frames) {
    f.bits *= total_bits / weight_sum;
    global_sum += (6.0 * f.psnr_y + f.psnr_u + f.psnr_v) / 8.0;
  }
  const double shift = target_q - global_sum / static_cast<double>(n);
  for (auto& f : frames) {
    f.psnr_y += shift;
    f.psnr_u += shift;
    f.psnr_v += shift;
    f.encode_ms = 2.0 + f.bits * 1e-4;
  }
  return make_stats_log(std::move(frames), kFps, true, true);
}

EncodeResult SyntheticEncoder::do_encode(const ClipRef& clip, int crf, double k) {
  if (!clip.is_synthetic()) {
    throw Error(Errc::InvalidArgument, "synthetic backend cannot encode file clip " + clip.id);
  }
  const auto& params = clip.synthetic();
  params.validate();
  EncodeResult result;
  result.stats = synthesize_stats(params, clip.frame_count, crf, k);
  result.point = {params.rate(crf, k), params.quality(crf)};
  return result;
}

ExternalEncoder::ExternalEncoder(std::string command_template, std::filesystem::path work_dir,
                                 LogFormat log_format, double fps)
    : template_(std::move(command_template)),
      work_dir_(std::move(work_dir)),
      log_format_(log_format),
      fps_(fps) {}

std::filesystem::path ExternalEncoder::artifact_stem(const ClipRef& clip, int crf, double k) const {
  std::string safe;
  for (char c : clip.id) safe += std::isalnum(static_cast<unsigned char>(c)) ? c : '_';
  return work_dir_ / (safe + "_crf" + std::to_string(crf) + "_k" + format_number(k));
}

std::string ExternalEncoder::expand(const ClipRef& clip, int crf, double k) const {
  const auto stem = artifact_stem(clip, crf, k);
  const std::string input =
      clip.is_synthetic() ? std::string() : std::get<std::filesystem::path>(clip.source).string();
  const std::pair<std::string, std::string> replacements[] = {
      {"{input}", input},
      {"{crf}", std::to_string(crf)},
      {"{k}", format_number(k)},
      {"{output}", stem.string() + ".bin"},
      {"{log}", stem.string() + ".csv"},
  };
  std::string cmd = template_;
  for (const auto& [key, value] : replacements) {
    for (auto pos = cmd.find(key); pos != std::string::npos; pos = cmd.find(key, pos + value.size())) {
      cmd.replace(pos, key.size(), value);
    }
  }
  return cmd;
}

EncodeResult ExternalEncoder::do_encode(const ClipRef& clip, int crf, double k) {
  if (clip.is_synthetic()) {
    throw Error(Errc::InvalidArgument, "external backend needs a file clip, got synthetic " + clip.id);
  }
  std::error_code ec;
  std::filesystem::create_directories(work_dir_, ec);
  const std::string cmd = expand(clip, crf, k);
  const int status = std::system(cmd.c_str());
  if (status == -1 || !WIFEXITED(status) || WEXITSTATUS(status) != 0) {
    throw Error(Errc::EncoderFailure, "command failed (status " + std::to_string(status) + "): " + cmd);
  }
  const auto log_path = artifact_stem(clip, crf, k).string() + ".csv";
  EncodeResult result;
  try {
    result.stats = parse_stats_file(log_path, log_format_, fps_);
  } catch (const Error& e) {
    throw Error(Errc::LogParseFailure, log_path + ": " + e.what());
  }
  result.point = {result.stats.clip.avg_bitrate_kbps, result.stats.clip.psnr_global};
  return result;
}

RDCurve rd_curve(EncoderBackend& backend, const ClipRef& clip, const std::vector<int>& crf_list,
                 double k) {
  if (crf_list.empty()) throw Error(Errc::InvalidArgument, "empty CRF list");
  std::vector<RDPoint> points;
  points.reserve(crf_list.size());
  for (int crf : crf_list) points.push_back(backend.encode(clip, crf, k).point);
  return validate_curve(std::move(points), "k=" + format_number(k));
}

}  // namespace klambda
