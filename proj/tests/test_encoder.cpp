#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "klambda/bd_metrics.hpp"
#include "klambda/encoder.hpp"
#include "klambda/error.hpp"
#include "klambda/features.hpp"
#include "klambda/format.hpp"
#include "klambda/stats_log.hpp"
#include "test_util.hpp"

namespace klambda {
namespace {

using testing::synth_clip;
using testing::TempDir;

SyntheticClipParams example_params() {
  SyntheticClipParams p;
  p.r0 = 5000;
  p.gamma = 6;
  p.p0 = 45;
  p.s = 0.8;
  p.k_star = 1.0;
  p.g = 0.1;
  p.sigma = 0.5;
  return p;
}

TEST(SyntheticEncoder, ClosedFormAtAnchorCrf) {
  SyntheticEncoder enc;
  const auto r = enc.encode(synth_clip("c", example_params()), 22, 1.0);
  EXPECT_NEAR(r.point.rate, 4500.0, 1e-9);
  EXPECT_NEAR(r.point.quality, 45.0, 1e-12);
}

TEST(SyntheticEncoder, OneGammaStepHalvesRate) {
  SyntheticEncoder enc;
  const auto r = enc.encode(synth_clip("c", example_params()), 28, 1.0);
  EXPECT_NEAR(r.point.rate, 2250.0, 1e-9);
  EXPECT_NEAR(r.point.quality, 40.2, 1e-12);
}

TEST(SyntheticEncoder, Deterministic) {
  SyntheticEncoder enc;
  const auto clip = synth_clip("c", example_params());
  const auto a = enc.encode(clip, 30, 1.0);
  const auto b = enc.encode(clip, 30, 1.0);
  EXPECT_EQ(a.point, b.point);
  EXPECT_EQ(a.stats.frames, b.stats.frames);
  EXPECT_EQ(a.stats.clip, b.stats.clip);
}

TEST(SyntheticEncoder, CountsEveryEncode) {
  SyntheticEncoder enc;
  const auto clip = synth_clip("c", example_params());
  enc.encode(clip, 22, 1.0);
  EXPECT_EQ(enc.encode_count(), 1u);
  rd_curve(enc, clip, default_crf_list(), 0.9);
  EXPECT_EQ(enc.encode_count(), 6u);
}

TEST(SyntheticEncoder, RejectsBadArguments) {
  SyntheticEncoder enc;
  const auto clip = synth_clip("c", example_params());
  EXPECT_THROW(enc.encode(clip, 52, 1.0), Error);
  EXPECT_THROW(enc.encode(clip, 22, 0.0), Error);
  auto bad = example_params();
  bad.k_star = 5.0;
  EXPECT_THROW(enc.encode(synth_clip("b", bad), 22, 1.0), Error);
}

TEST(SyntheticEncoder, StatsMatchClipFrameCount) {
  SyntheticEncoder enc;
  EXPECT_EQ(enc.encode(synth_clip("c", example_params(), 90), 33, 1.0).stats.frames.size(), 90u);
}

TEST(SyntheticEncoder, LogAggregatesMatchClosedForm) {
  SyntheticEncoder enc;
  auto p = example_params();
  p.k_star = 0.7;
  p.seed = 99;
  for (int crf : {22, 33, 42}) {
    for (double k : {0.5, 1.0, 1.7}) {
      const auto r = enc.encode(synth_clip("c", p), crf, k);
      double bits = 0.0, global = 0.0;
      for (const auto& f : r.stats.frames) {
        bits += f.bits;
        global += (6 * f.psnr_y + f.psnr_u + f.psnr_v) / 8;
      }
      const double n = static_cast<double>(r.stats.frames.size());
      EXPECT_NEAR(bits / n * 30.0 / 1000.0, p.rate(crf, k), 1e-9 * p.rate(crf, k));
      EXPECT_NEAR(global / n, p.quality(crf), 1e-9);
      EXPECT_NEAR(r.stats.clip.avg_bitrate_kbps, p.rate(crf, k), 1e-9 * p.rate(crf, k));
      EXPECT_NEAR(r.stats.clip.psnr_global, p.quality(crf), 1e-9);
    }
  }
}

TEST(RdCurve, DefaultListGivesFivePoints) {
  SyntheticEncoder enc;
  const auto c = rd_curve(enc, synth_clip("c", example_params()), default_crf_list(), 1.0);
  EXPECT_EQ(c.size(), 5u);
  EXPECT_EQ(enc.encode_count(), 5u);
  EXPECT_EQ(c.label(), "k=1");
}

TEST(RdCurve, SingletonListIsTooFewPoints) {
  SyntheticEncoder enc;
  try {
    rd_curve(enc, synth_clip("c", example_params()), {22}, 1.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::TooFewPoints);
  }
}

TEST(RdCurve, AnchorIdentity) {
  SyntheticEncoder enc;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto p = example_params();
    p.seed = seed;
    p.k_star = 0.2 + 0.14 * static_cast<double>(seed);
    const auto clip = synth_clip("c", p);
    const auto a = rd_curve(enc, clip, default_crf_list(), 1.0);
    const auto b = rd_curve(enc, clip, default_crf_list(), 1.0);
    EXPECT_EQ(a, b);
    EXPECT_NEAR(bd_rate(a, b).bd_rate, 0.0, 1e-12);
  }
}

TEST(RdCurve, BdRateInKIsUnimodalWithMinimumAtKStar) {
  SyntheticEncoder enc;
  for (double k_star : {0.35, 0.7, 0.78, 1.2, 2.4}) {
    auto p = example_params();
    p.k_star = k_star;
    p.sigma = 0.2;
    p.g = 0.05;
    const auto clip = synth_clip("c", p);
    const auto anchor = rd_curve(enc, clip, default_crf_list(), 1.0);
    std::vector<double> ks, bds;
    for (int i = 0; i <= 280; ++i) {
      ks.push_back(0.2 + 0.01 * i);
      bds.push_back(bd_rate(anchor, rd_curve(enc, clip, default_crf_list(), ks.back())).bd_rate);
    }
    const auto best = static_cast<std::size_t>(std::min_element(bds.begin(), bds.end()) - bds.begin());
    EXPECT_NEAR(ks[best], k_star, 0.01 + 1e-9);
    for (std::size_t i = 1; i <= best; ++i) EXPECT_LE(bds[i], bds[i - 1] + 1e-12);
    for (std::size_t i = best + 1; i < bds.size(); ++i) EXPECT_GE(bds[i], bds[i - 1] - 1e-12);
  }
}

TEST(StatsLog, CanonicalRoundTripIsByteExact) {
  SyntheticEncoder enc;
  const auto log = enc.encode(synth_clip("c", example_params()), 33, 1.0).stats;
  std::ostringstream first;
  write_stats(first, log);
  std::istringstream in(first.str());
  const StatsLog parsed = parse_stats(in);
  EXPECT_EQ(parsed.frames.size(), 150u);
  std::ostringstream second;
  write_stats(second, parsed);
  EXPECT_EQ(first.str(), second.str());
  EXPECT_EQ(parsed.clip, log.clip);
}

TEST(StatsLog, MissingColumnIsNamed) {
  std::istringstream in(
      "frame_type,bits,psnr_y,psnr_v,avg_chroma_dist,avg_res_energy,avg_luma,avg_cb,avg_cr,ip_cost_ratio\n"
      "I,1000,40,42,41,3,20,120,128,128,0.5\n");
  try {
    parse_stats(in);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::MissingColumn);
    EXPECT_NE(std::string(e.what()).find("psnr_u"), std::string::npos);
  }
}

TEST(StatsLog, MalformedRowCarriesIndex) {
  std::istringstream in(
      "frame_type,bits,psnr_y,psnr_u,psnr_v,avg_chroma_dist,avg_res_energy,avg_luma,avg_cb,avg_cr,ip_cost_ratio\n"
      "I,1000,40,42,41,3,20,120,128,128,0.5\n"
      "P,900,x,42,41,3,20,120,128,128,0.5\n");
  try {
    parse_stats(in);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::MalformedRow);
    EXPECT_NE(std::string(e.what()).find("row 2"), std::string::npos);
  }
}

TEST(StatsLog, HeaderOnlyIsEmptyLog) {
  std::istringstream in(
      "frame_type,bits,psnr_y,psnr_u,psnr_v,avg_chroma_dist,avg_res_energy,avg_luma,avg_cb,avg_cr,ip_cost_ratio\n");
  try {
    parse_stats(in);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::EmptyLog);
  }
}

TEST(StatsLog, OptionalColumnsAbsentLeaveExtrasZero) {
  std::istringstream in(
      "frame_type,bits,psnr_y,psnr_u,psnr_v,avg_chroma_dist,avg_res_energy,avg_luma,avg_cb,avg_cr,ip_cost_ratio\n"
      "I,3000,40,44,44,3,20,120,128,128,0.5\n"
      "P,1000,38,42,42,3,20,120,128,128,0.5\n"
      "B,500,36,40,40,3,20,120,128,128,0.5\n"
      "B,500,36,40,40,3,20,120,128,128,0.5\n");
  const StatsLog log = parse_stats(in);
  EXPECT_FALSE(log.has_qp);
  EXPECT_EQ(log.clip.avg_qp, 0.0);
  EXPECT_EQ(log.clip.elapsed_s, 0.0);
  EXPECT_EQ(log.clip.count_i, 1);
  EXPECT_EQ(log.clip.count_b, 2);
  EXPECT_NEAR(log.clip.avg_bitrate_kbps, 5000.0 / 4 * 30 / 1000, 1e-12);
  EXPECT_NEAR(log.clip.bitrate_b, 500.0 * 30 / 1000, 1e-12);
  EXPECT_NEAR(log.clip.psnr_i[0], 40.0, 1e-12);
  EXPECT_NEAR(log.clip.psnr_global, ((6 * 40 + 88) / 8.0 + (6 * 38 + 84) / 8.0 + 2 * (6 * 36 + 80) / 8.0) / 4,
              1e-12);
}

TEST(StatsLog, ReadsX265ColumnNames) {
  std::istringstream in(
      "Encode Order, Type, POC, QP, Bits, Y PSNR, U PSNR, V PSNR, Avg Chroma Distortion, Avg Residual Energy,"
      " Avg Luma Level, Avg Cb Level, Avg Cr Level, I/P cost ratio, Total frame time\n"
      "0, I-SLICE, 0, 30, 4000, 40, 43, 44, 2.5, 25, 110, 127, 129, 0.4, 12.5\n"
      "1, b-SLICE, 2, 33, 800, 38, 42, 43, 2.7, 28, 111, 127, 129, 0.45, 4.5\n"
      "2, P-SLICE, 4, 31, 1500, 39, 42, 43, 2.6, 26, 112, 127, 129, 0.42, 6\n"
      "3, B-SLICE, 1, 33, 700, 38, 42, 43, 2.7, 28, 111, 127, 129, 0.45, 4\n");
  const StatsLog log = parse_stats(in, LogFormat::X265, 25.0);
  ASSERT_EQ(log.frames.size(), 4u);
  EXPECT_EQ(log.frames[0].type, FrameType::I);
  EXPECT_EQ(log.frames[1].type, FrameType::B);
  EXPECT_EQ(log.frames[2].type, FrameType::P);
  EXPECT_TRUE(log.has_qp);
  EXPECT_NEAR(log.clip.avg_qp, 31.75, 1e-12);
  EXPECT_NEAR(log.clip.elapsed_s, 0.027, 1e-12);
  EXPECT_NEAR(log.clip.avg_bitrate_kbps, 7000.0 / 4 * 25 / 1000, 1e-12);
}

TEST(ExternalEncoder, ExpandsPlaceholders) {
  ExternalEncoder enc("enc --in {input} --crf {crf} --k {k} -o {output} --csv {log}", "/work");
  ClipRef clip;
  clip.id = "clip 1";
  clip.source = std::filesystem::path("/videos/a.yuv");
  EXPECT_EQ(enc.expand(clip, 27, 0.782),
            "enc --in /videos/a.yuv --crf 27 --k 0.782 -o /work/clip_1_crf27_k0.782.bin "
            "--csv /work/clip_1_crf27_k0.782.csv");
}

TEST(ExternalEncoder, ReadsTheLogItWrote) {
  TempDir dir;
  SyntheticEncoder synth;
  const auto expected = synth.encode(synth_clip("c", example_params()), 27, 1.0);
  {
    std::ofstream fixture(dir.file("fixture.csv"));
    write_stats(fixture, expected.stats);
  }
  testing::write_file(dir.file("video.yuv"), "");
  ExternalEncoder enc("cp " + dir.file("fixture.csv") + " {log}", dir.path() / "work");
  ClipRef clip;
  clip.id = "video";
  clip.source = dir.path() / "video.yuv";
  const auto r = enc.encode(clip, 27, 1.0);
  EXPECT_EQ(enc.encode_count(), 1u);
  EXPECT_EQ(r.stats.frames.size(), 150u);
  EXPECT_NEAR(r.point.rate, expected.point.rate, 1e-9 * expected.point.rate);
  EXPECT_NEAR(r.point.quality, expected.point.quality, 1e-9);
}

TEST(ExternalEncoder, NonZeroExitIsEncoderFailure) {
  TempDir dir;
  ExternalEncoder enc("false", dir.path());
  ClipRef clip;
  clip.id = "v";
  clip.source = dir.path() / "v.yuv";
  try {
    enc.encode(clip, 27, 1.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::EncoderFailure);
  }
  EXPECT_EQ(enc.encode_count(), 1u);
}

TEST(ExternalEncoder, UnreadableLogIsLogParseFailure) {
  TempDir dir;
  ExternalEncoder enc("echo garbage > {log}", dir.path());
  ClipRef clip;
  clip.id = "v";
  clip.source = dir.path() / "v.yuv";
  try {
    enc.encode(clip, 27, 1.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::LogParseFailure);
  }
}

}  // namespace
}  // namespace klambda
