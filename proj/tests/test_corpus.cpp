#include <gtest/gtest.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <set>
#include <sstream>

#include "klambda/corpus.hpp"
#include "klambda/error.hpp"
#include "test_util.hpp"

namespace klambda {
namespace {

template <typename F>
Errc code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no exception";
  return Errc::UnknownCommand;
}

ClipOutcome outcome(double gain) {
  ClipOutcome o;
  o.bd_gain = gain;
  o.bd_rate = -gain;
  o.final_gain = std::max(0.0, gain);
  return o;
}

TEST(Manifest, RoundTripPreservesClips) {
  auto clips = synthetic_corpus(5, 11);
  ClipRef file_clip;
  file_clip.id = "park_joy";
  file_clip.source = std::filesystem::path("/data/park_joy_1080p.y4m");
  file_clip.frame_count = 120;
  file_clip.width = 1280;
  file_clip.height = 720;
  clips.push_back(file_clip);

  std::stringstream buf;
  write_manifest(buf, clips);
  const auto back = read_manifest(buf);
  ASSERT_EQ(back.size(), clips.size());
  for (std::size_t i = 0; i < clips.size(); ++i) {
    EXPECT_EQ(back[i].id, clips[i].id);
    EXPECT_EQ(back[i].source, clips[i].source);
    EXPECT_EQ(back[i].frame_count, clips[i].frame_count);
    EXPECT_EQ(back[i].width, clips[i].width);
    EXPECT_EQ(back[i].height, clips[i].height);
  }
}

TEST(Manifest, DuplicateIdsAndBadLinesAreRejected) {
  std::stringstream dup(R"({"id":"a","source":"x.y4m"}
{"id":"a","source":"y.y4m"}
)");
  EXPECT_EQ(code_of([&] { read_manifest(dup); }), Errc::InvalidArgument);
  std::stringstream bad("{\"id\":\n");
  EXPECT_EQ(code_of([&] { read_manifest(bad); }), Errc::FormatError);
}

TEST(SyntheticCorpus, DeterministicAndValid) {
  const auto a = synthetic_corpus(200, 42), b = synthetic_corpus(200, 42);
  std::set<std::string> ids;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].source, b[i].source);
    EXPECT_NO_THROW(a[i].synthetic().validate());
    EXPECT_GE(a[i].synthetic().k_star, 0.2);
    EXPECT_LE(a[i].synthetic().k_star, 3.0);
    ids.insert(a[i].id);
  }
  EXPECT_EQ(ids.size(), a.size());
  EXPECT_NE(synthetic_corpus(3, 43)[0].source, a[0].source);
}

TEST(ParallelFor, VisitsEveryIndexOnceAndRethrows) {
  std::vector<std::atomic<int>> hits(500);
  parallel_for(hits.size(), 4, [&](std::size_t i) { ++hits[i]; });
  for (const auto& h : hits) EXPECT_EQ(h.load(), 1);
  EXPECT_THROW(parallel_for(10, 3,
                            [](std::size_t i) {
                              if (i == 7) throw Error(Errc::IoError, "boom");
                            }),
               Error);
}

TEST(LabelCorpus, RecoversPlantedOptimaAcrossHundredClips) {
  SyntheticEncoder enc;
  const auto clips = synthetic_corpus(100, 9);
  OptConfig cfg;
  const LabelRun run = label_corpus(clips, enc, cfg, std::nullopt, 4);
  ASSERT_EQ(run.labels.size(), clips.size());
  EXPECT_TRUE(run.failures.empty());
  std::uint64_t encodes = 0;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    EXPECT_EQ(run.labels[i].clip_id, clips[i].id);
    EXPECT_NEAR(run.labels[i].k_opt, clips[i].synthetic().k_star, cfg.tol) << clips[i].id;
    EXPECT_GE(run.labels[i].bd_gain, 0.0);
    encodes += run.labels[i].encodes_used;
  }
  EXPECT_EQ(enc.encode_count(), encodes);
}

TEST(LabelCorpus, EmptyManifest) {
  SyntheticEncoder enc;
  EXPECT_EQ(code_of([&] { label_corpus({}, enc, OptConfig{}); }), Errc::EmptyManifest);
}

TEST(LabelCorpus, ResumeReusesStoredClips) {
  testing::TempDir dir;
  const auto clips = synthetic_corpus(6, 2);
  SyntheticEncoder first;
  const std::vector<ClipRef> head(clips.begin(), clips.begin() + 4);
  const LabelRun partial = label_corpus(head, first, OptConfig{}, dir.path(), 2);
  EXPECT_EQ(partial.resumed, 0u);

  SyntheticEncoder second;
  const LabelRun full = label_corpus(clips, second, OptConfig{}, dir.path(), 2);
  EXPECT_EQ(full.resumed, 4u);
  std::uint64_t fresh = 0;
  for (std::size_t i = 4; i < clips.size(); ++i) fresh += full.labels[i].encodes_used;
  EXPECT_EQ(second.encode_count(), fresh);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(full.labels[i].k_opt, partial.labels[i].k_opt);
    EXPECT_EQ(full.labels[i].bd_gain, partial.labels[i].bd_gain);
  }

  OptConfig finer;
  finer.tol = 0.005;
  SyntheticEncoder third;
  EXPECT_EQ(label_corpus(head, third, finer, dir.path()).resumed, 0u);
}

TEST(LabelCorpus, BudgetFailuresKeepBestPoint) {
  SyntheticEncoder enc;
  OptConfig cfg;
  cfg.max_iters = 2;
  const LabelRun run = label_corpus(synthetic_corpus(2, 4), enc, cfg);
  EXPECT_TRUE(run.labels.empty());
  ASSERT_EQ(run.failures.size(), 2u);
  for (const auto& f : run.failures) {
    EXPECT_NE(f.error.find("BudgetExceeded"), std::string::npos);
    EXPECT_GT(f.encodes_used, 0u);
  }
}

TEST(LabelsCsv, RoundTripAndErrors) {
  std::vector<ClipLabel> labels(2);
  labels[0] = {"a", 0.75, 3.5, 70};
  labels[1] = {"b", 1.25, 0.0, 65};
  std::stringstream buf;
  write_labels_csv(buf, labels);
  EXPECT_EQ(buf.str(), "clip_id,k_opt,bd_gain_pct,encodes_used\na,0.75,3.5,70\nb,1.25,0,65\n");
  const auto back = read_labels_csv(buf);
  EXPECT_EQ(back.at("a"), 0.75);
  EXPECT_EQ(back.at("b"), 1.25);

  std::stringstream alt("k,clip_id\n0.5,x\n");
  EXPECT_EQ(read_labels_csv(alt).at("x"), 0.5);
  std::stringstream missing("clip_id,gain\nx,1\n");
  EXPECT_EQ(code_of([&] { read_labels_csv(missing); }), Errc::MissingColumn);
  std::stringstream bad("clip_id,k_opt\nx,abc\n");
  EXPECT_EQ(code_of([&] { read_labels_csv(bad); }), Errc::MalformedRow);
}

TEST(Split, SizesDisjointnessAndDeterminism) {
  const auto [train, test] = split_indices(10, 0.7, 42);
  EXPECT_EQ(train.size(), 7u);
  EXPECT_EQ(test.size(), 3u);
  std::set<std::size_t> all(train.begin(), train.end());
  all.insert(test.begin(), test.end());
  EXPECT_EQ(all.size(), 10u);
  EXPECT_EQ(split_indices(10, 0.7, 42), split_indices(10, 0.7, 42));
  EXPECT_NE(split_indices(100, 0.7, 42), split_indices(100, 0.7, 43));
}

TEST(Split, DegenerateRequests) {
  EXPECT_EQ(code_of([] { split_indices(1, 0.5, 1); }), Errc::TooFew);
  EXPECT_EQ(code_of([] { split_indices(10, 0.0, 1); }), Errc::InvalidFraction);
  EXPECT_EQ(code_of([] { split_indices(10, 1.0, 1); }), Errc::InvalidFraction);
  EXPECT_EQ(code_of([] { split_indices(3, 0.1, 1); }), Errc::InvalidFraction);
}

TEST(Summary, HandComputedExample) {
  const SummaryStats s = summarize({outcome(2.0), outcome(0.5), outcome(-1.0)});
  EXPECT_EQ(s.clips, 3u);
  EXPECT_NEAR(s.pct_gain_ge_0, 200.0 / 3, 1e-12);
  EXPECT_NEAR(s.pct_gain_gt_0p1, 200.0 / 3, 1e-12);
  EXPECT_NEAR(s.pct_gain_gt_1, 100.0 / 3, 1e-12);
  EXPECT_EQ(s.best_gain, 2.0);
  EXPECT_NEAR(s.avg_final_gain, 2.5 / 3, 1e-12);
}

TEST(Summary, EdgeCases) {
  const SummaryStats neg = summarize({outcome(-0.5), outcome(-2.0)});
  EXPECT_EQ(neg.pct_gain_ge_0, 0.0);
  EXPECT_EQ(neg.avg_final_gain, 0.0);
  EXPECT_EQ(neg.best_gain, -0.5);
  const SummaryStats one = summarize({outcome(23.9)});
  EXPECT_EQ(one.best_gain, 23.9);
  EXPECT_EQ(one.avg_final_gain, 23.9);
  EXPECT_EQ(one.pct_gain_gt_1, 100.0);
  EXPECT_EQ(code_of([] { summarize({}); }), Errc::EmptyOutcomes);
}

TEST(Summary, JsonRoundTrip) {
  ClipOutcome o = outcome(1.234567891234);
  o.clip_id = "c1";
  o.k_used = 0.7;
  o.encodes_used = 10;
  const ClipOutcome back = outcome_from_json(outcome_json(o));
  EXPECT_EQ(back.clip_id, "c1");
  EXPECT_EQ(back.k_used, 0.7);
  EXPECT_NEAR(back.bd_gain, o.bd_gain, 1e-8);
  EXPECT_EQ(back.encodes_used, 10u);
  EXPECT_EQ(code_of([] { outcome_from_json("{}"); }), Errc::FormatError);
  EXPECT_EQ(summary_json(summarize({outcome(1.0), outcome(-1.0)})),
            R"({"clips":2,"pct_gain_ge_0":50.0,"pct_gain_gt_0p1":50.0,"pct_gain_gt_1":0.0,)"
            R"("best_gain_pct":1.0,"avg_final_gain_pct":0.5})");
}

TEST(Evaluate, UnitScaleGivesZeroEverywhere) {
  SyntheticEncoder enc;
  const auto clips = synthetic_corpus(8, 6);
  const Evaluation e = evaluate_two_pass(clips, FixedK{1.0}, enc);
  for (const auto& o : e.outcomes) {
    EXPECT_EQ(o.bd_rate, 0.0);
    EXPECT_EQ(o.final_gain, 0.0);
    EXPECT_EQ(o.encodes_used, 10u);
    EXPECT_EQ(o.feature_encodes, 0u);
  }
  EXPECT_EQ(enc.encode_count(), 80u);
  EXPECT_EQ(e.summary.pct_gain_ge_0, 100.0);
}

TEST(Evaluate, OracleDominatesAnyFixedScale) {
  SyntheticEncoder enc;
  const auto clips = synthetic_corpus(30, 12);
  const LabelRun run = label_corpus(clips, enc, OptConfig{}, std::nullopt, 4);
  OracleK oracle;
  for (const auto& l : run.labels) oracle.labels[l.clip_id] = l.k_opt;
  const Evaluation best = evaluate_two_pass(clips, oracle, enc, default_crf_list(), 4);
  for (double k : {0.5, 0.75, 1.5}) {
    const Evaluation fixed = evaluate_two_pass(clips, FixedK{k}, enc, default_crf_list(), 4);
    for (std::size_t i = 0; i < clips.size(); ++i) {
      EXPECT_GE(best.outcomes[i].final_gain, fixed.outcomes[i].final_gain - 1e-3) << clips[i].id;
      EXPECT_GE(fixed.outcomes[i].final_gain, 0.0);
    }
    EXPECT_GE(best.summary.avg_final_gain, fixed.summary.avg_final_gain);
  }
  for (std::size_t i = 0; i < clips.size(); ++i) {
    EXPECT_NEAR(best.outcomes[i].bd_gain, run.labels[i].bd_gain, 1e-9);
  }
}

TEST(Evaluate, OracleWithoutLabelIsRejected) {
  SyntheticEncoder enc;
  EXPECT_EQ(code_of([&] { evaluate_two_pass(synthetic_corpus(2, 1), OracleK{}, enc); }),
            Errc::InvalidArgument);
  EXPECT_EQ(code_of([&] { evaluate_two_pass(synthetic_corpus(2, 1), ModelK{}, enc); }),
            Errc::InvalidArgument);
}

TEST(Figures, CdfOfSmallSet) {
  const auto cdf = gain_cdf({3.0, 1.0, 2.0, 2.0});
  ASSERT_EQ(cdf.size(), 3u);
  EXPECT_EQ(cdf[0].gain, 1.0);
  EXPECT_EQ(cdf[0].fraction, 1.0);
  EXPECT_EQ(cdf[1].gain, 2.0);
  EXPECT_EQ(cdf[1].fraction, 0.75);
  EXPECT_EQ(cdf[2].fraction, 0.25);
  const auto three = gain_cdf({1.0, 2.0, 3.0});
  EXPECT_EQ(three[1].gain, 2.0);
  EXPECT_DOUBLE_EQ(three[1].fraction, 2.0 / 3);
  EXPECT_EQ(code_of([] { gain_cdf({}); }), Errc::EmptyInput);
}

TEST(Figures, CdfIsNonIncreasing) {
  Rng rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> gains;
    for (int i = 0; i < 50; ++i) gains.push_back(std::round(rng.uniform(-5, 25) * 4) / 4);
    const auto cdf = gain_cdf(gains);
    for (std::size_t i = 1; i < cdf.size(); ++i) {
      EXPECT_GT(cdf[i].gain, cdf[i - 1].gain);
      EXPECT_LT(cdf[i].fraction, cdf[i - 1].fraction);
    }
    EXPECT_GT(cdf.back().fraction, 0.0);
  }
}

TEST(Figures, HistogramBinsAndMass) {
  const auto bins = k_histogram({0.75, 0.75, 0.75, 0.7, 3.0, 0.1, 5.0});
  ASSERT_EQ(bins.size(), 28u);
  EXPECT_NEAR(bins[5].low, 0.7, 1e-12);
  EXPECT_NEAR(bins[5].high, 0.8, 1e-12);
  EXPECT_EQ(bins[5].count, 4u);
  EXPECT_EQ(bins.front().count, 1u);
  EXPECT_EQ(bins.back().count, 2u);

  Rng rng(3);
  std::vector<double> ks;
  for (int i = 0; i < 1000; ++i) ks.push_back(rng.uniform(0.0, 4.0));
  std::size_t total = 0;
  for (const auto& b : k_histogram(ks)) total += b.count;
  EXPECT_EQ(total, ks.size());
  EXPECT_EQ(code_of([] { k_histogram({}); }), Errc::EmptyInput);
}

TEST(Figures, AverageCurveDipsWhereOptimaCluster) {
  SyntheticEncoder enc;
  CorpusShape tight;
  tight.concentrated = 1.0;
  const auto clips = synthetic_corpus(12, 8, tight);
  const auto grid = parse_grid("0.5:0.02:1.2");
  std::vector<std::vector<TracePoint>> sweeps;
  for (const auto& c : clips) sweeps.push_back(sweep_k(enc, c, grid));
  const auto avg = k_average(sweeps);
  ASSERT_EQ(avg.size(), grid.size());
  const auto lowest = std::min_element(avg.begin(), avg.end(),
                                       [](const auto& a, const auto& b) { return a.bd_rate < b.bd_rate; });
  EXPECT_GE(lowest->k, 0.7 - 1e-9);
  EXPECT_LE(lowest->k, 0.8 + 1e-9);
  double sum = 0.0;
  for (const auto& s : sweeps) sum += s[3].bd_rate;
  EXPECT_NEAR(avg[3].bd_rate, sum / static_cast<double>(sweeps.size()), 1e-12);

  sweeps.back().pop_back();
  EXPECT_EQ(code_of([&] { k_average(sweeps); }), Errc::DimensionMismatch);
}

TEST(Figures, EmitWritesRequestedFiles) {
  testing::TempDir dir;
  const auto written = emit_figures(dir.path(), {outcome(1.0), outcome(2.0)}, {}, {0.75, 1.1});
  ASSERT_EQ(written.size(), 2u);
  EXPECT_EQ(testing::read_file(dir.path() / "cdf.csv"),
            "gain_pct,fraction_of_corpus_ge\n1,1\n2,0.5\n");
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "k_hist.csv"));
  EXPECT_FALSE(std::filesystem::exists(dir.path() / "k_avg.csv"));
  EXPECT_EQ(code_of([&] { emit_figures(dir.path(), {}, {}, {}); }), Errc::EmptyInput);
}

}  // namespace
}  // namespace klambda
