#include <gtest/gtest.h>

#include <nlohmann/json.hpp>
#include <sstream>

#include "klambda/cli.hpp"
#include "klambda/config.hpp"
#include "klambda/error.hpp"
#include "test_util.hpp"

namespace klambda {
namespace {

using nlohmann::json;
using testing::read_file;
using testing::TempDir;
using testing::write_file;

struct CliResult {
  int code = 0;
  std::string out;
  std::string err;
};

CliResult run(std::vector<std::string> args) {
  std::ostringstream out, err;
  CliResult r;
  r.code = dispatch(std::move(args), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

Config parse_config(const std::string& text) {
  std::istringstream in(text);
  return Config::parse(in);
}

Errc config_error(const std::string& text) {
  try {
    parse_config(text);
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "accepted: " << text;
  return Errc::UnknownCommand;
}

TEST(Config, SectionsTypesAndComments) {
  const Config c = parse_config(R"(# corpus settings
jobs = 4
[optimizer]
tol = 0.005   # finer
kmin = 0.3
crf_list = [22, 27, 32]
[encoder]
cmd = "x265 --input {input} # not a comment"
[train]
final_batch_norm = false
)");
  EXPECT_EQ(c.integer("jobs"), 4);
  EXPECT_EQ(c.number("optimizer.tol"), 0.005);
  EXPECT_EQ(c.int_list("optimizer.crf_list"), (std::vector<int>{22, 27, 32}));
  EXPECT_EQ(c.string("encoder.cmd"), "x265 --input {input} # not a comment");
  EXPECT_EQ(c.boolean("train.final_batch_norm"), false);
  EXPECT_FALSE(c.number("optimizer.kmax").has_value());
  EXPECT_TRUE(c.contains("optimizer.kmin"));
  EXPECT_EQ(c.snapshot().at("optimizer.crf_list"), "[22, 27, 32]");
}

TEST(Config, MalformedInputNamesTheLine) {
  EXPECT_EQ(config_error("a = 1\na = 2\n"), Errc::FormatError);
  EXPECT_EQ(config_error("[open\n"), Errc::FormatError);
  EXPECT_EQ(config_error("novalue\n"), Errc::FormatError);
  EXPECT_EQ(config_error("x = \"half\n"), Errc::FormatError);
  EXPECT_EQ(config_error("x = [1, 2\n"), Errc::FormatError);
  try {
    parse_config("ok = 1\n\nbad line\n");
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
  }
}

TEST(Config, WrongTypeLookups) {
  const Config c = parse_config("n = abc\nf = 1.5\nl = [1, 2]\nb = yes\n");
  EXPECT_THROW(c.number("n"), Error);
  EXPECT_THROW(c.integer("f"), Error);
  EXPECT_THROW(c.number("l"), Error);
  EXPECT_THROW(c.boolean("b"), Error);
  EXPECT_THROW(Config::load("/nonexistent.toml"), Error);
}

TEST(SynthSpec, DemoAndExplicitParameters) {
  const auto demo = parse_synth_spec("synth:demo");
  ASSERT_TRUE(demo);
  EXPECT_EQ(demo->synthetic().k_star, 0.7);
  const auto custom = parse_synth_spec("synth:k_star=1.3,g=0.05,frames=90");
  ASSERT_TRUE(custom);
  EXPECT_EQ(custom->synthetic().k_star, 1.3);
  EXPECT_EQ(custom->synthetic().g, 0.05);
  EXPECT_EQ(custom->frame_count, 90);
  EXPECT_FALSE(parse_synth_spec("clip.y4m"));
  EXPECT_THROW(parse_synth_spec("synth:speed=3"), Error);
  EXPECT_THROW(parse_synth_spec("synth:k_star=abc"), Error);
}

TEST(Cli, LambdaExamples) {
  EXPECT_EQ(run({"lambda", "--q", "12", "--type", "P", "--k", "1"}).out, "0.85\n");
  EXPECT_EQ(run({"lambda", "--q", "12", "--type", "I"}).out, "0.57\n");
  EXPECT_EQ(run({"lambda", "--q", "10", "--legacy"}).out, "85\n");
  const CliResult bad = run({"lambda", "--q", "60"});
  EXPECT_EQ(bad.code, 1);
  EXPECT_EQ(json::parse(bad.err).at("error"), "InvalidArgument");
}

TEST(Cli, UnknownAndMissingCommandsExitTwo) {
  const CliResult r = run({"frobnicate"});
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(json::parse(r.err).at("error"), "UnknownCommand");
  EXPECT_EQ(run({}).code, 2);
}

TEST(Cli, ParseErrorsExitOne) {
  const CliResult r = run({"encode", "--clip", "synth:demo"});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(json::parse(r.err).at("error"), "InvalidArgument");
  EXPECT_EQ(run({"lambda", "--q", "12", "--k", "-1"}).code, 1);
}

TEST(Cli, VersionAndHelp) {
  const CliResult v = run({"--version"});
  EXPECT_EQ(v.code, 0);
  EXPECT_NE(v.out.find(kToolkitVersion), std::string::npos);
  const CliResult h = run({"optimize", "--help"});
  EXPECT_EQ(h.code, 0);
  EXPECT_NE(h.out.find("--tol"), std::string::npos);
}

TEST(Cli, OptimizeDemoClip) {
  const CliResult r = run({"optimize", "--clip", "synth:demo"});
  ASSERT_EQ(r.code, 0) << r.err;
  const json j = json::parse(r.out);
  EXPECT_NEAR(j.at("k_opt").get<double>(), 0.7, 0.01);
  EXPECT_EQ(j.at("encodes_used").get<int>(), 5 * (1 + static_cast<int>(j.at("trace").size())));
  EXPECT_LT(j.at("bd_rate_at_k_opt").get<double>(), 0.0);
}

TEST(Cli, OptimizeBudgetPrintsBestThenFails) {
  const CliResult r = run({"optimize", "--clip", "synth:demo", "--max-iters", "2"});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(json::parse(r.err).at("error"), "BudgetExceeded");
  EXPECT_GT(json::parse(r.out).at("trace").size(), 0u);
}

TEST(Cli, FlagsOverrideConfigOverridesDefaults) {
  TempDir dir;
  write_file(dir.path() / "k.toml", "[optimizer]\ntol = 0.1\nmax_iters = 40\n");
  const auto iterations = [&](std::vector<std::string> extra) {
    std::vector<std::string> args = {"optimize", "--clip", "synth:demo"};
    args.insert(args.end(), extra.begin(), extra.end());
    const CliResult r = run(args);
    EXPECT_EQ(r.code, 0) << r.err;
    return json::parse(r.out).at("iterations").get<int>();
  };
  const int defaults = iterations({});
  const int from_config = iterations({"--config", dir.file("k.toml")});
  const int from_flag = iterations({"--config", dir.file("k.toml"), "--tol", "0.001"});
  EXPECT_LT(from_config, defaults);
  EXPECT_GT(from_flag, defaults);
}

TEST(Cli, SweepWritesCsvAndMetadata) {
  TempDir dir;
  const CliResult r = run({"sweep", "--clip", "synth:demo", "--grid", "0.5:0.1:1", "--out", dir.file("s.csv")});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string csv = read_file(dir.path() / "s.csv");
  EXPECT_EQ(csv.rfind("k,bd_rate_pct\n0.5,", 0), 0u);
  EXPECT_NE(csv.find("\n1,0\n"), std::string::npos);
  const json meta = json::parse(read_file(dir.file("s.csv.meta.json")));
  EXPECT_EQ(meta.at("toolkit_version"), kToolkitVersion);
  EXPECT_EQ(meta.at("command"), "sweep");
  EXPECT_EQ(meta.at("backend"), "synthetic");
  EXPECT_EQ(meta.at("encodes").get<int>(), 5 * 6);
  EXPECT_TRUE(meta.at("assumptions").contains("rd_quality"));
  EXPECT_FALSE(meta.contains("wall_clock_s"));
}

TEST(Cli, BdRateFromCsvFiles) {
  TempDir dir;
  write_file(dir.path() / "a.csv", "rate_kbps,psnr_db\n1000,34\n2000,37\n4000,40\n8000,43\n");
  write_file(dir.path() / "b.csv", "rate_kbps,psnr_db\n500,34\n1000,37\n2000,40\n4000,43\n");
  const CliResult same = run({"bdrate", "--anchor", dir.file("a.csv"), "--test", dir.file("a.csv")});
  ASSERT_EQ(same.code, 0) << same.err;
  EXPECT_EQ(json::parse(same.out).at("bd_rate_pct").get<double>(), 0.0);
  const CliResult half = run({"bdrate", "--anchor", dir.file("a.csv"), "--test", dir.file("b.csv")});
  EXPECT_NEAR(json::parse(half.out).at("bd_rate_pct").get<double>(), -50.0, 1e-6);
}

TEST(Cli, EncodeStatsFeedFeaturesAndSelftestPasses) {
  TempDir dir;
  const CliResult e = run({"encode", "--clip", "synth:demo", "--crf", "33", "--stats-out", dir.file("d.csv")});
  ASSERT_EQ(e.code, 0) << e.err;
  const CliResult f = run({"features", "--stats", dir.file("d.csv"), "--id", "demo"});
  ASSERT_EQ(f.code, 0) << f.err;
  EXPECT_EQ(f.out.rfind("clip_id,", 0), 0u);
  const CliResult direct = run({"features", "--clip", "synth:demo"});
  const auto values = [](const std::string& csv) {
    const std::string row = csv.substr(csv.find('\n') + 1);
    return row.substr(row.find(','));
  };
  EXPECT_EQ(values(direct.out), values(f.out));

  const CliResult s = run({"selftest"});
  EXPECT_EQ(s.code, 0) << s.out;
  EXPECT_EQ(s.out.find("FAIL"), std::string::npos);
}

class Pipeline : public ::testing::Test {
 protected:
  std::vector<std::string> files(const std::vector<std::string>& names) {
    std::vector<std::string> out;
    for (const auto& n : names) out.push_back(read_file(dir_.path() / n));
    return out;
  }

  // generate -> split -> label -> features -> train -> predict -> evaluate -> report
  std::vector<std::string> run_all(const std::vector<std::string>& extra) {
    const auto go = [&](std::vector<std::string> args) {
      args.insert(args.end(), extra.begin(), extra.end());
      const CliResult r = run(args);
      EXPECT_EQ(r.code, 0) << args.front() << ": " << r.err;
      return r.out;
    };
    const auto f = [&](const char* name) { return dir_.file(name); };
    std::vector<std::string> stdout_lines;
    stdout_lines.push_back(go({"generate", "--count", "12", "--seed", "5", "--out", f("all.jsonl")}));
    stdout_lines.push_back(go({"split", "--manifest", f("all.jsonl"), "--fraction", "0.75", "--seed", "3",
                               "--train-out", f("train.jsonl"), "--test-out", f("test.jsonl")}));
    stdout_lines.push_back(go({"label", "--manifest", f("all.jsonl"), "--out", f("labels.csv"), "--jobs", "3"}));
    stdout_lines.push_back(go({"features", "--manifest", f("train.jsonl"), "--out", f("features.csv")}));
    stdout_lines.push_back(go({"train", "--labels", f("labels.csv"), "--features", f("features.csv"), "--out",
                               f("model.bin"), "--epochs", "5", "--batch-size", "4", "--report", f("train.csv")}));
    stdout_lines.push_back(go({"features", "--manifest", f("test.jsonl"), "--out", f("test_features.csv")}));
    stdout_lines.push_back(go({"predict", "--model", f("model.bin"), "--features", f("test_features.csv")}));
    stdout_lines.push_back(go({"evaluate", "--manifest", f("test.jsonl"), "--k-source",
                               "model:" + f("model.bin"), "--out", f("model_eval.jsonl")}));
    stdout_lines.push_back(go({"evaluate", "--manifest", f("test.jsonl"), "--k-source", "oracle", "--labels",
                               f("labels.csv"), "--out", f("oracle_eval.jsonl")}));
    stdout_lines.push_back(go({"report", "--outcomes", f("oracle_eval.jsonl"), "--labels", f("labels.csv"),
                               "--manifest", f("test.jsonl"), "--grid", "0.5:0.25:1.5", "--figures", f("fig")}));
    return stdout_lines;
  }

  static inline const std::vector<std::string> kArtifacts = {
      "all.jsonl", "train.jsonl", "test.jsonl", "labels.csv", "features.csv", "model.bin",
      "train.csv", "model_eval.jsonl", "oracle_eval.jsonl", "fig/cdf.csv", "fig/k_avg.csv",
      "fig/k_hist.csv", "labels.csv.meta.json", "model_eval.jsonl.meta.json", "fig/cdf.csv.meta.json"};

  TempDir dir_;
};

TEST_F(Pipeline, RerunsAreByteIdentical) {
  const auto first_out = run_all({});
  const auto first = files(kArtifacts);
  const auto second_out = run_all({});
  EXPECT_EQ(first_out, second_out);
  EXPECT_EQ(first, files(kArtifacts));

  const json split = json::parse(first_out[1]);
  EXPECT_EQ(split.at("train"), 9);
  EXPECT_EQ(split.at("test"), 3);
  const json model_eval = json::parse(first_out[7]);
  EXPECT_EQ(model_eval.at("feature_encodes"), 3);
  EXPECT_EQ(model_eval.at("two_pass_encodes"), 30);
  const json oracle_eval = json::parse(first_out[8]);
  EXPECT_GE(oracle_eval.at("avg_final_gain_pct").get<double>(),
            model_eval.at("avg_final_gain_pct").get<double>() - 1e-9);
  EXPECT_TRUE(json::parse(first_out[9]).contains("pct_gain_ge_5"));
}

TEST_F(Pipeline, TimingIsTheOnlyDifference) {
  run_all({});
  const std::string plain = read_file(dir_.path() / "labels.csv.meta.json");
  const std::string labels = read_file(dir_.path() / "labels.csv");
  run_all({"--timing"});
  EXPECT_EQ(read_file(dir_.path() / "labels.csv"), labels);
  json timed = json::parse(read_file(dir_.path() / "labels.csv.meta.json"));
  ASSERT_TRUE(timed.contains("wall_clock_s"));
  timed.erase("wall_clock_s");
  EXPECT_EQ(timed, json::parse(plain));
}

TEST_F(Pipeline, ResumedLabelRunSkipsEncodes) {
  const auto f = [&](const char* name) { return dir_.file(name); };
  ASSERT_EQ(run({"generate", "--count", "4", "--seed", "2", "--out", f("m.jsonl")}).code, 0);
  const CliResult a = run({"label", "--manifest", f("m.jsonl"), "--out", f("l.csv"), "--store", f("store")});
  ASSERT_EQ(a.code, 0) << a.err;
  const CliResult b = run({"label", "--manifest", f("m.jsonl"), "--out", f("l2.csv"), "--store", f("store")});
  EXPECT_EQ(json::parse(b.out).at("resumed"), 4);
  EXPECT_EQ(json::parse(read_file(f("l2.csv.meta.json"))).at("encodes"), 0);
  EXPECT_EQ(read_file(f("l.csv")), read_file(f("l2.csv")));
}

TEST(Cli, EvaluateRejectsBadSources) {
  TempDir dir;
  ASSERT_EQ(run({"generate", "--count", "2", "--out", dir.file("m.jsonl")}).code, 0);
  const CliResult r = run({"evaluate", "--manifest", dir.file("m.jsonl"), "--k-source", "magic"});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(json::parse(r.err).at("error"), "InvalidArgument");
  EXPECT_EQ(run({"evaluate", "--manifest", dir.file("m.jsonl"), "--k-source", "oracle"}).code, 1);
  const CliResult missing = run({"evaluate", "--manifest", dir.file("none.jsonl")});
  EXPECT_EQ(json::parse(missing.err).at("error"), "IoError");
}

}  // namespace
}  // namespace klambda
