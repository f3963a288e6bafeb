#include "klambda/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <sstream>

#include <CLI11/CLI11.hpp>
#include <nlohmann/json.hpp>

#include "csv_util.hpp"
#include "klambda/bd_metrics.hpp"
#include "klambda/config.hpp"
#include "klambda/corpus.hpp"
#include "klambda/error.hpp"
#include "klambda/features.hpp"
#include "klambda/format.hpp"
#include "klambda/lambda_model.hpp"
#include "klambda/model_io.hpp"
#include "klambda/optimizer.hpp"
#include "klambda/trainer.hpp"

namespace klambda {

using nlohmann::ordered_json;

const std::vector<std::string>& subcommand_names() {
  static const std::vector<std::string> names = {
      "bdrate",  "lambda", "encode", "sweep",    "optimize", "features", "train",   "predict",
      "label",   "split",  "evaluate", "report", "selftest", "generate"};
  return names;
}

std::optional<ClipRef> parse_synth_spec(const std::string& text) {
  constexpr std::string_view prefix = "synth:";
  if (text.rfind(prefix, 0) != 0) return std::nullopt;
  ClipRef clip;
  clip.id = text;
  const std::string_view body = std::string_view(text).substr(prefix.size());
  if (body == "demo") {
    clip.source = demo_clip_params();
    return clip;
  }
  SyntheticClipParams p;
  for (const auto& pair : detail::split_csv(body)) {
    const auto eq = pair.find('=');
    const auto value = eq == std::string_view::npos ? std::nullopt : detail::parse_double(pair.substr(eq + 1));
    if (!value) throw Error(Errc::InvalidArgument, "bad synthetic clip field '" + std::string(pair) + "'");
    const std::string_view key = pair.substr(0, eq);
    if (key == "r0") p.r0 = *value;
    else if (key == "gamma") p.gamma = *value;
    else if (key == "p0") p.p0 = *value;
    else if (key == "s") p.s = *value;
    else if (key == "k_star") p.k_star = *value;
    else if (key == "g") p.g = *value;
    else if (key == "sigma") p.sigma = *value;
    else if (key == "seed") p.seed = static_cast<std::uint64_t>(*value);
    else if (key == "frames") clip.frame_count = static_cast<int>(*value);
    else throw Error(Errc::InvalidArgument, "unknown synthetic clip field '" + std::string(key) + "'");
  }
  p.validate();
  if (clip.frame_count < 1) throw Error(Errc::InvalidArgument, "frames must be positive");
  clip.source = p;
  return clip;
}

namespace {

// ---------------------------------------------------------------------------
// Shared plumbing

struct CommonFlags {
  std::string config_path;
  std::optional<std::string> encoder_cmd;
  std::optional<std::string> work_dir;
  std::optional<std::string> log_format;
  std::optional<double> fps;
  std::optional<std::string> crf_list;
  std::optional<int> jobs;
  bool timing = false;
};

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  for (const auto& item : detail::split_csv(text)) {
    const auto v = detail::parse_double(item);
    if (!v || std::floor(*v) != *v) throw Error(Errc::InvalidArgument, "bad integer list '" + text + "'");
    out.push_back(static_cast<int>(*v));
  }
  return out;
}

/// Resolves settings with flags > config file > built-in defaults and keeps
/// the effective value of every key it was asked about.
class Settings {
 public:
  explicit Settings(const CommonFlags& flags) : flags_(flags) {
    if (!flags.config_path.empty()) config_ = Config::load(flags.config_path);
  }

  template <typename T>
  T get(const std::optional<T>& flag, const std::string& key, T fallback) {
    T value = fallback;
    if (flag) {
      value = *flag;
    } else if (config_) {
      if constexpr (std::is_same_v<T, std::string>) {
        if (auto v = config_->string(key)) value = *v;
      } else if constexpr (std::is_same_v<T, bool>) {
        if (auto v = config_->boolean(key)) value = *v;
      } else if constexpr (std::is_integral_v<T>) {
        if (auto v = config_->integer(key)) value = static_cast<T>(*v);
      } else {
        if (auto v = config_->number(key)) value = *v;
      }
    }
    if constexpr (std::is_floating_point_v<T>) {
      effective_[key] = round_sig9(value);
    } else {
      effective_[key] = value;
    }
    return value;
  }

  std::vector<int> crf_list() {
    std::vector<int> crfs = default_crf_list();
    if (flags_.crf_list) {
      crfs = parse_int_list(*flags_.crf_list);
    } else if (config_) {
      if (auto v = config_->int_list("crf_list")) crfs = *v;
    }
    effective_["crf_list"] = crfs;
    return crfs;
  }

  int jobs() { return get(flags_.jobs, "jobs", default_jobs()); }

  const ordered_json& effective() const { return effective_; }

 private:
  const CommonFlags& flags_;
  std::optional<Config> config_;
  ordered_json effective_ = ordered_json::object();
};

struct Context {
  std::ostream& out;
  std::string command;
  CommonFlags flags;
  std::unique_ptr<Settings> settings;
  std::unique_ptr<EncoderBackend> backend;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  EncoderBackend& encoder() {
    if (backend) return *backend;
    const auto cmd = settings->get(flags.encoder_cmd, "encoder.cmd", std::string());
    if (cmd.empty()) {
      backend = std::make_unique<SyntheticEncoder>();
    } else {
      const auto dir = settings->get(flags.work_dir, "encoder.work_dir", std::string("klambda-work"));
      const auto fmt = settings->get(flags.log_format, "encoder.log_format", std::string("canonical"));
      const auto fps = settings->get(flags.fps, "encoder.fps", 30.0);
      backend = std::make_unique<ExternalEncoder>(cmd, dir, parse_log_format(fmt), fps);
    }
    return *backend;
  }

  static LogFormat parse_log_format(const std::string& text) {
    if (text == "canonical") return LogFormat::Canonical;
    if (text == "x265") return LogFormat::X265;
    throw Error(Errc::InvalidArgument, "log format must be canonical or x265, got " + text);
  }

  ordered_json metadata() const {
    ordered_json m;
    m["toolkit_version"] = kToolkitVersion;
    m["command"] = command;
    m["config"] = settings->effective();
    m["backend"] = backend ? backend->identity() : "none";
    m["assumptions"] = {
        {"rd_quality", "global PSNR (6Y+U+V)/8"},
        {"lambda_injection", "one k scales the I, P and B multipliers"},
        {"clip_block_extras", "total frames, average QP, encode seconds"},
        {"final_batch_norm", "on block 11 unless disabled"},
        {"avg_final_gain", "mean over all clips with losses floored at zero"},
    };
    m["encodes"] = backend ? backend->encode_count() : 0;
    if (flags.timing) {
      m["wall_clock_s"] =
          round_sig9(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    }
    return m;
  }

  /// Every persisted artifact gets `<path>.meta.json` next to it.
  void write_sidecar(const std::filesystem::path& artifact) const {
    std::ofstream meta(artifact.string() + ".meta.json");
    if (!meta) throw Error(Errc::IoError, "cannot write metadata for " + artifact.string());
    meta << metadata().dump(2) << '\n';
  }
};

std::ofstream open_output(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::IoError, "cannot write " + path);
  return out;
}

std::vector<ClipRef> load_manifest(const std::string& path) {
  auto clips = read_manifest_file(path);
  if (clips.empty()) throw Error(Errc::EmptyManifest, path + " has no clips");
  return clips;
}

ClipRef resolve_clip(const std::string& spec, const std::string& manifest_path) {
  if (auto synth = parse_synth_spec(spec)) return *synth;
  if (!manifest_path.empty()) {
    for (auto& clip : load_manifest(manifest_path)) {
      if (clip.id == spec) return clip;
    }
  }
  if (std::filesystem::is_regular_file(spec)) {
    ClipRef clip;
    clip.id = std::filesystem::path(spec).stem().string();
    clip.source = std::filesystem::path(spec);
    return clip;
  }
  throw Error(Errc::InvalidArgument, "unknown clip '" + spec + "'");
}

ordered_json trace_json(const std::vector<TracePoint>& trace) {
  ordered_json arr = ordered_json::array();
  for (const auto& p : trace) arr.push_back({round_sig9(p.k), round_sig9(p.bd_rate)});
  return arr;
}

ordered_json opt_result_json(const std::string& clip_id, const OptResult& r) {
  ordered_json j;
  j["clip_id"] = clip_id;
  j["k_opt"] = round_sig9(r.k_opt);
  j["bd_rate_at_k_opt"] = round_sig9(r.bd_rate_at_k_opt);
  j["iterations"] = r.iterations;
  j["encodes_used"] = r.encodes_used;
  j["local"] = r.local;
  j["trace"] = trace_json(r.trace);
  return j;
}

OptConfig resolve_opt_config(Settings& s, std::optional<double> kmin, std::optional<double> kmax,
                             std::optional<double> tol, std::optional<int> max_iters) {
  OptConfig cfg;
  cfg.k_min = s.get(kmin, "optimizer.kmin", cfg.k_min);
  cfg.k_max = s.get(kmax, "optimizer.kmax", cfg.k_max);
  cfg.tol = s.get(tol, "optimizer.tol", cfg.tol);
  cfg.max_iters = s.get(max_iters, "optimizer.max_iters", cfg.max_iters);
  cfg.crf_list = s.crf_list();
  cfg.validate();
  return cfg;
}

std::vector<FeatureVector> read_features_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::IoError, "cannot open " + path);
  return read_features_csv(in);
}

std::optional<SemanticFeatures> semantic_for(const std::string& path, const std::string& clip_id) {
  if (path.empty()) return std::nullopt;
  ClipRef probe;
  probe.id = clip_id;
  auto sem = CsvSemanticProvider(path).features_for(probe);
  if (!sem) throw Error(Errc::InvalidArgument, "no semantic features for clip " + clip_id);
  return sem;
}

std::vector<ClipOutcome> read_outcomes_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::IoError, "cannot open " + path);
  std::vector<ClipOutcome> outcomes;
  std::string line;
  while (std::getline(in, line)) {
    if (!detail::trim(line).empty()) outcomes.push_back(outcome_from_json(line));
  }
  return outcomes;
}

// ---------------------------------------------------------------------------
// Self-test suites

bool selftest_lambda(std::ostream& out) {
  const bool ok = default_lambda(12, FrameType::I) == 0.57 && default_lambda(12, FrameType::P) == 0.85 &&
                  std::abs(default_lambda(30, FrameType::B) - 130.56) < 1e-12;
  out << (ok ? "PASS" : "FAIL") << " lambda-table\n";
  return ok;
}

bool selftest_bd(std::ostream& out) {
  SyntheticEncoder enc;
  ClipRef clip;
  clip.id = "selftest";
  clip.source = demo_clip_params();
  const RDCurve a = rd_curve(enc, clip, default_crf_list(), 1.0);
  const RDCurve b = rd_curve(enc, clip, default_crf_list(), 1.0);
  std::vector<RDPoint> doubled(a.points().begin(), a.points().end());
  for (auto& p : doubled) p.rate *= 2.0;
  const bool ok = std::abs(bd_rate(a, b).bd_rate) < 1e-12 &&
                  std::abs(bd_rate(a, validate_curve(doubled)).bd_rate - 100.0) < 1e-6;
  out << (ok ? "PASS" : "FAIL") << " bd-identity\n";
  return ok;
}

bool selftest_gradients(std::ostream& out) {
  Architecture arch;
  arch.input = 6;
  arch.blocks = {{8, true, true}, {5, false, true}, {1, true, false}};
  MLPModel model(arch, 3);
  Rng rng(11);
  Matrix x(6, 12);
  Vector y(12);
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    for (Eigen::Index r = 0; r < x.rows(); ++r) x(r, c) = rng.normal();
    y(c) = rng.uniform(0.2, 3.0);
  }
  const auto result = gradient_check(model, x, y);
  const bool ok = result.parameters_checked > 0 && result.max_rel_error < 1e-5;
  out << (ok ? "PASS" : "FAIL") << " gradient-check max_rel_error=" << format_number(result.max_rel_error)
      << '\n';
  return ok;
}

// ---------------------------------------------------------------------------
// Subcommands

using Action = std::function<int(Context&)>;

void add_common(CLI::App* sub, CommonFlags& f) {
  sub->add_option("--config", f.config_path, "Key/value config file; flags override it");
  sub->add_option("--encoder-cmd", f.encoder_cmd,
                  "External encoder command template with {input} {crf} {k} {output} {log}");
  sub->add_option("--work-dir", f.work_dir, "Directory for external encoder artifacts");
  sub->add_option("--log-format", f.log_format, "Statistics log format: canonical or x265");
  sub->add_option("--fps", f.fps, "Frame rate used to turn frame bits into kbps");
  sub->add_option("--crf-list", f.crf_list, "Comma-separated CRFs of an RD curve");
  sub->add_option("--jobs", f.jobs, "Worker threads for corpus commands")->check(CLI::PositiveNumber);
  sub->add_flag("--timing", f.timing, "Record wall-clock time in run metadata");
}

struct Options {
  // inputs
  std::string anchor, test, clip, manifest, grid, stats, features, labels, model, semantic, outcomes,
      store, k_source, id;
  // outputs
  std::string out_path, stats_out, report_out, train_out, test_out, figures = "figures";
  int q = 0;
  std::string frame_type = "P";
  double k = 1.0;
  int crf = kFeatureCrf;
  bool legacy = false;
  std::optional<double> tol, kmin, kmax, lr, momentum, fraction;
  std::optional<int> max_iters, epochs, batch_size, eval_every, count;
  std::optional<std::uint64_t> seed;
  std::optional<bool> final_bn;
  double validation_fraction = 0.0;
};

int run_bdrate(Context& ctx, const Options& o) {
  const BDResult r = bd_rate(read_curve_csv_file(o.anchor), read_curve_csv_file(o.test));
  ctx.out << bd_result_json(r) << '\n';
  return 0;
}

int run_lambda(Context& ctx, const Options& o) {
  const FrameType type = parse_frame_type(o.frame_type);
  const double value = o.legacy ? o.k * legacy_lambda(o.q) : scaled_lambda({o.q, type, o.k});
  ctx.out << format_number(value) << '\n';
  return 0;
}

int run_encode(Context& ctx, const Options& o) {
  const ClipRef clip = resolve_clip(o.clip, o.manifest);
  const EncodeResult r = ctx.encoder().encode(clip, o.crf, o.k);
  if (!o.stats_out.empty()) {
    auto out = open_output(o.stats_out);
    write_stats(out, r.stats);
    ctx.write_sidecar(o.stats_out);
  }
  ordered_json j;
  j["clip_id"] = clip.id;
  j["crf"] = o.crf;
  j["k"] = round_sig9(o.k);
  j["rate_kbps"] = round_sig9(r.point.rate);
  j["psnr_db"] = round_sig9(r.point.quality);
  j["frames"] = r.stats.frames.size();
  ctx.out << j.dump() << '\n';
  return 0;
}

int run_sweep(Context& ctx, const Options& o) {
  const ClipRef clip = resolve_clip(o.clip, o.manifest);
  const auto grid = parse_grid(ctx.settings->get(o.grid.empty() ? std::nullopt : std::optional(o.grid),
                                                 "sweep.grid", std::string("0.2:0.1:3")));
  const auto crfs = ctx.settings->crf_list();
  const auto trace = sweep_k(ctx.encoder(), clip, grid, crfs);
  std::ostringstream csv;
  csv << "k,bd_rate_pct\n";
  for (const auto& p : trace) csv << format_number(p.k) << ',' << format_number(p.bd_rate) << '\n';
  if (o.out_path.empty()) {
    ctx.out << csv.str();
  } else {
    open_output(o.out_path) << csv.str();
    ctx.write_sidecar(o.out_path);
  }
  return 0;
}

int run_optimize(Context& ctx, const Options& o) {
  const ClipRef clip = resolve_clip(o.clip, o.manifest);
  const OptConfig cfg = resolve_opt_config(*ctx.settings, o.kmin, o.kmax, o.tol, o.max_iters);
  try {
    ctx.out << opt_result_json(clip.id, optimize_k(ctx.encoder(), clip, cfg)).dump() << '\n';
  } catch (const BudgetExceeded& e) {
    ctx.out << opt_result_json(clip.id, e.best()).dump() << '\n';
    throw;
  }
  return 0;
}

int run_features(Context& ctx, const Options& o) {
  std::vector<FeatureVector> rows;
  if (!o.stats.empty()) {
    const auto fmt = Context::parse_log_format(
        ctx.settings->get(ctx.flags.log_format, "encoder.log_format", std::string("canonical")));
    const auto fps = ctx.settings->get(ctx.flags.fps, "encoder.fps", 30.0);
    const StatsLog log = parse_stats_file(o.stats, fmt, fps);
    const std::string id = o.id.empty() ? std::filesystem::path(o.stats).stem().string() : o.id;
    const auto sem = semantic_for(o.semantic, id);
    rows.push_back(assemble_features(log, sem ? &*sem : nullptr, id));
  } else {
    std::vector<ClipRef> clips;
    if (!o.clip.empty()) {
      clips.push_back(resolve_clip(o.clip, o.manifest));
    } else if (!o.manifest.empty()) {
      clips = load_manifest(o.manifest);
    } else {
      throw Error(Errc::InvalidArgument, "features needs --stats, --clip or --manifest");
    }
    std::optional<CsvSemanticProvider> provider;
    if (!o.semantic.empty()) provider.emplace(o.semantic);
    rows.resize(clips.size());
    EncoderBackend& enc = ctx.encoder();
    parallel_for(clips.size(), ctx.settings->jobs(), [&](std::size_t i) {
      rows[i] = collect_features(enc, clips[i], provider ? &*provider : nullptr);
    });
  }
  if (o.out_path.empty()) {
    write_features_csv(ctx.out, rows);
  } else {
    auto out = open_output(o.out_path);
    write_features_csv(out, rows);
    ctx.write_sidecar(o.out_path);
  }
  return 0;
}

int run_train(Context& ctx, const Options& o) {
  Settings& s = *ctx.settings;
  TrainConfig cfg;
  cfg.epochs = s.get(o.epochs, "train.epochs", cfg.epochs);
  cfg.learning_rate = s.get(o.lr, "train.lr", cfg.learning_rate);
  cfg.momentum = s.get(o.momentum, "train.momentum", cfg.momentum);
  cfg.batch_size = s.get(o.batch_size, "train.batch_size", cfg.batch_size);
  cfg.rng_seed = s.get(o.seed, "train.seed", cfg.rng_seed);
  cfg.eval_every = s.get(o.eval_every, "train.eval_every", cfg.eval_every);
  cfg.final_batch_norm = s.get(o.final_bn, "train.final_batch_norm", cfg.final_batch_norm);
  cfg.validate();

  const auto labels = read_labels_csv_file(o.labels);
  std::vector<FeatureVector> features;
  std::vector<double> ks;
  for (auto& fv : read_features_file(o.features)) {
    const auto it = labels.find(fv.clip_id);
    if (it == labels.end()) continue;
    ks.push_back(it->second);
    features.push_back(std::move(fv));
  }
  if (features.empty()) throw Error(Errc::EmptyDataset, "no feature rows have labels");

  std::vector<FeatureVector> val_features;
  std::vector<double> val_ks;
  if (o.validation_fraction > 0.0) {
    auto [train_idx, val_idx] = split_indices(features.size(), 1.0 - o.validation_fraction, cfg.rng_seed);
    std::vector<FeatureVector> tf;
    std::vector<double> tk;
    for (auto i : train_idx) tf.push_back(features[i]), tk.push_back(ks[i]);
    for (auto i : val_idx) val_features.push_back(features[i]), val_ks.push_back(ks[i]);
    features = std::move(tf);
    ks = std::move(tk);
  }
  const bool has_val = !val_features.empty();
  TrainOutcome result = train(features, ks, cfg, has_val ? &val_features : nullptr, has_val ? &val_ks : nullptr);
  result.model.metadata["run"] = ctx.metadata().dump();
  save_model_file(o.out_path, result.model);

  if (!o.report_out.empty()) {
    auto rep = open_output(o.report_out);
    rep << "epoch,train_loss,train_mae,validation_mae\n";
    for (const auto& e : result.report.epochs) {
      rep << e.epoch << ',' << format_number(e.train_loss) << ','
          << (e.train_mae ? format_number(*e.train_mae) : "") << ','
          << (e.validation_mae ? format_number(*e.validation_mae) : "") << '\n';
    }
    ctx.write_sidecar(o.report_out);
  }
  ordered_json j;
  j["samples"] = features.size();
  j["validation_samples"] = val_features.size();
  j["epochs"] = cfg.epochs;
  j["final_train_mae"] = round_sig9(result.report.final_train_mae);
  j["final_validation_mae"] = result.report.final_validation_mae
                                  ? ordered_json(round_sig9(*result.report.final_validation_mae))
                                  : ordered_json(nullptr);
  j["model"] = o.out_path;
  ctx.out << j.dump() << '\n';
  return 0;
}

int run_predict(Context& ctx, const Options& o) {
  const MLPModel model = load_model_file(o.model);
  const auto emit = [&](const std::string& id, const Prediction& p) {
    ordered_json j;
    j["clip_id"] = id;
    j["k"] = round_sig9(p.k);
    j["raw"] = round_sig9(p.raw);
    ctx.out << j.dump() << '\n';
  };
  if (!o.features.empty()) {
    for (const auto& fv : read_features_file(o.features)) emit(fv.clip_id, predict_k(model, fv));
    return 0;
  }
  if (o.stats.empty()) throw Error(Errc::InvalidArgument, "predict needs --stats or --features");
  const auto fmt = Context::parse_log_format(
      ctx.settings->get(ctx.flags.log_format, "encoder.log_format", std::string("canonical")));
  const auto fps = ctx.settings->get(ctx.flags.fps, "encoder.fps", 30.0);
  const StatsLog log = parse_stats_file(o.stats, fmt, fps);
  const std::string id = o.id.empty() ? std::filesystem::path(o.stats).stem().string() : o.id;
  const auto sem = semantic_for(o.semantic, id);
  emit(id, predict_k(model, log, sem ? &*sem : nullptr));
  return 0;
}

int run_label(Context& ctx, const Options& o) {
  const auto clips = load_manifest(o.manifest);
  const OptConfig cfg = resolve_opt_config(*ctx.settings, o.kmin, o.kmax, o.tol, o.max_iters);
  std::optional<std::filesystem::path> store;
  if (!o.store.empty()) store = o.store;
  const LabelRun run = label_corpus(clips, ctx.encoder(), cfg, store, ctx.settings->jobs());
  {
    auto out = open_output(o.out_path);
    write_labels_csv(out, run.labels);
  }
  ctx.write_sidecar(o.out_path);

  ordered_json j;
  j["clips"] = clips.size();
  j["labelled"] = run.labels.size();
  j["resumed"] = run.resumed;
  std::uint64_t encodes = 0;
  for (const auto& l : run.labels) encodes += l.encodes_used;
  j["encodes_used"] = encodes;
  j["failures"] = ordered_json::array();
  for (const auto& f : run.failures) j["failures"].push_back({{"clip_id", f.clip_id}, {"error", f.error}});
  ctx.out << j.dump() << '\n';
  return 0;
}

int run_split(Context& ctx, const Options& o) {
  const auto clips = load_manifest(o.manifest);
  const double fraction = ctx.settings->get(o.fraction, "split.fraction", 0.7);
  const auto seed = ctx.settings->get(o.seed, "split.seed", std::uint64_t{1});
  const auto [train_set, test_set] = split_corpus(clips, fraction, seed);
  for (const auto& [path, part] : {std::pair{o.train_out, &train_set}, std::pair{o.test_out, &test_set}}) {
    auto out = open_output(path);
    write_manifest(out, *part);
    out.close();
    ctx.write_sidecar(path);
  }
  ctx.out << ordered_json{{"train", train_set.size()}, {"test", test_set.size()}}.dump() << '\n';
  return 0;
}

int run_evaluate(Context& ctx, const Options& o) {
  const auto clips = load_manifest(o.manifest);
  const auto crfs = ctx.settings->crf_list();
  const std::string spec = ctx.settings->get(o.k_source.empty() ? std::nullopt : std::optional(o.k_source),
                                             "evaluate.k_source", std::string("fixed:1"));
  std::optional<MLPModel> model;
  std::optional<CsvSemanticProvider> provider;
  KSource source;
  if (spec.rfind("fixed:", 0) == 0) {
    const auto k = detail::parse_double(std::string_view(spec).substr(6));
    if (!k || !(*k > 0.0)) throw Error(Errc::InvalidArgument, "bad fixed k in '" + spec + "'");
    source = FixedK{*k};
  } else if (spec.rfind("model:", 0) == 0) {
    model = load_model_file(spec.substr(6));
    if (!o.semantic.empty()) provider.emplace(o.semantic);
    source = ModelK{&*model, provider ? &*provider : nullptr};
  } else if (spec == "oracle") {
    if (o.labels.empty()) throw Error(Errc::InvalidArgument, "oracle source needs --labels");
    source = OracleK{read_labels_csv_file(o.labels)};
  } else {
    throw Error(Errc::InvalidArgument, "k source must be fixed:<k>, model:<path> or oracle");
  }

  const Evaluation eval = evaluate_two_pass(clips, source, ctx.encoder(), crfs, ctx.settings->jobs());
  if (!o.out_path.empty()) {
    auto out = open_output(o.out_path);
    for (const auto& oc : eval.outcomes) out << outcome_json(oc) << '\n';
    out.close();
    ctx.write_sidecar(o.out_path);
  }
  ordered_json j = ordered_json::parse(summary_json(eval.summary));
  std::uint64_t two_pass = 0, feature = 0;
  for (const auto& oc : eval.outcomes) two_pass += oc.encodes_used, feature += oc.feature_encodes;
  j["two_pass_encodes"] = two_pass;
  j["feature_encodes"] = feature;
  ctx.out << j.dump() << '\n';
  return 0;
}

int run_report(Context& ctx, const Options& o) {
  std::vector<ClipOutcome> outcomes;
  if (!o.outcomes.empty()) outcomes = read_outcomes_file(o.outcomes);
  std::vector<double> ks;
  if (!o.labels.empty()) {
    for (const auto& [id, k] : read_labels_csv_file(o.labels)) ks.push_back(k);
  }
  std::vector<std::vector<TracePoint>> sweeps;
  if (!o.manifest.empty()) {
    const auto clips = load_manifest(o.manifest);
    const auto grid = parse_grid(ctx.settings->get(o.grid.empty() ? std::nullopt : std::optional(o.grid),
                                                   "sweep.grid", std::string("0.2:0.1:3")));
    const auto crfs = ctx.settings->crf_list();
    sweeps.resize(clips.size());
    EncoderBackend& enc = ctx.encoder();
    parallel_for(clips.size(), ctx.settings->jobs(),
                 [&](std::size_t i) { sweeps[i] = sweep_k(enc, clips[i], grid, crfs); });
  }
  const auto written = emit_figures(o.figures, outcomes, sweeps, ks);
  for (const auto& path : written) ctx.write_sidecar(path);

  ordered_json j = ordered_json::object();
  if (!outcomes.empty()) {
    j = ordered_json::parse(summary_json(summarize(outcomes)));
    const auto ge5 = std::count_if(outcomes.begin(), outcomes.end(), [](const auto& oc) { return oc.bd_gain >= 5.0; });
    j["pct_gain_ge_5"] = round_sig9(100.0 * static_cast<double>(ge5) / static_cast<double>(outcomes.size()));
  }
  j["figures"] = ordered_json::array();
  for (const auto& path : written) j["figures"].push_back(path.string());
  ctx.out << j.dump() << '\n';
  return 0;
}

int run_selftest(Context& ctx, const Options&) {
  bool ok = selftest_lambda(ctx.out);
  ok = selftest_bd(ctx.out) && ok;
  ok = selftest_gradients(ctx.out) && ok;
  return ok ? 0 : 1;
}

int run_generate(Context& ctx, const Options& o) {
  const auto count = ctx.settings->get(o.count, "corpus.count", 100);
  const auto seed = ctx.settings->get(o.seed, "corpus.seed", std::uint64_t{1});
  if (count < 1) throw Error(Errc::InvalidArgument, "count must be positive");
  const auto clips = synthetic_corpus(static_cast<std::size_t>(count), seed);
  if (o.out_path.empty()) {
    write_manifest(ctx.out, clips);
  } else {
    auto out = open_output(o.out_path);
    write_manifest(out, clips);
    out.close();
    ctx.write_sidecar(o.out_path);
  }
  return 0;
}

void report_error(std::ostream& err, const std::string& code, const std::string& message) {
  err << ordered_json{{"error", code}, {"message", message}}.dump() << '\n';
}

}  // namespace

int dispatch(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  const auto& names = subcommand_names();
  if (args.empty()) {
    report_error(err, "UnknownCommand", "no subcommand given; try --help");
    return 2;
  }
  if (args.front().empty() || args.front().front() != '-') {
    if (std::find(names.begin(), names.end(), args.front()) == names.end()) {
      report_error(err, "UnknownCommand", "unknown subcommand '" + args.front() + "'");
      return 2;
    }
  }

  CLI::App app{"Per-clip Lagrangian multiplier scaling toolkit", "klambda"};
  app.set_version_flag("--version", kToolkitVersion);
  app.require_subcommand(1);

  Options o;
  CommonFlags common;
  std::function<int(Context&, const Options&)> action;
  const auto sub = [&](const char* name, const char* help, int (*fn)(Context&, const Options&)) {
    CLI::App* s = app.add_subcommand(name, help);
    add_common(s, common);
    s->callback([&action, fn] { action = fn; });
    return s;
  };
  const auto opt_flags = [&](CLI::App* s) {
    s->add_option("--tol", o.tol, "Golden-section bracket tolerance");
    s->add_option("--kmin", o.kmin, "Lower bound of k");
    s->add_option("--kmax", o.kmax, "Upper bound of k");
    s->add_option("--max-iters", o.max_iters, "Golden-section iteration budget");
  };
  const auto clip_flags = [&](CLI::App* s, bool required) {
    auto* c = s->add_option("--clip", o.clip, "synth:demo, synth:key=value,..., a manifest id or a video path");
    if (required) c->required();
    s->add_option("--manifest", o.manifest, "JSON-lines clip manifest");
  };

  auto* bd = sub("bdrate", "BD-Rate and BD-PSNR between two RD curves", run_bdrate);
  bd->add_option("--anchor", o.anchor, "Anchor curve CSV (rate_kbps,psnr_db)")->required();
  bd->add_option("--test", o.test, "Test curve CSV")->required();

  auto* lam = sub("lambda", "Default or scaled Lagrangian multiplier", run_lambda);
  lam->add_option("--q", o.q, "Quantization parameter")->required();
  lam->add_option("--type", o.frame_type, "Frame type: I, P or B");
  lam->add_option("--k", o.k, "Scale factor")->check(CLI::PositiveNumber);
  lam->add_flag("--legacy", o.legacy, "Use the single-formula 0.85 q^2 multiplier");

  auto* enc = sub("encode", "Encode one clip at one CRF and k", run_encode);
  clip_flags(enc, true);
  enc->add_option("--crf", o.crf, "Constant rate factor")->required();
  enc->add_option("--k", o.k, "Scale factor")->check(CLI::PositiveNumber);
  enc->add_option("--stats-out", o.stats_out, "Write the per-frame statistics CSV here");

  auto* sw = sub("sweep", "BD-Rate over a grid of k", run_sweep);
  clip_flags(sw, true);
  sw->add_option("--grid", o.grid, "start:step:stop (inclusive)");
  sw->add_option("--out", o.out_path, "Output CSV; stdout when absent");

  auto* op = sub("optimize", "Golden-section search for the best k of one clip", run_optimize);
  clip_flags(op, true);
  opt_flags(op);

  auto* fe = sub("features", "Assemble predictor feature vectors", run_features);
  clip_flags(fe, false);
  fe->add_option("--stats", o.stats, "Existing statistics log instead of an encode");
  fe->add_option("--id", o.id, "Clip id for --stats input");
  fe->add_option("--semantic", o.semantic, "Semantic feature CSV (clip_id,f0..f999)");
  fe->add_option("--out", o.out_path, "Output CSV; stdout when absent");

  auto* tr = sub("train", "Train the k predictor", run_train);
  tr->add_option("--labels", o.labels, "Labels CSV (clip_id,k_opt)")->required();
  tr->add_option("--features", o.features, "Features CSV")->required();
  tr->add_option("--out", o.out_path, "Model file")->required();
  tr->add_option("--epochs", o.epochs, "Training epochs");
  tr->add_option("--lr", o.lr, "Learning rate");
  tr->add_option("--momentum", o.momentum, "SGD momentum");
  tr->add_option("--batch-size", o.batch_size, "Mini-batch size");
  tr->add_option("--seed", o.seed, "Initialization, shuffle and dropout seed");
  tr->add_option("--eval-every", o.eval_every, "Epochs between full-set MAE measurements");
  tr->add_option("--final-batch-norm", o.final_bn, "Batch-norm on the output block (true/false)");
  tr->add_option("--validation-fraction", o.validation_fraction, "Share of labelled rows held out")
      ->check(CLI::Range(0.0, 0.9));
  tr->add_option("--report", o.report_out, "Per-epoch CSV report");

  auto* pr = sub("predict", "Predict k for clips", run_predict);
  pr->add_option("--model", o.model, "Model file")->required();
  pr->add_option("--stats", o.stats, "Statistics log of the CRF 33, k = 1 encode");
  pr->add_option("--id", o.id, "Clip id for --stats input");
  pr->add_option("--semantic", o.semantic, "Semantic feature CSV");
  pr->add_option("--features", o.features, "Features CSV instead of a statistics log");

  auto* la = sub("label", "Optimize k for every clip of a manifest", run_label);
  la->add_option("--manifest", o.manifest, "JSON-lines clip manifest")->required();
  la->add_option("--out", o.out_path, "Labels CSV")->required();
  la->add_option("--store", o.store, "Per-clip result directory for resumable runs");
  opt_flags(la);

  auto* sp = sub("split", "Seeded train/test split of a manifest", run_split);
  sp->add_option("--manifest", o.manifest, "JSON-lines clip manifest")->required();
  sp->add_option("--fraction", o.fraction, "Training share");
  sp->add_option("--seed", o.seed, "Shuffle seed");
  sp->add_option("--train-out", o.train_out, "Training manifest")->required();
  sp->add_option("--test-out", o.test_out, "Test manifest")->required();

  auto* ev = sub("evaluate", "Two-pass evaluation with a k source", run_evaluate);
  ev->add_option("--manifest", o.manifest, "JSON-lines clip manifest")->required();
  ev->add_option("--k-source", o.k_source, "fixed:<k>, model:<path> or oracle");
  ev->add_option("--labels", o.labels, "Labels CSV for the oracle source");
  ev->add_option("--semantic", o.semantic, "Semantic feature CSV for the model source");
  ev->add_option("--out", o.out_path, "Per-clip outcomes, JSON lines");

  auto* re = sub("report", "Summary statistics and figure CSVs", run_report);
  re->add_option("--outcomes", o.outcomes, "Outcomes from evaluate");
  re->add_option("--labels", o.labels, "Labels CSV for the k histogram");
  re->add_option("--manifest", o.manifest, "Clips to sweep for the average BD-Rate curve");
  re->add_option("--grid", o.grid, "Sweep grid start:step:stop");
  re->add_option("--figures", o.figures, "Output directory");

  sub("selftest", "Lambda table, BD identity and gradient checks", run_selftest);

  auto* ge = sub("generate", "Write a synthetic clip manifest", run_generate);
  ge->add_option("--count", o.count, "Number of clips");
  ge->add_option("--seed", o.seed, "Corpus seed");
  ge->add_option("--out", o.out_path, "Manifest path; stdout when absent");

  const std::string command = args.front();
  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    report_error(err, "InvalidArgument", e.what());
    return 1;
  }

  try {
    Context ctx{out, command, common, std::make_unique<Settings>(common), nullptr};
    return action(ctx, o);
  } catch (const Error& e) {
    report_error(err, std::string(to_string(e.code())), e.what());
  } catch (const std::exception& e) {
    report_error(err, "Error", e.what());
  }
  return 1;
}

}  // namespace klambda
