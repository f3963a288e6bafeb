#include "klambda/corpus.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <istream>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "csv_util.hpp"
#include "klambda/error.hpp"
#include "klambda/format.hpp"
#include "klambda/trainer.hpp"

namespace klambda {

using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Manifests

namespace {

ordered_json clip_to_json(const ClipRef& clip) {
  ordered_json j;
  j["id"] = clip.id;
  if (clip.is_synthetic()) {
    const auto& p = clip.synthetic();
    j["synthetic"] = {{"r0", p.r0}, {"gamma", p.gamma}, {"p0", p.p0},       {"s", p.s},
                      {"k_star", p.k_star}, {"g", p.g}, {"sigma", p.sigma}, {"seed", p.seed}};
  } else {
    j["source"] = std::get<std::filesystem::path>(clip.source).string();
  }
  j["frame_count"] = clip.frame_count;
  j["width"] = clip.width;
  j["height"] = clip.height;
  return j;
}

ClipRef clip_from_json(const nlohmann::json& j) {
  ClipRef clip;
  clip.id = j.at("id").get<std::string>();
  clip.frame_count = j.value("frame_count", 150);
  clip.width = j.value("width", 1920);
  clip.height = j.value("height", 1080);
  if (j.contains("synthetic")) {
    const auto& s = j.at("synthetic");
    SyntheticClipParams p;
    p.r0 = s.at("r0").get<double>();
    p.gamma = s.at("gamma").get<double>();
    p.p0 = s.at("p0").get<double>();
    p.s = s.at("s").get<double>();
    p.k_star = s.at("k_star").get<double>();
    p.g = s.at("g").get<double>();
    p.sigma = s.at("sigma").get<double>();
    p.seed = s.value("seed", std::uint64_t{0});
    p.validate();
    clip.source = p;
  } else {
    clip.source = std::filesystem::path(j.at("source").get<std::string>());
  }
  if (clip.frame_count < 1) throw Error(Errc::FormatError, "clip " + clip.id + " has no frames");
  return clip;
}

}  // namespace

std::vector<ClipRef> read_manifest(std::istream& in) {
  std::vector<ClipRef> clips;
  std::set<std::string> ids;
  std::string line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (detail::trim(line).empty()) continue;
    try {
      clips.push_back(clip_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(Errc::FormatError, "manifest line " + std::to_string(row) + ": " + e.what());
    }
    if (!ids.insert(clips.back().id).second) {
      throw Error(Errc::InvalidArgument, "duplicate clip id " + clips.back().id);
    }
  }
  return clips;
}

std::vector<ClipRef> read_manifest_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::IoError, "cannot open " + path);
  return read_manifest(in);
}

void write_manifest(std::ostream& out, const std::vector<ClipRef>& clips) {
  for (const auto& clip : clips) out << clip_to_json(clip).dump() << '\n';
}

std::vector<ClipRef> synthetic_corpus(std::size_t count, std::uint64_t seed, const CorpusShape& shape) {
  Rng rng(mix_seed(seed, 77));
  std::vector<ClipRef> clips;
  clips.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    SyntheticClipParams p;
    if (rng.uniform() < shape.concentrated) {
      p.k_star = std::exp(rng.uniform(std::log(0.7), std::log(0.8)));
    } else {
      p.k_star = std::clamp(std::exp(std::log(shape.mode) + shape.log_spread * rng.normal()), 0.2, 3.0);
    }
    p.r0 = std::exp(rng.uniform(std::log(500.0), std::log(20000.0)));
    p.gamma = rng.uniform(4.5, 7.5);
    p.p0 = rng.uniform(38.0, 48.0);
    p.s = rng.uniform(0.5, 1.0);
    p.sigma = rng.uniform(shape.sigma_lo, shape.sigma_hi);
    p.g = rng.uniform(shape.g_lo, shape.g_hi);
    p.seed = mix_seed(seed, i);

    char id[32];
    std::snprintf(id, sizeof id, "synth-%04zu", i);
    ClipRef clip;
    clip.id = id;
    clip.source = p;
    clips.push_back(std::move(clip));
  }
  return clips;
}

// ---------------------------------------------------------------------------
// Worker pool

int default_jobs() {
  const unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : static_cast<int>(n);
}

void parallel_for(std::size_t count, int jobs, const std::function<void(std::size_t)>& fn) {
  const auto workers = static_cast<std::size_t>(std::max(1, jobs));
  if (workers == 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < std::min(workers, count); ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next.fetch_add(1); i < count; i = next.fetch_add(1)) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(error_mutex);
            if (!first_error) first_error = std::current_exception();
            next.store(count);
          }
        }
      });
    }
  }
  if (first_error) std::rethrow_exception(first_error);
}

// ---------------------------------------------------------------------------
// Labelling

namespace {

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string store_key(const ClipRef& clip, const OptConfig& cfg, const std::string& backend) {
  std::ostringstream s;
  s << clip_to_json(clip).dump() << '|' << backend << '|' << detail::shortest(cfg.k_min) << ','
    << detail::shortest(cfg.k_max) << ',' << detail::shortest(cfg.tol) << ',' << cfg.max_iters;
  for (int crf : cfg.crf_list) s << ',' << crf;
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(fnv1a(s.str())));
  return hex;
}

ordered_json label_to_json(const ClipLabel& l) {
  return {{"clip_id", l.clip_id}, {"k_opt", l.k_opt},           {"bd_gain_pct", l.bd_gain},
          {"encodes_used", l.encodes_used}, {"iterations", l.iterations}, {"local", l.local},
          {"error", l.error}};
}

ClipLabel label_from_json(const nlohmann::json& j) {
  ClipLabel l;
  l.clip_id = j.at("clip_id").get<std::string>();
  l.k_opt = j.at("k_opt").get<double>();
  l.bd_gain = j.at("bd_gain_pct").get<double>();
  l.encodes_used = j.at("encodes_used").get<std::uint64_t>();
  l.iterations = j.at("iterations").get<int>();
  l.local = j.at("local").get<bool>();
  l.error = j.at("error").get<std::string>();
  return l;
}

void write_atomically(const std::filesystem::path& path, const std::string& contents) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw Error(Errc::IoError, "cannot write " + tmp);
    out << contents;
    if (!out.flush()) throw Error(Errc::IoError, "cannot write " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

LabelRun label_corpus(const std::vector<ClipRef>& clips, EncoderBackend& backend,
                      const OptConfig& cfg, const std::optional<std::filesystem::path>& store,
                      int jobs) {
  if (clips.empty()) throw Error(Errc::EmptyManifest, "manifest has no clips");
  cfg.validate();
  if (store) std::filesystem::create_directories(*store);

  std::vector<ClipLabel> results(clips.size());
  std::vector<char> resumed(clips.size(), 0);
  parallel_for(clips.size(), jobs, [&](std::size_t i) {
    const ClipRef& clip = clips[i];
    std::optional<std::filesystem::path> file;
    if (store) {
      file = *store / (store_key(clip, cfg, backend.identity()) + ".json");
      std::ifstream in(*file);
      if (in) {
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        try {
          results[i] = label_from_json(nlohmann::json::parse(text));
          resumed[i] = 1;
          return;
        } catch (const nlohmann::json::exception&) {
          // unreadable record: recompute it
        }
      }
    }
    ClipLabel& label = results[i];
    label.clip_id = clip.id;
    try {
      const OptResult r = optimize_k(backend, clip, cfg);
      label.k_opt = r.k_opt;
      label.bd_gain = r.bd_rate_at_k_opt == 0.0 ? 0.0 : -r.bd_rate_at_k_opt;
      label.encodes_used = r.encodes_used;
      label.iterations = r.iterations;
      label.local = r.local;
    } catch (const BudgetExceeded& e) {
      label.k_opt = e.best().k_opt;
      label.encodes_used = e.best().encodes_used;
      label.error = e.what();
    } catch (const std::exception& e) {
      label.error = e.what();
    }
    if (file) write_atomically(*file, label_to_json(label).dump() + "\n");
  });

  LabelRun run;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    run.resumed += resumed[i];
    (results[i].ok() ? run.labels : run.failures).push_back(std::move(results[i]));
  }
  return run;
}

void write_labels_csv(std::ostream& out, const std::vector<ClipLabel>& labels) {
  out << "clip_id,k_opt,bd_gain_pct,encodes_used\n";
  for (const auto& l : labels) {
    out << l.clip_id << ',' << format_number(l.k_opt) << ',' << format_number(l.bd_gain) << ','
        << l.encodes_used << '\n';
  }
}

std::map<std::string, double> read_labels_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw Error(Errc::FormatError, "empty labels file");
  const auto header = detail::split_csv(line);
  std::optional<std::size_t> id_col, k_col;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == "clip_id") id_col = i;
    if (header[i] == "k_opt" || (header[i] == "k" && !k_col)) k_col = i;
  }
  if (!id_col) throw Error(Errc::MissingColumn, "clip_id");
  if (!k_col) throw Error(Errc::MissingColumn, "k_opt");
  std::map<std::string, double> labels;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    ++row;
    const auto fields = detail::split_csv(line);
    const auto k = fields.size() > *k_col ? detail::parse_double(fields[*k_col]) : std::nullopt;
    if (!k || fields.size() <= *id_col) {
      throw Error(Errc::MalformedRow, "labels row " + std::to_string(row));
    }
    labels[std::string(fields[*id_col])] = *k;
  }
  return labels;
}

std::map<std::string, double> read_labels_csv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::IoError, "cannot open " + path);
  return read_labels_csv(in);
}

// ---------------------------------------------------------------------------
// Split

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t count,
                                                                            double fraction,
                                                                            std::uint64_t seed) {
  if (count < 2) throw Error(Errc::TooFew, "splitting needs at least two clips");
  const auto n_train = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(count)));
  if (!(fraction > 0.0 && fraction < 1.0) || n_train == 0 || n_train >= count) {
    throw Error(Errc::InvalidFraction,
                "fraction " + format_number(fraction) + " leaves one side of the split empty");
  }
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  Rng rng(mix_seed(seed, 5));
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<std::size_t> train(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<std::size_t> test(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Two-pass evaluation

SummaryStats summarize(const std::vector<ClipOutcome>& outcomes) {
  if (outcomes.empty()) throw Error(Errc::EmptyOutcomes, "nothing to summarize");
  SummaryStats s;
  s.clips = outcomes.size();
  std::size_t ge0 = 0, gt01 = 0, gt1 = 0;
  double final_sum = 0.0;
  s.best_gain = outcomes.front().bd_gain;
  for (const auto& o : outcomes) {
    ge0 += o.bd_gain >= 0.0;
    gt01 += o.bd_gain > 0.1;
    gt1 += o.bd_gain > 1.0;
    s.best_gain = std::max(s.best_gain, o.bd_gain);
    final_sum += o.final_gain;
  }
  const double n = static_cast<double>(outcomes.size());
  s.pct_gain_ge_0 = 100.0 * static_cast<double>(ge0) / n;
  s.pct_gain_gt_0p1 = 100.0 * static_cast<double>(gt01) / n;
  s.pct_gain_gt_1 = 100.0 * static_cast<double>(gt1) / n;
  s.avg_final_gain = final_sum / n;
  return s;
}

FeatureVector collect_features(EncoderBackend& backend, const ClipRef& clip,
                               const SemanticProvider* semantic) {
  const EncodeResult r = backend.encode(clip, kFeatureCrf, 1.0);
  std::optional<SemanticFeatures> sem;
  if (semantic) {
    sem = semantic->features_for(clip, kSemanticFrame);
    if (!sem) throw Error(Errc::InvalidArgument, "no semantic features for clip " + clip.id);
  }
  return assemble_features(r.stats, sem ? &*sem : nullptr, clip.id);
}

Evaluation evaluate_two_pass(const std::vector<ClipRef>& clips, const KSource& source,
                             EncoderBackend& backend, const std::vector<int>& crf_list, int jobs) {
  if (clips.empty()) throw Error(Errc::EmptyManifest, "no clips to evaluate");
  if (const auto* m = std::get_if<ModelK>(&source); m && !m->model) {
    throw Error(Errc::InvalidArgument, "model source without a model");
  }
  Evaluation eval;
  eval.outcomes.resize(clips.size());
  parallel_for(clips.size(), jobs, [&](std::size_t i) {
    const ClipRef& clip = clips[i];
    ClipOutcome& o = eval.outcomes[i];
    o.clip_id = clip.id;
    if (const auto* fixed = std::get_if<FixedK>(&source)) {
      o.k_used = fixed->k;
    } else if (const auto* oracle = std::get_if<OracleK>(&source)) {
      const auto it = oracle->labels.find(clip.id);
      if (it == oracle->labels.end()) throw Error(Errc::InvalidArgument, "no label for clip " + clip.id);
      o.k_used = it->second;
    } else {
      const auto& m = std::get<ModelK>(source);
      const FeatureVector fv = collect_features(backend, clip, m.semantic);
      o.feature_encodes = 1;
      o.k_used = predict_k(*m.model, fv).k;
    }
    const RDCurve anchor = rd_curve(backend, clip, crf_list, 1.0);
    const RDCurve rerun = rd_curve(backend, clip, crf_list, o.k_used);
    o.encodes_used = 2 * crf_list.size();
    o.bd_rate = bd_rate(anchor, rerun).bd_rate;
    o.bd_gain = o.bd_rate == 0.0 ? 0.0 : -o.bd_rate;
    o.final_gain = std::max(0.0, o.bd_gain);
  });
  eval.summary = summarize(eval.outcomes);
  return eval;
}

std::string outcome_json(const ClipOutcome& o) {
  ordered_json j;
  j["clip_id"] = o.clip_id;
  j["k_used"] = round_sig9(o.k_used);
  j["bd_rate_pct"] = round_sig9(o.bd_rate);
  j["bd_gain_pct"] = round_sig9(o.bd_gain);
  j["final_gain_pct"] = round_sig9(o.final_gain);
  j["encodes_used"] = o.encodes_used;
  j["feature_encodes"] = o.feature_encodes;
  return j.dump();
}

ClipOutcome outcome_from_json(const std::string& line) {
  try {
    const auto j = nlohmann::json::parse(line);
    ClipOutcome o;
    o.clip_id = j.at("clip_id").get<std::string>();
    o.k_used = j.at("k_used").get<double>();
    o.bd_rate = j.at("bd_rate_pct").get<double>();
    o.bd_gain = j.at("bd_gain_pct").get<double>();
    o.final_gain = j.at("final_gain_pct").get<double>();
    o.encodes_used = j.value("encodes_used", std::uint64_t{0});
    o.feature_encodes = j.value("feature_encodes", std::uint64_t{0});
    return o;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::FormatError, std::string("outcome record: ") + e.what());
  }
}

std::string summary_json(const SummaryStats& s) {
  ordered_json j;
  j["clips"] = s.clips;
  j["pct_gain_ge_0"] = round_sig9(s.pct_gain_ge_0);
  j["pct_gain_gt_0p1"] = round_sig9(s.pct_gain_gt_0p1);
  j["pct_gain_gt_1"] = round_sig9(s.pct_gain_gt_1);
  j["best_gain_pct"] = round_sig9(s.best_gain);
  j["avg_final_gain_pct"] = round_sig9(s.avg_final_gain);
  return j.dump();
}

// ---------------------------------------------------------------------------
// Figures

std::vector<CdfPoint> gain_cdf(const std::vector<double>& gains) {
  if (gains.empty()) throw Error(Errc::EmptyInput, "no gains for the CDF");
  std::vector<double> sorted = gains;
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(sorted.size());
  std::vector<CdfPoint> cdf;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (i > 0 && sorted[i] == sorted[i - 1]) continue;
    cdf.push_back({sorted[i], static_cast<double>(sorted.size() - i) / n});
  }
  return cdf;
}

std::vector<TracePoint> k_average(const std::vector<std::vector<TracePoint>>& sweeps) {
  if (sweeps.empty() || sweeps.front().empty()) throw Error(Errc::EmptyInput, "no sweeps to average");
  std::vector<TracePoint> mean = sweeps.front();
  for (auto& p : mean) p.bd_rate = 0.0;
  for (const auto& sweep : sweeps) {
    if (sweep.size() != mean.size()) throw Error(Errc::DimensionMismatch, "sweeps use different grids");
    for (std::size_t i = 0; i < sweep.size(); ++i) {
      if (std::abs(sweep[i].k - mean[i].k) > 1e-9) {
        throw Error(Errc::DimensionMismatch, "sweeps use different grids");
      }
      mean[i].bd_rate += sweep[i].bd_rate;
    }
  }
  for (auto& p : mean) p.bd_rate /= static_cast<double>(sweeps.size());
  return mean;
}

std::vector<HistogramBin> k_histogram(const std::vector<double>& ks, double width, double lo, double hi) {
  if (ks.empty()) throw Error(Errc::EmptyInput, "no k values for the histogram");
  if (!(width > 0.0 && hi > lo)) throw Error(Errc::InvalidArgument, "bad histogram range");
  const auto bins = static_cast<std::size_t>(std::llround((hi - lo) / width));
  std::vector<HistogramBin> out(bins);
  for (std::size_t i = 0; i < bins; ++i) {
    out[i].low = lo + static_cast<double>(i) * width;
    out[i].high = lo + static_cast<double>(i + 1) * width;
  }
  for (double k : ks) {
    const double pos = std::floor((k - lo) / width + 1e-9);
    const auto idx = static_cast<std::size_t>(std::clamp(pos, 0.0, static_cast<double>(bins - 1)));
    ++out[idx].count;
  }
  return out;
}

void write_cdf_csv(std::ostream& out, const std::vector<CdfPoint>& cdf) {
  out << "gain_pct,fraction_of_corpus_ge\n";
  for (const auto& p : cdf) out << format_number(p.gain) << ',' << format_number(p.fraction) << '\n';
}

void write_k_avg_csv(std::ostream& out, const std::vector<TracePoint>& curve) {
  out << "k,mean_bd_rate_pct\n";
  for (const auto& p : curve) out << format_number(p.k) << ',' << format_number(p.bd_rate) << '\n';
}

void write_k_hist_csv(std::ostream& out, const std::vector<HistogramBin>& bins) {
  out << "bin_low,bin_high,count\n";
  for (const auto& b : bins) {
    out << format_number(b.low) << ',' << format_number(b.high) << ',' << b.count << '\n';
  }
}

std::vector<std::filesystem::path> emit_figures(const std::filesystem::path& dir,
                                                const std::vector<ClipOutcome>& outcomes,
                                                const std::vector<std::vector<TracePoint>>& sweeps,
                                                const std::vector<double>& optimal_ks) {
  if (outcomes.empty() && sweeps.empty() && optimal_ks.empty()) {
    throw Error(Errc::EmptyInput, "no outcomes, sweeps or labels to plot");
  }
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  const auto emit = [&](const char* name, const auto& writer) {
    const auto path = dir / name;
    std::ofstream out(path);
    if (!out) throw Error(Errc::IoError, "cannot write " + path.string());
    writer(out);
    written.push_back(path);
  };
  if (!outcomes.empty()) {
    std::vector<double> gains;
    for (const auto& o : outcomes) gains.push_back(o.bd_gain);
    emit("cdf.csv", [&](std::ostream& out) { write_cdf_csv(out, gain_cdf(gains)); });
  }
  if (!sweeps.empty()) {
    emit("k_avg.csv", [&](std::ostream& out) { write_k_avg_csv(out, k_average(sweeps)); });
  }
  if (!optimal_ks.empty()) {
    emit("k_hist.csv", [&](std::ostream& out) { write_k_hist_csv(out, k_histogram(optimal_ks)); });
  }
  return written;
}

}  // namespace klambda
