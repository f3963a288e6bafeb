#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "klambda/encoder.hpp"
#include "klambda/features.hpp"
#include "klambda/mlp.hpp"
#include "klambda/optimizer.hpp"
#include "klambda/rng.hpp"

namespace klambda {

// ---------------------------------------------------------------------------
// Manifests

/// JSON lines, one clip per line: either
///   {"id", "source", "frame_count", "width", "height"} for a raw video file or
///   {"id", "synthetic": {r0, gamma, p0, s, k_star, g, sigma, seed}, "frame_count"?}.
/// Throws FormatError on bad lines and InvalidArgument on duplicate ids.
std::vector<ClipRef> read_manifest(std::istream& in);
std::vector<ClipRef> read_manifest_file(const std::string& path);
void write_manifest(std::ostream& out, const std::vector<ClipRef>& clips);

/// Shape of the generated synthetic corpus. k_star is drawn from a mixture: a
/// `concentrated` share uniform in log k over [0.7, 0.8], the rest log-normal
/// around `mode` with `log_spread`, clamped to [0.2, 3].
struct CorpusShape {
  double concentrated = 0.2;
  double mode = 0.75;
  double log_spread = 0.8;
  double sigma_lo = 0.1;
  double sigma_hi = 0.2;
  double g_lo = 0.01;
  double g_hi = 0.12;
};

std::vector<ClipRef> synthetic_corpus(std::size_t count, std::uint64_t seed,
                                      const CorpusShape& shape = {});

// ---------------------------------------------------------------------------
// Worker pool

/// Runs fn(i) for i in [0, count) on at most `jobs` threads. The first
/// exception thrown by any item is rethrown after all workers stop.
void parallel_for(std::size_t count, int jobs, const std::function<void(std::size_t)>& fn);

int default_jobs();

// ---------------------------------------------------------------------------
// Labelling

struct ClipLabel {
  std::string clip_id;
  double k_opt = 1.0;
  double bd_gain = 0.0;  ///< -bd_rate at k_opt, percent
  std::uint64_t encodes_used = 0;
  int iterations = 0;
  bool local = false;
  std::string error;  ///< non-empty for failed clips

  bool ok() const { return error.empty(); }
};

struct LabelRun {
  std::vector<ClipLabel> labels;    ///< successful clips, manifest order
  std::vector<ClipLabel> failures;  ///< failed clips with their error text
  std::size_t resumed = 0;          ///< clips read back from the store instead of re-encoded
};

/// Runs optimize_k for every clip. With a store directory, each finished clip
/// is written atomically to its own file, keyed by a hash of the clip and the
/// configuration, and already-present files are reused on the next run.
/// Throws EmptyManifest.
LabelRun label_corpus(const std::vector<ClipRef>& clips, EncoderBackend& backend,
                      const OptConfig& cfg, const std::optional<std::filesystem::path>& store = {},
                      int jobs = 1);

/// `clip_id,k_opt,bd_gain_pct,encodes_used`.
void write_labels_csv(std::ostream& out, const std::vector<ClipLabel>& labels);
/// Accepts a `clip_id` column and a `k_opt` (or `k`) column.
std::map<std::string, double> read_labels_csv(std::istream& in);
std::map<std::string, double> read_labels_csv_file(const std::string& path);

// ---------------------------------------------------------------------------
// Train / test split

/// Seeded shuffle of [0, count) split into round(fraction * count) training
/// indices and the rest. Throws TooFew (count < 2) or InvalidFraction (either
/// side would be empty).
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t count,
                                                                            double fraction,
                                                                            std::uint64_t seed);

template <typename T>
std::pair<std::vector<T>, std::vector<T>> split_corpus(const std::vector<T>& items, double fraction,
                                                       std::uint64_t seed) {
  const auto [train_idx, test_idx] = split_indices(items.size(), fraction, seed);
  std::pair<std::vector<T>, std::vector<T>> out;
  for (auto i : train_idx) out.first.push_back(items[i]);
  for (auto i : test_idx) out.second.push_back(items[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Two-pass evaluation

struct FixedK {
  double k = 1.0;
};
struct ModelK {
  const MLPModel* model = nullptr;
  const SemanticProvider* semantic = nullptr;
};
struct OracleK {
  std::map<std::string, double> labels;
};
using KSource = std::variant<FixedK, ModelK, OracleK>;

struct ClipOutcome {
  std::string clip_id;
  double k_used = 1.0;
  double bd_rate = 0.0;     ///< percent, re-run against the default encode
  double bd_gain = 0.0;     ///< -bd_rate
  double final_gain = 0.0;  ///< max(0, bd_gain): the better of the two encodes
  std::uint64_t encodes_used = 0;     ///< the two RD curves
  std::uint64_t feature_encodes = 0;  ///< the CRF 33 feature pass (model source only)
};

/// Percentages are of the number of clips; gains are percent BD-Rate.
struct SummaryStats {
  std::size_t clips = 0;
  double pct_gain_ge_0 = 0.0;
  double pct_gain_gt_0p1 = 0.0;
  double pct_gain_gt_1 = 0.0;
  double best_gain = 0.0;
  double avg_final_gain = 0.0;  ///< mean of final_gain over all clips, zeros included
};

/// Throws EmptyOutcomes.
SummaryStats summarize(const std::vector<ClipOutcome>& outcomes);

struct Evaluation {
  std::vector<ClipOutcome> outcomes;
  SummaryStats summary;
};

/// Default encode (k = 1) and optimised re-run (k from the source) per clip;
/// the re-run is kept only when it wins. Throws InvalidArgument when the
/// source cannot supply k for a clip.
Evaluation evaluate_two_pass(const std::vector<ClipRef>& clips, const KSource& source,
                             EncoderBackend& backend,
                             const std::vector<int>& crf_list = default_crf_list(), int jobs = 1);

/// The CRF 33, k = 1 feature pass for one clip.
FeatureVector collect_features(EncoderBackend& backend, const ClipRef& clip,
                               const SemanticProvider* semantic = nullptr);

std::string outcome_json(const ClipOutcome& outcome);
ClipOutcome outcome_from_json(const std::string& line);
std::string summary_json(const SummaryStats& summary);

// ---------------------------------------------------------------------------
// Figure data

struct CdfPoint {
  double gain = 0.0;
  double fraction = 0.0;  ///< share of clips whose gain is >= `gain`
};
/// One point per distinct gain, ascending. Throws EmptyInput.
std::vector<CdfPoint> gain_cdf(const std::vector<double>& gains);

/// Mean BD-Rate per k across per-clip sweeps on a common grid. Throws EmptyInput.
std::vector<TracePoint> k_average(const std::vector<std::vector<TracePoint>>& sweeps);

struct HistogramBin {
  double low = 0.0;
  double high = 0.0;
  std::size_t count = 0;
};
/// Bins of `width` over [lo, hi]; values outside are counted in the edge bins.
std::vector<HistogramBin> k_histogram(const std::vector<double>& ks, double width = 0.1,
                                      double lo = 0.2, double hi = 3.0);

void write_cdf_csv(std::ostream& out, const std::vector<CdfPoint>& cdf);
void write_k_avg_csv(std::ostream& out, const std::vector<TracePoint>& curve);
void write_k_hist_csv(std::ostream& out, const std::vector<HistogramBin>& bins);

/// Writes cdf.csv, k_avg.csv and k_hist.csv into `dir` for whichever inputs
/// are non-empty. Throws EmptyInput if all are empty.
std::vector<std::filesystem::path> emit_figures(const std::filesystem::path& dir,
                                                const std::vector<ClipOutcome>& outcomes,
                                                const std::vector<std::vector<TracePoint>>& sweeps,
                                                const std::vector<double>& optimal_ks);

}  // namespace klambda
