#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "klambda/bd_metrics.hpp"
#include "klambda/encoder.hpp"
#include "klambda/error.hpp"

namespace klambda {

struct OptConfig {
  double k_min = 0.2;
  double k_max = 3.0;
  double tol = 0.01;
  int max_iters = 40;
  std::vector<int> crf_list = default_crf_list();

  /// Throws InvalidArgument unless 0 < k_min < 1 < k_max and tol > 0.
  void validate() const;
};

struct TracePoint {
  double k = 0.0;
  double bd_rate = 0.0;
};

struct OptResult {
  double k_opt = 1.0;
  double bd_rate_at_k_opt = 0.0;
  int iterations = 0;
  std::uint64_t encodes_used = 0;
  std::vector<TracePoint> trace;  ///< fresh evaluations only, in evaluation order
  bool local = false;             ///< trace values were not unimodal around k_opt
};

/// Raised when golden-section search runs out of iterations; carries the best
/// point found so far.
class BudgetExceeded : public Error {
 public:
  explicit BudgetExceeded(OptResult best)
      : Error(Errc::BudgetExceeded, "iteration budget exhausted before the bracket reached tol"),
        best_(std::move(best)) {}
  const OptResult& best() const noexcept { return best_; }

 private:
  OptResult best_;
};

/// BD-Rate of the clip at scale k against its k = 1 anchor, memoized on k
/// rounded to 1e-6. Building the objective encodes the anchor curve once.
class Objective {
 public:
  Objective(EncoderBackend& backend, ClipRef clip, std::vector<int> crf_list = default_crf_list());

  double operator()(double k);

  const RDCurve& anchor() const noexcept { return anchor_; }
  const ClipRef& clip() const noexcept { return clip_; }
  const std::vector<int>& crf_list() const noexcept { return crf_list_; }
  const std::vector<TracePoint>& trace() const noexcept { return trace_; }
  /// Encodes issued by this objective, anchor included. Independent of other
  /// users of the backend.
  std::uint64_t encodes() const noexcept { return encodes_; }

 private:
  static std::int64_t key(double k);

  EncoderBackend& backend_;
  ClipRef clip_;
  std::vector<int> crf_list_;
  RDCurve anchor_;
  std::uint64_t encodes_ = 0;
  std::map<std::int64_t, double> memo_;
  std::vector<TracePoint> trace_;
};

/// Golden-section search for the k minimizing BD-Rate on [k_min, k_max].
/// Stops once the bracket is narrower than tol; the result is the best traced
/// point, with ties going to the smaller k. Throws BudgetExceeded.
OptResult optimize_k(EncoderBackend& backend, const ClipRef& clip, const OptConfig& cfg = {});

/// Objective on every grid point, in grid order.
std::vector<TracePoint> sweep_k(EncoderBackend& backend, const ClipRef& clip,
                                const std::vector<double>& grid,
                                const std::vector<int>& crf_list = default_crf_list());

/// Parses "start:step:stop" (inclusive stop).
std::vector<double> parse_grid(const std::string& spec);

}  // namespace klambda
