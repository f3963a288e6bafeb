#include "klambda/optimizer.hpp"

#include <algorithm>
#include <cmath>

#include "csv_util.hpp"
#include "klambda/format.hpp"

namespace klambda {

void OptConfig::validate() const {
  if (!(k_min > 0.0 && k_min < 1.0 && k_max > 1.0 && std::isfinite(k_max))) {
    throw Error(Errc::InvalidArgument, "bounds must satisfy 0 < k_min < 1 < k_max");
  }
  if (!(tol > 0.0)) throw Error(Errc::InvalidArgument, "tol must be positive");
  if (max_iters < 1) throw Error(Errc::InvalidArgument, "max_iters must be at least 1");
  if (crf_list.empty()) throw Error(Errc::InvalidArgument, "empty CRF list");
}

Objective::Objective(EncoderBackend& backend, ClipRef clip, std::vector<int> crf_list)
    : backend_(backend),
      clip_(std::move(clip)),
      crf_list_(std::move(crf_list)),
      anchor_(rd_curve(backend_, clip_, crf_list_, 1.0)),
      encodes_(crf_list_.size()) {
  memo_.emplace(key(1.0), 0.0);
}

std::int64_t Objective::key(double k) { return std::llround(k * 1e6); }

double Objective::operator()(double k) {
  const auto [it, fresh] = memo_.try_emplace(key(k), 0.0);
  if (fresh) {
    try {
      const RDCurve curve = rd_curve(backend_, clip_, crf_list_, k);
      encodes_ += crf_list_.size();
      it->second = bd_rate(anchor_, curve).bd_rate;
    } catch (...) {
      memo_.erase(it);
      throw;
    }
    trace_.push_back({k, it->second});
  }
  return it->second;
}

namespace {

OptResult best_of(const Objective& objective, int iterations) {
  OptResult result;
  result.iterations = iterations;
  result.encodes_used = objective.encodes();
  result.trace = objective.trace();
  if (result.trace.empty()) return result;
  const auto best = std::min_element(result.trace.begin(), result.trace.end(),
                                     [](const TracePoint& a, const TracePoint& b) {
                                       return a.bd_rate < b.bd_rate ||
                                              (a.bd_rate == b.bd_rate && a.k < b.k);
                                     });
  result.k_opt = best->k;
  result.bd_rate_at_k_opt = best->bd_rate;

  // A unimodal objective falls to its minimum along sorted k, then rises.
  auto sorted = result.trace;
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.k < b.k; });
  std::size_t pos = 0;
  while (sorted[pos].k != result.k_opt) ++pos;
  for (std::size_t i = 0; i + 1 < sorted.size(); ++i) {
    const bool rises = sorted[i + 1].bd_rate > sorted[i].bd_rate;
    const bool falls = sorted[i + 1].bd_rate < sorted[i].bd_rate;
    if ((i < pos && rises) || (i >= pos && falls)) result.local = true;
  }
  return result;
}

}  // namespace

OptResult optimize_k(EncoderBackend& backend, const ClipRef& clip, const OptConfig& cfg) {
  cfg.validate();
  Objective f(backend, clip, cfg.crf_list);

  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double lo = cfg.k_min;
  double hi = cfg.k_max;
  double left = hi - inv_phi * (hi - lo);
  double right = lo + inv_phi * (hi - lo);
  double f_left = f(left);
  double f_right = f(right);
  int iterations = 0;

  while (hi - lo >= cfg.tol) {
    if (iterations == cfg.max_iters) {
      throw BudgetExceeded(best_of(f, iterations));
    }
    ++iterations;
    // Ties keep the left interior point so the smaller k wins.
    if (f_left <= f_right) {
      hi = right;
      if (hi - lo < cfg.tol) break;
      right = left;
      f_right = f_left;
      left = hi - inv_phi * (hi - lo);
      f_left = f(left);
    } else {
      lo = left;
      if (hi - lo < cfg.tol) break;
      left = right;
      f_left = f_right;
      right = lo + inv_phi * (hi - lo);
      f_right = f(right);
    }
  }
  return best_of(f, iterations);
}

std::vector<TracePoint> sweep_k(EncoderBackend& backend, const ClipRef& clip,
                                const std::vector<double>& grid, const std::vector<int>& crf_list) {
  for (double k : grid) {
    if (!(k > 0.0)) throw Error(Errc::InvalidArgument, "grid values must be positive");
  }
  Objective f(backend, clip, crf_list);
  std::vector<TracePoint> out;
  out.reserve(grid.size());
  for (double k : grid) out.push_back({k, f(k)});
  return out;
}

std::vector<double> parse_grid(const std::string& spec) {
  const auto first = spec.find(':');
  const auto second = first == std::string::npos ? first : spec.find(':', first + 1);
  if (second == std::string::npos) {
    const auto single = detail::parse_double(detail::trim(spec));
    if (!single) throw Error(Errc::InvalidArgument, "grid must be start:step:stop, got " + spec);
    return {*single};
  }
  const auto start = detail::parse_double(detail::trim(std::string_view(spec).substr(0, first)));
  const auto step =
      detail::parse_double(detail::trim(std::string_view(spec).substr(first + 1, second - first - 1)));
  const auto stop = detail::parse_double(detail::trim(std::string_view(spec).substr(second + 1)));
  if (!start || !step || !stop || !(*step > 0.0) || *stop < *start) {
    throw Error(Errc::InvalidArgument, "grid must be start:step:stop with step > 0, got " + spec);
  }
  const auto count = static_cast<std::size_t>(std::floor((*stop - *start) / *step + 1e-9)) + 1;
  std::vector<double> grid(count);
  for (std::size_t i = 0; i < count; ++i) grid[i] = *start + static_cast<double>(i) * *step;
  return grid;
}

}  // namespace klambda
