#include "klambda/bd_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "csv_util.hpp"
#include "klambda/error.hpp"
#include "klambda/format.hpp"

namespace klambda {

RDCurve validate_curve(std::vector<RDPoint> points, std::string label) {
  if (points.size() < 4) {
    throw Error(Errc::TooFewPoints,
                "an RD curve needs at least 4 points, got " + std::to_string(points.size()));
  }
  for (const auto& p : points) {
    if (!(p.rate > 0.0) || !std::isfinite(p.rate)) {
      throw Error(Errc::InvalidArgument, "rate must be positive and finite");
    }
    if (!std::isfinite(p.quality)) throw Error(Errc::InvalidArgument, "quality must be finite");
  }
  std::sort(points.begin(), points.end(), [](const RDPoint& a, const RDPoint& b) {
    return a.rate < b.rate || (a.rate == b.rate && a.quality < b.quality);
  });
  for (std::size_t i = 1; i < points.size(); ++i) {
    if (points[i].rate == points[i - 1].rate) {
      throw Error(Errc::DuplicateRate, "rate " + format_number(points[i].rate) + " appears twice");
    }
    if (!(points[i].quality > points[i - 1].quality)) {
      throw Error(Errc::NonMonotone, "quality does not increase strictly with rate at " +
                                         format_number(points[i].rate) + " kbps");
    }
  }
  RDCurve curve;
  curve.points_ = std::move(points);
  curve.label_ = std::move(label);
  return curve;
}

double CubicFit::operator()(double x) const {
  const double t = (x - center) / scale;
  return coeffs[0] + t * (coeffs[1] + t * (coeffs[2] + t * coeffs[3]));
}

CubicFit fit_cubic(std::span<const double> xs, std::span<const double> ys, double center,
                   double scale) {
  if (xs.size() != ys.size() || xs.size() < 4) {
    throw Error(Errc::FitFailure, "cubic fit needs at least 4 paired samples");
  }
  const auto n = static_cast<Eigen::Index>(xs.size());
  Eigen::MatrixXd design(n, 4);
  Eigen::VectorXd rhs(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double t = (xs[i] - center) / scale;
    design(i, 0) = 1.0;
    design(i, 1) = t;
    design(i, 2) = t * t;
    design(i, 3) = t * t * t;
    rhs(i) = ys[i];
  }
  const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
  if (qr.rank() < 4) throw Error(Errc::FitFailure, "singular cubic fit");
  const Eigen::Vector4d c = qr.solve(rhs);
  if (!c.allFinite()) throw Error(Errc::FitFailure, "non-finite cubic coefficients");
  CubicFit fit;
  fit.coeffs = {c(0), c(1), c(2), c(3)};
  fit.center = center;
  fit.scale = scale;
  return fit;
}

namespace {

// Mean over t in [-1, 1] of (b - a) for two fits sharing the same normalization.
double mean_difference(const CubicFit& a, const CubicFit& b) {
  const double d0 = b.coeffs[0] - a.coeffs[0];
  const double d2 = b.coeffs[2] - a.coeffs[2];
  return d0 + d2 / 3.0;
}

struct Samples {
  std::vector<double> quality;
  std::vector<double> log_rate;
};

Samples samples_of(const RDCurve& curve) {
  Samples s;
  for (const auto& p : curve.points()) {
    s.quality.push_back(p.quality);
    s.log_rate.push_back(std::log10(p.rate));
  }
  return s;
}

}  // namespace

BDResult bd_rate(const RDCurve& anchor, const RDCurve& test) {
  const double low = std::max(anchor.min_quality(), test.min_quality());
  const double high = std::min(anchor.max_quality(), test.max_quality());
  if (!(low < high)) {
    throw Error(Errc::NoOverlap, "quality ranges [" + format_number(anchor.min_quality()) + ", " +
                                     format_number(anchor.max_quality()) + "] and [" +
                                     format_number(test.min_quality()) + ", " +
                                     format_number(test.max_quality()) + "] do not overlap");
  }
  const Samples a = samples_of(anchor);
  const Samples t = samples_of(test);

  const double q_center = 0.5 * (low + high);
  const double q_scale = 0.5 * (high - low);
  const CubicFit rate_a = fit_cubic(a.quality, a.log_rate, q_center, q_scale);
  const CubicFit rate_t = fit_cubic(t.quality, t.log_rate, q_center, q_scale);
  const double mean_log_diff = mean_difference(rate_a, rate_t);

  BDResult result;
  result.bd_rate = std::expm1(mean_log_diff * std::log(10.0)) * 100.0;
  result.overlap_low = low;
  result.overlap_high = high;

  const double r_low = std::max(a.log_rate.front(), t.log_rate.front());
  const double r_high = std::min(a.log_rate.back(), t.log_rate.back());
  if (r_low < r_high) {
    const double r_center = 0.5 * (r_low + r_high);
    const double r_scale = 0.5 * (r_high - r_low);
    const CubicFit psnr_a = fit_cubic(a.log_rate, a.quality, r_center, r_scale);
    const CubicFit psnr_t = fit_cubic(t.log_rate, t.quality, r_center, r_scale);
    result.bd_psnr = mean_difference(psnr_a, psnr_t);
  }
  return result;
}

RDCurve read_curve_csv(std::istream& in, std::string label) {
  std::string line;
  if (!std::getline(in, line)) throw Error(Errc::FormatError, "empty RD curve CSV");
  const auto header = detail::split_csv(line);
  if (header.size() != 2 || header[0] != "rate_kbps" || header[1] != "psnr_db") {
    throw Error(Errc::FormatError, "RD curve CSV header must be rate_kbps,psnr_db");
  }
  std::vector<RDPoint> points;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (detail::trim(line).empty()) continue;
    const auto fields = detail::split_csv(line);
    const auto rate = fields.size() == 2 ? detail::parse_double(fields[0]) : std::nullopt;
    const auto psnr = fields.size() == 2 ? detail::parse_double(fields[1]) : std::nullopt;
    if (!rate || !psnr) throw Error(Errc::MalformedRow, "RD curve row " + std::to_string(row));
    points.push_back({*rate, *psnr});
  }
  return validate_curve(std::move(points), std::move(label));
}

RDCurve read_curve_csv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::IoError, "cannot open " + path);
  return read_curve_csv(in, path);
}

void write_curve_csv(std::ostream& out, const RDCurve& curve) {
  out << "rate_kbps,psnr_db\n";
  for (const auto& p : curve.points()) {
    out << detail::shortest(p.rate) << ',' << detail::shortest(p.quality) << '\n';
  }
}

std::string bd_result_json(const BDResult& result) {
  nlohmann::ordered_json j;
  j["bd_rate_pct"] = round_sig9(result.bd_rate);
  j["bd_psnr_db"] = result.bd_psnr ? nlohmann::ordered_json(round_sig9(*result.bd_psnr))
                                   : nlohmann::ordered_json(nullptr);
  j["overlap_db"] = {round_sig9(result.overlap_low), round_sig9(result.overlap_high)};
  return j.dump();
}

}  // namespace klambda
