#pragma once

#include <array>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace klambda {

/// One operating point of an encode: bitrate in kbps and global PSNR in dB.
struct RDPoint {
  double rate = 0.0;
  double quality = 0.0;

  friend bool operator==(const RDPoint&, const RDPoint&) = default;
};

/// A validated rate-distortion curve: at least four points, sorted by rate,
/// with rate and quality both strictly increasing.
class RDCurve {
 public:
  const std::vector<RDPoint>& points() const noexcept { return points_; }
  const std::string& label() const noexcept { return label_; }
  std::size_t size() const noexcept { return points_.size(); }

  double min_quality() const { return points_.front().quality; }
  double max_quality() const { return points_.back().quality; }

  friend bool operator==(const RDCurve&, const RDCurve&) = default;

 private:
  friend RDCurve validate_curve(std::vector<RDPoint> points, std::string label);
  RDCurve() = default;

  std::vector<RDPoint> points_;
  std::string label_;
};

struct BDResult {
  double bd_rate = 0.0;                ///< percent; negative means the test curve saves bits
  std::optional<double> bd_psnr;       ///< dB; empty when the log-rate ranges do not overlap
  double overlap_low = 0.0;            ///< dB
  double overlap_high = 0.0;           ///< dB
};

/// Sorts the points by rate and checks the curve invariants.
/// Throws TooFewPoints, DuplicateRate or NonMonotone.
RDCurve validate_curve(std::vector<RDPoint> points, std::string label = {});

/// Bjontegaard delta rate of `test` relative to `anchor`.
///
/// log10(rate) is fitted as a cubic in PSNR for each curve by least squares and
/// the mean log-rate difference over the common PSNR interval is obtained from
/// the exact antiderivative. BD-PSNR is the symmetric construction on
/// PSNR-versus-log-rate fits. Nothing is extrapolated.
BDResult bd_rate(const RDCurve& anchor, const RDCurve& test);

/// Cubic least-squares fit y ~ c0 + c1 t + c2 t^2 + c3 t^3 where t = (x - center) / scale.
struct CubicFit {
  std::array<double, 4> coeffs{};
  double center = 0.0;
  double scale = 1.0;

  double operator()(double x) const;
};

/// Throws FitFailure when the design matrix is rank deficient.
CubicFit fit_cubic(std::span<const double> xs, std::span<const double> ys, double center,
                   double scale);

// CSV with header `rate_kbps,psnr_db`.
RDCurve read_curve_csv(std::istream& in, std::string label = {});
RDCurve read_curve_csv_file(const std::string& path);
void write_curve_csv(std::ostream& out, const RDCurve& curve);

/// JSON object with keys bd_rate_pct, bd_psnr_db, overlap_db.
std::string bd_result_json(const BDResult& result);

}  // namespace klambda
