#pragma once

#include "perfscreen/detect/types.hpp"

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

namespace perfscreen::stat {

/// Summary statistics of one athlete's times.
///
/// Conventions: `std` is the sample (n-1) standard deviation; `q1`/`q3` are
/// Tukey hinges, i.e. the medians of the lower and upper halves with the
/// middle observation excluded when n is odd.
struct AthleteBaseline {
  double mean = 0.0;
  double std = 0.0;
  double median = 0.0;
  double mad = 0.0;
  double q1 = 0.0;
  double q3 = 0.0;
  std::size_t n = 0;

  [[nodiscard]] double iqr() const { return q3 - q1; }
};

/// Median of an already sorted range; exact for integer-valued doubles.
inline double sorted_median(std::span<const double> sorted) {
  const std::size_t n = sorted.size();
  if (n == 0) return 0.0;
  return n % 2 ? sorted[n / 2] : (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0;
}

inline double median(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  return sorted_median(values);
}

inline AthleteBaseline baseline(std::span<const double> x) {
  AthleteBaseline b;
  b.n = x.size();
  if (x.empty()) return b;

  double sum = 0.0;
  for (const double v : x) sum += v;
  b.mean = sum / static_cast<double>(b.n);
  if (b.n > 1) {
    double ss = 0.0;
    for (const double v : x) ss += (v - b.mean) * (v - b.mean);
    b.std = std::sqrt(ss / static_cast<double>(b.n - 1));
  }
  // Two-pass mean can leave a tiny residue for constant input.
  if (std::all_of(x.begin(), x.end(), [&](double v) { return v == x.front(); })) b.std = 0.0;

  std::vector<double> sorted(x.begin(), x.end());
  std::sort(sorted.begin(), sorted.end());
  b.median = sorted_median(sorted);

  std::vector<double> dev(sorted.size());
  for (std::size_t i = 0; i < sorted.size(); ++i) dev[i] = std::abs(sorted[i] - b.median);
  std::sort(dev.begin(), dev.end());
  b.mad = sorted_median(dev);

  const std::size_t half = b.n / 2;
  if (half == 0) {
    b.q1 = b.q3 = sorted.front();
  } else {
    b.q1 = sorted_median(std::span<const double>(sorted).first(half));
    b.q3 = sorted_median(std::span<const double>(sorted).last(half));
  }
  return b;
}

struct ScoredFlag {
  double score = 0.0;
  bool flagged = false;
};

/// z = (x - mean) / sd, flagged when |z| > threshold. sd = 0 gives z = 0.
inline std::vector<ScoredFlag> zscore(std::span<const double> x, double threshold) {
  const auto b = baseline(x);
  std::vector<ScoredFlag> out(x.size());
  if (b.std <= 0.0) return out;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double z = (x[i] - b.mean) / b.std;
    out[i] = {z, std::abs(z) > threshold};
  }
  return out;
}

/// Robust z* = scale * (x - median) / MAD, flagged when |z*| > threshold.
/// A zero MAD is a degenerate scale: scores are reported as 0 and nothing is
/// flagged.
inline std::vector<ScoredFlag> robust_zscore(std::span<const double> x, double threshold, double scale) {
  const auto b = baseline(x);
  std::vector<ScoredFlag> out(x.size());
  if (b.mad <= 0.0) return out;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double z = scale * (x[i] - b.median) / b.mad;
    out[i] = {z, std::abs(z) > threshold};
  }
  return out;
}

/// Tukey fences [Q1 - k*IQR, Q3 + k*IQR]. The score is the signed distance
/// beyond the nearest fence (positive outside, negative inside). With
/// integer-valued input and a dyadic multiplier (1.5) the fences are exact.
inline std::vector<ScoredFlag> tukey_fences(std::span<const double> x, double multiplier) {
  const auto b = baseline(x);
  const double spread = b.q3 - b.q1;
  const double lo = b.q1 - multiplier * spread;
  const double hi = b.q3 + multiplier * spread;
  std::vector<ScoredFlag> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double beyond = std::max(lo - x[i], x[i] - hi);
    out[i] = {beyond, x[i] < lo || x[i] > hi};
  }
  return out;
}

/// EP = (x - mean) / sd, flagged only on the fast side (EP < threshold,
/// threshold negative). sd = 0 gives EP = 0.
inline std::vector<ScoredFlag> excess_performance(std::span<const double> x, double threshold) {
  const auto b = baseline(x);
  std::vector<ScoredFlag> out(x.size());
  if (b.std <= 0.0) return out;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double ep = (x[i] - b.mean) / b.std;
    out[i] = {ep, ep < threshold};
  }
  return out;
}

// ---------------------------------------------------------------------------
// History-level operations. Times enter as integer centiseconds so medians,
// MAD and fences are computed without rounding; ratios are scale-free and
// the IQR score is converted back to seconds.

inline std::vector<double> centiseconds_of(const AthleteHistory& h) {
  std::vector<double> x;
  x.reserve(h.size());
  for (const auto& p : h.performances) x.push_back(static_cast<double>(p.centiseconds));
  return x;
}

inline void require_history(const AthleteHistory& h, const DetectorConfig& cfg) {
  if (h.size() < static_cast<std::size_t>(cfg.min_history))
    throw PreconditionError("athlete " + h.athlete_id + " has fewer than min_history performances");
}

inline AthleteBaseline baseline_seconds(const AthleteHistory& h) {
  auto b = baseline(centiseconds_of(h));
  for (double* v : {&b.mean, &b.std, &b.median, &b.mad, &b.q1, &b.q3}) *v /= 100.0;
  return b;
}

inline std::vector<ScoredFlag> zscore_detect(const AthleteHistory& h, const DetectorConfig& cfg) {
  require_history(h, cfg);
  return zscore(centiseconds_of(h), cfg.z_threshold);
}

inline std::vector<ScoredFlag> mad_detect(const AthleteHistory& h, const DetectorConfig& cfg) {
  require_history(h, cfg);
  return robust_zscore(centiseconds_of(h), cfg.mad_threshold, cfg.mad_scale);
}

inline std::vector<ScoredFlag> iqr_detect(const AthleteHistory& h, const DetectorConfig& cfg) {
  require_history(h, cfg);
  auto out = tukey_fences(centiseconds_of(h), cfg.iqr_multiplier);
  for (auto& s : out) s.score /= 100.0;
  return out;
}

inline std::vector<ScoredFlag> excess_detect(const AthleteHistory& h, const DetectorConfig& cfg) {
  require_history(h, cfg);
  return excess_performance(centiseconds_of(h), cfg.excess_threshold);
}

}  // namespace perfscreen::stat
