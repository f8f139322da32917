#pragma once

#include "perfscreen/core/errors.hpp"
#include "perfscreen/detect/types.hpp"
#include "perfscreen/ingest.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

namespace perfscreen::synth {

enum class OracleRule { zscore, mad, iqr, excess };

/// A flagged performance identified by value, not position.
using FlagKey = std::tuple<std::string, std::int32_t, std::int32_t>;  // athlete_id, date days, centiseconds

/// Literal transcription of the four per-athlete rules in exact integer
/// arithmetic on centiseconds. Thresholds are read as rationals with three
/// decimals (mad_scale with four), so every comparison is decided exactly:
///
///   |z| > k      <=>  (n x - S)^2 (n - 1) > k^2 n (n Q - S^2)
///   EP < t (t<0) <=>  n x - S < 0  and  (n x - S)^2 (n - 1) > t^2 n (n Q - S^2)
///   |z*| > k     <=>  2 c |2x - 2m| > k * 2 * 2 MAD      (medians kept doubled)
///   outside fences <=> 2x < 2Q1 - f (2Q3 - 2Q1)  or  2x > 2Q3 + f (2Q3 - 2Q1)
inline std::set<FlagKey> oracle_flags(std::span<const PerformanceRecord> performances, OracleRule rule,
                                      const DetectorConfig& cfg) {
  using i128 = __int128;
  const auto rational = [](double v, std::int64_t denom) {
    const double scaled = v * static_cast<double>(denom);
    const auto r = std::llround(scaled);
    if (std::abs(scaled - static_cast<double>(r)) > 1e-6) throw PreconditionError("oracle threshold is not a short decimal");
    return static_cast<std::int64_t>(r);
  };

  std::map<std::string, std::vector<const PerformanceRecord*>> by_athlete;
  for (const auto& p : performances) by_athlete[p.athlete_id].push_back(&p);

  std::set<FlagKey> flags;
  for (const auto& [athlete, recs] : by_athlete) {
    const auto n = static_cast<std::int64_t>(recs.size());
    if (n < cfg.min_history) continue;
    std::vector<std::int64_t> x;
    for (const auto* r : recs) x.push_back(r->centiseconds);
    const auto flag = [&](std::size_t i) { flags.emplace(athlete, recs[i]->date.days(), recs[i]->centiseconds); };

    if (rule == OracleRule::zscore || rule == OracleRule::excess) {
      i128 s = 0, q = 0;
      for (const auto v : x) {
        s += v;
        q += static_cast<i128>(v) * v;
      }
      const i128 spread = n * q - s * s;  // n^2 * biased variance
      if (spread == 0) continue;
      const std::int64_t kd = 1000;
      const std::int64_t kn = rule == OracleRule::zscore ? rational(cfg.z_threshold, kd)
                                                         : rational(-cfg.excess_threshold, kd);
      for (std::size_t i = 0; i < x.size(); ++i) {
        const i128 dev = n * x[i] - s;
        const bool beyond = dev * dev * (n - 1) * kd * kd > static_cast<i128>(kn) * kn * n * spread;
        if (rule == OracleRule::zscore ? beyond : (dev < 0 && beyond)) flag(i);
      }
      continue;
    }

    std::vector<std::int64_t> sorted = x;
    std::sort(sorted.begin(), sorted.end());
    // Doubled median: sum of the two middle elements, or twice the middle one.
    const auto doubled_median = [](const std::vector<std::int64_t>& v, std::size_t from, std::size_t count) {
      return count % 2 ? 2 * v[from + count / 2] : v[from + count / 2 - 1] + v[from + count / 2];
    };

    if (rule == OracleRule::mad) {
      const std::int64_t m2 = doubled_median(sorted, 0, sorted.size());
      std::vector<std::int64_t> dev;
      for (const auto v : x) dev.push_back(std::abs(2 * v - m2));
      std::sort(dev.begin(), dev.end());
      const std::int64_t mad4 = doubled_median(dev, 0, dev.size());  // 4 * MAD
      if (mad4 == 0) continue;
      const std::int64_t cn = rational(cfg.mad_scale, 10000);
      const std::int64_t kn = rational(cfg.mad_threshold, 1000);
      for (std::size_t i = 0; i < x.size(); ++i) {
        const i128 lhs = static_cast<i128>(2) * cn * std::abs(2 * x[i] - m2) * 1000;
        const i128 rhs = static_cast<i128>(kn) * 10000 * mad4;
        if (lhs > rhs) flag(i);
      }
      continue;
    }

    // Tukey hinges: medians of the lower and upper halves, middle excluded.
    const std::size_t half = sorted.size() / 2;
    const std::int64_t q1 = half == 0 ? 2 * sorted.front() : doubled_median(sorted, 0, half);
    const std::int64_t q3 = half == 0 ? 2 * sorted.front() : doubled_median(sorted, sorted.size() - half, half);
    const std::int64_t fn = rational(cfg.iqr_multiplier, 1000);
    const i128 iqr = q3 - q1;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const i128 v = static_cast<i128>(2000) * x[i];
      if (v < static_cast<i128>(1000) * q1 - fn * iqr || v > static_cast<i128>(1000) * q3 + fn * iqr) flag(i);
    }
  }
  return flags;
}

/// Flag keys of a detector result, for comparison with the oracle.
inline std::set<FlagKey> flag_keys(const DetectionResult& r) {
  std::set<FlagKey> out;
  for (const auto& e : r.entries)
    if (e.flagged) out.emplace(e.ref.athlete_id, e.ref.date.days(), e.ref.centiseconds);
  return out;
}

}  // namespace perfscreen::synth
