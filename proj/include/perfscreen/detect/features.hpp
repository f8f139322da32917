#pragma once

#include "perfscreen/detect/types.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

namespace perfscreen::ml {

inline constexpr std::size_t kRecentFormWindow = 5;

inline int round_ordinal(Round r) {
  switch (r) {
    case Round::semifinal: return 1;
    case Round::final: return 2;
    default: return 0;
  }
}

struct FeatureVector {
  double time_seconds = 0.0;
  double wind_mps = 0.0;  // 0.0 when missing
  int competition_level = 0;
  double recent_form = 0.0;
  int round_ordinal = 0;
};

/// Where a feature row came from: history index and performance index.
struct RowSource {
  std::size_t history = 0;
  std::size_t performance = 0;
};

struct FeatureTable {
  std::vector<FeatureVector> rows;
  std::vector<RowSource> sources;
};

/// One row per performance, in history order. recent_form is the mean of up
/// to five strictly earlier performances, falling back to the athlete's slice
/// mean for the first race.
inline FeatureTable build_features(std::span<const AthleteHistory> histories) {
  FeatureTable t;
  std::size_t total = 0;
  for (const auto& h : histories) total += h.size();
  t.rows.reserve(total);
  t.sources.reserve(total);

  for (std::size_t hi = 0; hi < histories.size(); ++hi) {
    const auto& perf = histories[hi].performances;
    double slice_sum = 0.0;
    for (const auto& p : perf) slice_sum += p.time_seconds();
    const double slice_mean = perf.empty() ? 0.0 : slice_sum / static_cast<double>(perf.size());

    for (std::size_t j = 0; j < perf.size(); ++j) {
      const auto& p = perf[j];
      FeatureVector f;
      f.time_seconds = p.time_seconds();
      f.wind_mps = p.wind_mps.value_or(0.0);
      f.competition_level = p.competition_level;
      f.round_ordinal = round_ordinal(p.round);
      if (j == 0) {
        f.recent_form = slice_mean;
      } else {
        const std::size_t from = j > kRecentFormWindow ? j - kRecentFormWindow : 0;
        double s = 0.0;
        for (std::size_t k = from; k < j; ++k) s += perf[k].time_seconds();
        f.recent_form = s / static_cast<double>(j - from);
      }
      t.rows.push_back(f);
      t.sources.push_back({hi, j});
    }
  }
  return t;
}

/// Indices of the `count` largest values; ties keep input order.
inline std::vector<std::size_t> top_k_indices(std::span<const double> values, std::size_t count) {
  std::vector<std::size_t> idx(values.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  idx.resize(std::min(count, idx.size()));
  return idx;
}

/// Upper-tail cut: with k = round((1 - q) * n) the cutoff is the (k+1)-th
/// largest value, so `value > cutoff` selects exactly k rows when there are
/// no ties at the cut.
inline double upper_quantile_cut(std::vector<double> values, double q) {
  if (values.empty()) return 0.0;
  const auto n = values.size();
  auto k = static_cast<std::size_t>(std::llround((1.0 - q) * static_cast<double>(n)));
  k = std::min(k, n - 1);
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(k), values.end(), std::greater<>());
  return values[k];
}

/// Lower-tail counterpart: `value < cutoff` selects the k = round(q * n) lowest.
inline double lower_quantile_cut(std::vector<double> values, double q) {
  if (values.empty()) return 0.0;
  const auto n = values.size();
  auto k = static_cast<std::size_t>(std::llround(q * static_cast<double>(n)));
  k = std::min(k, n - 1);
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(k), values.end());
  return values[k];
}

}  // namespace perfscreen::ml
