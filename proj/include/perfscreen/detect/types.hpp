#pragma once

#include "perfscreen/core/errors.hpp"
#include "perfscreen/core/hash.hpp"
#include "perfscreen/ingest.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace perfscreen {

/// Chronologically ordered performances of one athlete in one event slice.
struct AthleteHistory {
  std::string athlete_id;
  std::string event_code;
  std::vector<PerformanceRecord> performances;

  [[nodiscard]] std::size_t size() const { return performances.size(); }

  void validate() const {
    if (performances.empty()) throw PreconditionError("athlete history " + athlete_id + " is empty");
    for (std::size_t i = 0; i < performances.size(); ++i) {
      const auto& p = performances[i];
      if (p.athlete_id != athlete_id || p.event_code != event_code)
        throw PreconditionError("history " + athlete_id + " mixes athletes or events");
      if (i > 0 && p.date < performances[i - 1].date)
        throw PreconditionError("history " + athlete_id + " is not date ordered");
    }
  }
};

/// Groups records into per-athlete histories (athlete_id order; each history
/// sorted by date, then time). Records must share one event code.
inline std::vector<AthleteHistory> group_histories(std::vector<PerformanceRecord> records) {
  std::stable_sort(records.begin(), records.end(), [](const PerformanceRecord& a, const PerformanceRecord& b) {
    if (a.athlete_id != b.athlete_id) return a.athlete_id < b.athlete_id;
    if (a.date != b.date) return a.date < b.date;
    return a.centiseconds < b.centiseconds;
  });
  std::vector<AthleteHistory> out;
  for (auto& r : records) {
    if (out.empty() || out.back().athlete_id != r.athlete_id) {
      out.emplace_back();
      out.back().athlete_id = r.athlete_id;
      out.back().event_code = r.event_code;
    }
    out.back().performances.push_back(std::move(r));
  }
  return out;
}

/// Every tunable threshold shared by the detectors. Defaults: k = 3.0, robust
/// cut 3.5 with 0.6745 scaling, Tukey 1.5, EP < -2.5, 100-tree forest at 10%
/// contamination, 100 x depth-3 boosted trees at rate 0.1 with a 95th
/// percentile residual cut, 4 x 500 MCMC draws after 200 warmup, p < 0.05,
/// bottom 5% copula density, seed 42.
struct DetectorConfig {
  double z_threshold = 3.0;
  double mad_threshold = 3.5;
  double mad_scale = 0.6745;
  double iqr_multiplier = 1.5;
  double excess_threshold = -2.5;
  int min_history = 3;
  int iforest_trees = 100;
  double iforest_contamination = 0.1;
  int gbt_trees = 100;
  int gbt_depth = 3;
  double gbt_learning_rate = 0.1;
  double gbt_residual_quantile = 0.95;
  int mcmc_draws = 500;
  int mcmc_warmup = 200;
  int mcmc_chains = 4;
  double bayes_p_threshold = 0.05;
  bool bayes_one_sided = false;
  double copula_density_quantile = 0.05;
  std::uint64_t seed = 42;

  void validate() const {
    const auto finite = [](double v, const char* name) {
      if (!std::isfinite(v)) throw InvalidConfig(std::string(name) + " must be finite");
    };
    const auto unit = [](double v, const char* name) {
      if (!(v > 0.0 && v < 1.0)) throw InvalidConfig(std::string(name) + " must lie in (0,1)");
    };
    const auto positive = [](long v, const char* name) {
      if (v <= 0) throw InvalidConfig(std::string(name) + " must be positive");
    };
    finite(z_threshold, "z_threshold");
    finite(mad_threshold, "mad_threshold");
    finite(mad_scale, "mad_scale");
    finite(iqr_multiplier, "iqr_multiplier");
    finite(excess_threshold, "excess_threshold");
    finite(gbt_learning_rate, "gbt_learning_rate");
    if (!(z_threshold >= 0)) throw InvalidConfig("z_threshold must be non-negative");
    if (!(mad_threshold >= 0)) throw InvalidConfig("mad_threshold must be non-negative");
    if (!(excess_threshold <= 0)) throw InvalidConfig("excess_threshold must be zero or negative (flags fast races)");
    if (!(mad_scale > 0)) throw InvalidConfig("mad_scale must be positive");
    if (!(iqr_multiplier >= 0)) throw InvalidConfig("iqr_multiplier must be non-negative");
    if (!(gbt_learning_rate > 0 && gbt_learning_rate <= 1)) throw InvalidConfig("gbt_learning_rate must lie in (0,1]");
    unit(iforest_contamination, "iforest_contamination");
    unit(gbt_residual_quantile, "gbt_residual_quantile");
    unit(bayes_p_threshold, "bayes_p_threshold");
    unit(copula_density_quantile, "copula_density_quantile");
    positive(min_history, "min_history");
    positive(iforest_trees, "iforest_trees");
    positive(gbt_trees, "gbt_trees");
    positive(gbt_depth, "gbt_depth");
    positive(mcmc_draws, "mcmc_draws");
    positive(mcmc_warmup, "mcmc_warmup");
    positive(mcmc_chains, "mcmc_chains");
  }

  friend bool operator==(const DetectorConfig&, const DetectorConfig&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DetectorConfig, z_threshold, mad_threshold, mad_scale,
                                                iqr_multiplier, excess_threshold, min_history,
                                                iforest_trees, iforest_contamination, gbt_trees,
                                                gbt_depth, gbt_learning_rate, gbt_residual_quantile,
                                                mcmc_draws, mcmc_warmup, mcmc_chains,
                                                bayes_p_threshold, bayes_one_sided,
                                                copula_density_quantile, seed)

/// Bumped whenever a detector's numerical behaviour changes, so cached
/// results keyed by config version are not reused across versions.
inline constexpr std::string_view kDetectorVersion = "perfscreen-detectors/1";

/// Applies whitelisted overrides (DetectorConfig field names only).
inline DetectorConfig apply_overrides(DetectorConfig base, const nlohmann::json& overrides) {
  if (overrides.is_null()) return base;
  if (!overrides.is_object()) throw InvalidConfig("config overrides must be a JSON object");
  nlohmann::json merged = base;
  for (const auto& [key, value] : overrides.items()) {
    if (!merged.contains(key)) throw InvalidConfig("unknown config field '" + key + "'");
    if (merged[key].is_number() != value.is_number() || merged[key].is_boolean() != value.is_boolean())
      throw InvalidConfig("config field '" + key + "' has the wrong type");
    merged[key] = value;
  }
  DetectorConfig out;
  try {
    out = merged.get<DetectorConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw InvalidConfig(e.what());
  }
  out.validate();
  return out;
}

/// Stable hash of (config, detector version): the config part of cache keys.
inline std::string config_version(const DetectorConfig& cfg) {
  const nlohmann::json j = cfg;
  return hex64(fnv1a64(j.dump(), fnv1a64(kDetectorVersion)));
}

enum class EntryStatus : std::uint8_t { scored, insufficient_history, missing_features, skipped };

inline std::string_view to_string(EntryStatus s) {
  switch (s) {
    case EntryStatus::scored: return "scored";
    case EntryStatus::insufficient_history: return "insufficient_history";
    case EntryStatus::missing_features: return "missing_features";
    case EntryStatus::skipped: break;
  }
  return "skipped";
}

inline EntryStatus entry_status_from(std::string_view s) {
  if (s == "scored") return EntryStatus::scored;
  if (s == "insufficient_history") return EntryStatus::insufficient_history;
  if (s == "missing_features") return EntryStatus::missing_features;
  return EntryStatus::skipped;
}

struct PerformanceRef {
  std::string athlete_id;
  std::uint32_t index = 0;  // position within the athlete's history
  std::string competition_id;
  Date date;
  std::int32_t centiseconds = 0;

  friend bool operator==(const PerformanceRef&, const PerformanceRef&) = default;
};

/// `score` is on the method's own scale (see DetectionResult::score_scale);
/// `severity` is a monotone transform where larger always means more anomalous,
/// used for ranking within one method only.
struct DetectionEntry {
  PerformanceRef ref;
  EntryStatus status = EntryStatus::scored;
  bool flagged = false;
  double score = 0.0;
  double severity = 0.0;
  std::string explanation;

  friend bool operator==(const DetectionEntry&, const DetectionEntry&) = default;
};

struct DetectionResult {
  std::string method_id;
  std::string score_scale;
  std::vector<DetectionEntry> entries;
  std::set<std::string> athletes_flagged;
  std::vector<std::string> warnings;
  std::map<std::string, double> diagnostics;
  double wall_time_ms = 0.0;

  /// Rebuilds athletes_flagged from the entries.
  void finalize() {
    athletes_flagged.clear();
    for (const auto& e : entries)
      if (e.flagged) athletes_flagged.insert(e.ref.athlete_id);
  }

  [[nodiscard]] std::size_t flagged_performances() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.flagged ? 1 : 0;
    return n;
  }
};

inline nlohmann::json to_json(const DetectionResult& r, bool include_timing = true) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : r.entries) {
    entries.push_back({{"athlete_id", e.ref.athlete_id},
                       {"index", e.ref.index},
                       {"competition_id", e.ref.competition_id},
                       {"date", e.ref.date.iso()},
                       {"centiseconds", e.ref.centiseconds},
                       {"status", to_string(e.status)},
                       {"flagged", e.flagged},
                       {"score", e.score},
                       {"severity", e.severity},
                       {"explanation", e.explanation}});
  }
  nlohmann::json j = {{"method_id", r.method_id},
                      {"score_scale", r.score_scale},
                      {"entries", std::move(entries)},
                      {"athletes_flagged", r.athletes_flagged},
                      {"warnings", r.warnings},
                      {"diagnostics", r.diagnostics}};
  if (include_timing) j["wall_time_ms"] = r.wall_time_ms;
  return j;
}

inline DetectionResult detection_from_json(const nlohmann::json& j) {
  DetectionResult r;
  r.method_id = j.at("method_id").get<std::string>();
  r.score_scale = j.value("score_scale", "");
  r.warnings = j.value("warnings", std::vector<std::string>{});
  r.diagnostics = j.value("diagnostics", std::map<std::string, double>{});
  r.wall_time_ms = j.value("wall_time_ms", 0.0);
  const auto& entries = j.at("entries");
  r.entries.reserve(entries.size());
  for (const auto& e : entries) {
    DetectionEntry d;
    d.ref.athlete_id = e.at("athlete_id").get<std::string>();
    d.ref.index = e.at("index").get<std::uint32_t>();
    d.ref.competition_id = e.at("competition_id").get<std::string>();
    d.ref.date = Date::parse(e.at("date").get<std::string>()).value_or(Date{});
    d.ref.centiseconds = e.at("centiseconds").get<std::int32_t>();
    d.status = entry_status_from(e.at("status").get<std::string>());
    d.flagged = e.at("flagged").get<bool>();
    d.score = e.at("score").get<double>();
    d.severity = e.at("severity").get<double>();
    d.explanation = e.at("explanation").get<std::string>();
    r.entries.push_back(std::move(d));
  }
  r.finalize();
  return r;
}

/// Entry skeleton for one performance of a history.
inline DetectionEntry make_entry(const AthleteHistory& h, std::size_t index) {
  const auto& p = h.performances[index];
  DetectionEntry e;
  e.ref = PerformanceRef{h.athlete_id, static_cast<std::uint32_t>(index), p.competition_id, p.date,
                         p.centiseconds};
  return e;
}

inline std::string fmt(const char* pattern, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof buf, pattern, args...);
  return buf;
}

}  // namespace perfscreen
