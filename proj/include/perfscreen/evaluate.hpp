#pragma once

#include "perfscreen/core/errors.hpp"
#include "perfscreen/core/hash.hpp"
#include "perfscreen/detect/types.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace perfscreen::eval {

struct Metrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// P = TP / (TP + FP), R = TP / sanctioned, F1 = 2PR / (P + R); every 0/0 is 0.
inline Metrics metrics_from_counts(std::size_t tp, std::size_t fp, std::size_t sanctioned) {
  Metrics m;
  if (tp + fp > 0) m.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  if (sanctioned > 0) m.recall = static_cast<double>(tp) / static_cast<double>(sanctioned);
  if (m.precision + m.recall > 0.0) m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
  return m;
}

/// Sanction lookup. By default any sanction makes the athlete a positive;
/// in date-window mode a flag only counts when one of the athlete's flagged
/// performances falls within [start - lookback, end].
class SanctionIndex {
 public:
  SanctionIndex() = default;
  explicit SanctionIndex(std::span<const SanctionRecord> records) {
    for (const auto& s : records) by_athlete_[s.athlete_id].push_back(s);
  }

  [[nodiscard]] bool is_sanctioned(const std::string& athlete_id) const { return by_athlete_.contains(athlete_id); }

  [[nodiscard]] bool covers(const std::string& athlete_id, Date performance, int lookback_years) const {
    const auto it = by_athlete_.find(athlete_id);
    if (it == by_athlete_.end()) return false;
    for (const auto& s : it->second) {
      const Date from = s.sanction_start.plus_days(-static_cast<std::int32_t>(std::lround(lookback_years * 365.2425)));
      if (performance >= from && (!s.sanction_end || performance <= *s.sanction_end)) return true;
    }
    return false;
  }

  [[nodiscard]] std::size_t size() const { return by_athlete_.size(); }

 private:
  std::map<std::string, std::vector<SanctionRecord>> by_athlete_;
};

struct EvaluationOptions {
  std::vector<std::size_t> ks{200};
  bool date_window = false;
  int lookback_years = 8;
};

/// Flagged athletes of one result ranked by their worst (most anomalous)
/// flagged performance, ties by athlete_id.
struct RankedAthlete {
  std::string athlete_id;
  double severity = 0.0;
  double score = 0.0;  // method score of that performance
  std::size_t flagged_performances = 0;
};

inline std::vector<RankedAthlete> rank_flagged_athletes(const DetectionResult& r) {
  std::map<std::string, RankedAthlete> best;
  for (const auto& e : r.entries) {
    if (!e.flagged) continue;
    auto [it, inserted] = best.try_emplace(e.ref.athlete_id, RankedAthlete{e.ref.athlete_id, e.severity, e.score, 0});
    auto& a = it->second;
    if (!inserted && e.severity > a.severity) {
      a.severity = e.severity;
      a.score = e.score;
    }
    ++a.flagged_performances;
  }
  std::vector<RankedAthlete> out;
  out.reserve(best.size());
  for (auto& [_, a] : best) out.push_back(std::move(a));
  std::stable_sort(out.begin(), out.end(),
                   [](const RankedAthlete& a, const RankedAthlete& b) { return a.severity > b.severity; });
  return out;
}

/// Fraction of the top-k ranked flagged athletes that are sanctioned. With
/// fewer than k flagged athletes the denominator stays k.
inline double precision_at_k(const DetectionResult& r, const SanctionIndex& sanctions, std::size_t k) {
  if (k == 0) throw PreconditionError("k must be at least 1");
  const auto ranked = rank_flagged_athletes(r);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < std::min(k, ranked.size()); ++i) hits += sanctions.is_sanctioned(ranked[i].athlete_id);
  return static_cast<double>(hits) / static_cast<double>(k);
}

struct MethodMetrics {
  std::string method_id;
  std::size_t true_positives = 0;
  std::size_t false_positives = 0;
  std::size_t flagged_athletes = 0;
  std::size_t flagged_performances = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::map<std::size_t, double> precision_at_k;
  double wall_time_ms = 0.0;
};

struct EvaluationReport {
  std::string slice;
  std::size_t athlete_count = 0;
  std::size_t sanctioned_count = 0;
  std::vector<MethodMetrics> methods;
  std::size_t consensus_count = 0;  // athletes flagged by >= 2 methods
  std::size_t consensus_true_positives = 0;
  double consensus_precision = 0.0;
  double reduction_ratio = 0.0;  // 1 - consensus_count / athlete_count
};

/// Athlete-level benchmark: TP = sanctioned athletes flagged in at least one
/// performance. The sanctioned count covers sanctioned athletes present in
/// the evaluated results.
inline EvaluationReport evaluate_methods(std::span<const DetectionResult> results,
                                         std::span<const SanctionRecord> sanctions, const std::string& slice,
                                         const EvaluationOptions& opt = {}) {
  const SanctionIndex index(sanctions);
  EvaluationReport rep;
  rep.slice = slice;

  std::set<std::string> athletes;
  for (const auto& r : results)
    for (const auto& e : r.entries) athletes.insert(e.ref.athlete_id);
  rep.athlete_count = athletes.size();
  for (const auto& a : athletes) rep.sanctioned_count += index.is_sanctioned(a);

  std::map<std::string, std::size_t> method_count;
  for (const auto& r : results) {
    MethodMetrics m;
    m.method_id = r.method_id;
    m.wall_time_ms = r.wall_time_ms;
    m.flagged_performances = r.flagged_performances();
    std::set<std::string> window_hits;
    if (opt.date_window)
      for (const auto& e : r.entries)
        if (e.flagged && index.covers(e.ref.athlete_id, e.ref.date, opt.lookback_years))
          window_hits.insert(e.ref.athlete_id);
    for (const auto& a : r.athletes_flagged) {
      const bool positive = opt.date_window ? window_hits.contains(a) : index.is_sanctioned(a);
      ++(positive ? m.true_positives : m.false_positives);
      ++method_count[a];
    }
    m.flagged_athletes = r.athletes_flagged.size();
    const auto metrics = metrics_from_counts(m.true_positives, m.false_positives, rep.sanctioned_count);
    m.precision = metrics.precision;
    m.recall = metrics.recall;
    m.f1 = metrics.f1;
    for (const auto k : opt.ks) m.precision_at_k[k] = precision_at_k(r, index, k);
    rep.methods.push_back(std::move(m));
  }
  for (const auto& [a, c] : method_count)
    if (c >= 2) {
      ++rep.consensus_count;
      rep.consensus_true_positives += index.is_sanctioned(a);
    }
  rep.consensus_precision = metrics_from_counts(rep.consensus_true_positives,
                                                rep.consensus_count - rep.consensus_true_positives, 0)
                                .precision;
  if (rep.athlete_count > 0)
    rep.reduction_ratio = 1.0 - static_cast<double>(rep.consensus_count) / static_cast<double>(rep.athlete_count);
  return rep;
}

inline nlohmann::json to_json(const EvaluationReport& r) {
  nlohmann::json methods = nlohmann::json::array();
  for (const auto& m : r.methods) {
    nlohmann::json pk = nlohmann::json::object();
    for (const auto& [k, v] : m.precision_at_k) pk[std::to_string(k)] = v;
    methods.push_back({{"method_id", m.method_id},
                       {"true_positives", m.true_positives},
                       {"false_positives", m.false_positives},
                       {"flagged_athletes", m.flagged_athletes},
                       {"flagged_performances", m.flagged_performances},
                       {"precision", m.precision},
                       {"recall", m.recall},
                       {"f1", m.f1},
                       {"precision_at_k", std::move(pk)}});
  }
  return {{"slice", r.slice},
          {"athlete_count", r.athlete_count},
          {"sanctioned_count", r.sanctioned_count},
          {"methods", std::move(methods)},
          {"consensus",
           {{"min_methods", 2},
            {"athletes", r.consensus_count},
            {"true_positives", r.consensus_true_positives},
            {"precision", r.consensus_precision},
            {"reduction_ratio", r.reduction_ratio}}}};
}

/// Fixed-width table with the columns P, R, F1, P@K, TP, FP.
inline std::string format_table(const EvaluationReport& r) {
  std::ostringstream out;
  char line[256];
  out << "slice " << r.slice << ": " << r.athlete_count << " athletes, " << r.sanctioned_count << " sanctioned\n";
  std::snprintf(line, sizeof line, "%-20s %6s %6s %6s", "method", "P", "R", "F1");
  out << line;
  std::vector<std::size_t> ks;
  if (!r.methods.empty())
    for (const auto& [k, _] : r.methods.front().precision_at_k) ks.push_back(k);
  for (const auto k : ks) {
    std::snprintf(line, sizeof line, " %7s", ("P@" + std::to_string(k)).c_str());
    out << line;
  }
  std::snprintf(line, sizeof line, " %6s %7s\n", "TP", "FP");
  out << line;
  for (const auto& m : r.methods) {
    std::snprintf(line, sizeof line, "%-20s %6.3f %6.3f %6.3f", m.method_id.c_str(), m.precision, m.recall, m.f1);
    out << line;
    for (const auto k : ks) {
      const auto it = m.precision_at_k.find(k);
      std::snprintf(line, sizeof line, " %7.3f", it == m.precision_at_k.end() ? 0.0 : it->second);
      out << line;
    }
    std::snprintf(line, sizeof line, " %6zu %7zu\n", m.true_positives, m.false_positives);
    out << line;
  }
  std::snprintf(line, sizeof line, "consensus (>=2 methods): %zu athletes, %zu sanctioned, precision %.3f, reduction %.1f%%\n",
                r.consensus_count, r.consensus_true_positives, r.consensus_precision, 100.0 * r.reduction_ratio);
  out << line;
  return out.str();
}

// ---------------------------------------------------------------------------
// Consensus

struct ScoreSummary {
  double score = 0.0;     // method score of the most anomalous flagged performance
  double severity = 0.0;
  std::size_t flagged_performances = 0;
  std::size_t rank = 0;   // 1-based among the method's flagged athletes
};

struct ConsensusEntry {
  std::string athlete_id;
  std::set<std::string> methods_flagging;
  std::size_t method_count = 0;
  bool is_sanctioned = false;
  std::map<std::string, ScoreSummary> top_scores;
  double best_normalized_rank = 1.0;  // min over methods of rank / flagged athletes
};

struct ConsensusOptions {
  std::size_t min_methods = 2;
  std::optional<bool> sanctioned;  // keep only sanctioned (true) / unsanctioned (false)
  std::set<std::string> methods;   // empty = every supplied result
};

/// Athletes flagged by at least min_methods methods, ordered by method count
/// (desc), best normalized rank (asc), athlete_id. Depends only on flag sets
/// and per-method rankings, never on the order of `results`.
inline std::vector<ConsensusEntry> consensus(std::span<const DetectionResult> results,
                                             std::span<const SanctionRecord> sanctions,
                                             const ConsensusOptions& opt = {}) {
  if (results.size() < 2) throw PreconditionError("consensus needs at least 2 method results");
  const SanctionIndex index(sanctions);
  std::vector<const DetectionResult*> ordered;
  for (const auto& r : results)
    if (opt.methods.empty() || opt.methods.contains(r.method_id)) ordered.push_back(&r);
  std::sort(ordered.begin(), ordered.end(),
            [](const DetectionResult* a, const DetectionResult* b) { return a->method_id < b->method_id; });

  std::map<std::string, ConsensusEntry> by_athlete;
  for (const auto* r : ordered) {
    const auto ranked = rank_flagged_athletes(*r);
    for (std::size_t i = 0; i < ranked.size(); ++i) {
      auto& e = by_athlete[ranked[i].athlete_id];
      e.athlete_id = ranked[i].athlete_id;
      e.methods_flagging.insert(r->method_id);
      e.top_scores[r->method_id] = {ranked[i].score, ranked[i].severity, ranked[i].flagged_performances, i + 1};
      e.best_normalized_rank = std::min(e.best_normalized_rank,
                                        static_cast<double>(i + 1) / static_cast<double>(ranked.size()));
    }
  }
  std::vector<ConsensusEntry> out;
  for (auto& [id, e] : by_athlete) {
    e.method_count = e.methods_flagging.size();
    e.is_sanctioned = index.is_sanctioned(id);
    if (e.method_count < std::max<std::size_t>(opt.min_methods, 1)) continue;
    if (opt.sanctioned && *opt.sanctioned != e.is_sanctioned) continue;
    out.push_back(std::move(e));
  }
  std::stable_sort(out.begin(), out.end(), [](const ConsensusEntry& a, const ConsensusEntry& b) {
    if (a.method_count != b.method_count) return a.method_count > b.method_count;
    return a.best_normalized_rank < b.best_normalized_rank;
  });
  return out;
}

inline nlohmann::json to_json(const ConsensusEntry& e) {
  nlohmann::json scores = nlohmann::json::object();
  for (const auto& [m, s] : e.top_scores)
    scores[m] = {{"score", s.score},
                 {"severity", s.severity},
                 {"flagged_performances", s.flagged_performances},
                 {"rank", s.rank}};
  return {{"athlete_id", e.athlete_id},
          {"methods_flagging", e.methods_flagging},
          {"method_count", e.method_count},
          {"is_sanctioned", e.is_sanctioned},
          {"best_normalized_rank", e.best_normalized_rank},
          {"top_scores", std::move(scores)}};
}

// ---------------------------------------------------------------------------
// Screening pages

inline constexpr std::size_t kPageSize = 100;

struct ScreeningRow {
  std::string athlete_id;
  double best_score = 0.0;
  double severity = 0.0;
  std::size_t flag_count = 0;
  std::size_t agreement = 0;  // methods (this one included) flagging the athlete
  std::vector<std::string> other_methods;
  std::vector<std::string> explanations;  // up to 3, most anomalous first
  bool is_sanctioned = false;
};

struct ScreeningPage {
  std::string slice;
  std::string method_id;
  std::size_t total_flagged = 0;
  std::size_t offset = 0;
  std::vector<ScreeningRow> rows;
  std::optional<std::string> next_cursor;
};

/// Identity of the flag set a cursor was issued against.
inline std::uint64_t page_fingerprint(const std::string& slice, const DetectionResult& r) {
  std::uint64_t h = fnv1a64(slice);
  h = fnv1a64(r.method_id, h ^ 0x1f);
  for (const auto& a : r.athletes_flagged) h = fnv1a64(a, h ^ 0x2e);
  return h;
}

inline std::string encode_cursor(std::size_t offset, std::uint64_t fingerprint) {
  return hex64(static_cast<std::uint64_t>(offset) ^ mix64(fingerprint)) + hex64(fingerprint ^ 0x5a5a5a5a5a5a5a5aULL);
}

/// Returns the offset, or throws StaleCursor when the cursor is malformed or
/// was issued for a different flag set.
inline std::size_t decode_cursor(const std::string& cursor, std::uint64_t fingerprint) {
  if (cursor.size() != 32) throw StaleCursor("malformed cursor");
  std::uint64_t a = 0, b = 0;
  try {
    std::size_t used = 0;
    a = std::stoull(cursor.substr(0, 16), &used, 16);
    if (used != 16) throw StaleCursor("malformed cursor");
    b = std::stoull(cursor.substr(16), &used, 16);
    if (used != 16) throw StaleCursor("malformed cursor");
  } catch (const std::logic_error&) {
    throw StaleCursor("malformed cursor");
  }
  if ((b ^ 0x5a5a5a5a5a5a5a5aULL) != fingerprint) throw StaleCursor("cursor refers to an older result; restart paging");
  const std::uint64_t offset = a ^ mix64(fingerprint);
  if (offset % kPageSize != 0 || offset > (std::uint64_t{1} << 40)) throw StaleCursor("malformed cursor");
  return static_cast<std::size_t>(offset);
}

/// One page (at most kPageSize athletes) of a method's flagged athletes,
/// ordered by severity (desc) then athlete_id. `materialized` holds every
/// result available for the slice (used for agreement badges) and must
/// contain `method_id`.
inline ScreeningPage build_screening_page(const std::string& slice, const std::string& method_id,
                                          std::span<const DetectionResult> materialized,
                                          const std::optional<std::string>& cursor,
                                          std::span<const SanctionRecord> sanctions = {}) {
  const DetectionResult* target = nullptr;
  for (const auto& r : materialized)
    if (r.method_id == method_id) target = &r;
  if (!target) throw NotMaterialized("no materialized " + method_id + " result for slice " + slice);

  const auto fp = page_fingerprint(slice, *target);
  const std::size_t offset = cursor && !cursor->empty() ? decode_cursor(*cursor, fp) : 0;
  const auto ranked = rank_flagged_athletes(*target);
  if (offset > ranked.size() || (offset == ranked.size() && offset > 0)) throw StaleCursor("cursor past end");

  const SanctionIndex index(sanctions);
  ScreeningPage page;
  page.slice = slice;
  page.method_id = method_id;
  page.total_flagged = ranked.size();
  page.offset = offset;
  const std::size_t end = std::min(ranked.size(), offset + kPageSize);

  std::map<std::string, std::size_t> want;
  for (std::size_t i = offset; i < end; ++i) want[ranked[i].athlete_id] = i - offset;
  page.rows.resize(end - offset);
  std::vector<std::vector<std::pair<double, std::string>>> snippets(page.rows.size());
  for (std::size_t i = offset; i < end; ++i) {
    auto& row = page.rows[i - offset];
    row.athlete_id = ranked[i].athlete_id;
    row.best_score = ranked[i].score;
    row.severity = ranked[i].severity;
    row.flag_count = ranked[i].flagged_performances;
    row.is_sanctioned = index.is_sanctioned(row.athlete_id);
    row.agreement = 1;
  }
  std::vector<const DetectionResult*> others;
  for (const auto& r : materialized)
    if (r.method_id != method_id) others.push_back(&r);
  std::sort(others.begin(), others.end(),
            [](const DetectionResult* a, const DetectionResult* b) { return a->method_id < b->method_id; });
  for (const auto* r : others)
    for (auto& row : page.rows)
      if (r->athletes_flagged.contains(row.athlete_id)) {
        ++row.agreement;
        row.other_methods.push_back(r->method_id);
      }
  for (const auto& e : target->entries) {
    if (!e.flagged) continue;
    const auto it = want.find(e.ref.athlete_id);
    if (it != want.end()) snippets[it->second].emplace_back(e.severity, e.explanation);
  }
  for (std::size_t i = 0; i < page.rows.size(); ++i) {
    auto& s = snippets[i];
    std::stable_sort(s.begin(), s.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t k = 0; k < std::min<std::size_t>(3, s.size()); ++k) page.rows[i].explanations.push_back(s[k].second);
  }
  if (end < ranked.size()) page.next_cursor = encode_cursor(end, fp);
  return page;
}

inline nlohmann::json to_json(const ScreeningPage& p) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : p.rows)
    rows.push_back({{"athlete_id", r.athlete_id},
                    {"best_score", r.best_score},
                    {"severity", r.severity},
                    {"flag_count", r.flag_count},
                    {"agreement", r.agreement},
                    {"other_methods", r.other_methods},
                    {"explanations", r.explanations},
                    {"is_sanctioned", r.is_sanctioned}});
  return {{"slice", p.slice},
          {"method_id", p.method_id},
          {"total_flagged", p.total_flagged},
          {"offset", p.offset},
          {"rows", std::move(rows)},
          {"next_cursor", p.next_cursor ? nlohmann::json(*p.next_cursor) : nlohmann::json(nullptr)}};
}

}  // namespace perfscreen::eval
