#pragma once

#include "perfscreen/core/lru.hpp"
#include "perfscreen/core/slice.hpp"
#include "perfscreen/detect/registry.hpp"
#include "perfscreen/detect/statistical.hpp"
#include "perfscreen/evaluate.hpp"
#include "perfscreen/ingest.hpp"
#include "perfscreen/store.hpp"
#include "perfscreen/synth/generator.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <set>
#include <stop_token>
#include <string>
#include <vector>

namespace perfscreen::service {

// ---------------------------------------------------------------------------
// Case review

struct MethodMark {
  std::string method_id;
  EntryStatus status = EntryStatus::scored;
  bool flagged = false;
  double score = 0.0;
  double severity = 0.0;
};

struct TrajectoryPoint {
  std::uint32_t index = 0;
  Date date;
  std::int32_t centiseconds = 0;
  std::string competition_id;
  std::optional<double> wind_mps;
  std::optional<double> reaction_time_s;
  Round round = Round::unknown;
  int competition_level = 0;
  std::vector<MethodMark> marks;  // one per materialized method, method_id order
};

struct FlagNote {
  std::string method_id;
  std::uint32_t index = 0;
  Date date;
  std::int32_t centiseconds = 0;
  std::string competition_id;
  double score = 0.0;
  std::string explanation;
};

/// Box-plot numbers in seconds; quartiles are Tukey hinges, the same ones the
/// IQR detector fences on.
struct FiveNumber {
  double min = 0.0;
  double q1 = 0.0;
  double median = 0.0;
  double q3 = 0.0;
  double max = 0.0;
};

/// Equal-width bins over whole centiseconds; edges in seconds, bin i covers
/// [edges[i], edges[i+1]).
struct Histogram {
  std::vector<double> edges;
  std::vector<std::size_t> counts;
};

struct CompetitionRef {
  std::string competition_id;
  std::string name;
  Date date;
  int level = 0;
};

struct CaseReviewView {
  std::string athlete_id;
  std::string name;
  std::string country;
  std::string slice;
  bool is_sanctioned = false;
  std::vector<std::string> methods;
  std::vector<TrajectoryPoint> trajectory;
  std::vector<FlagNote> flags;
  Histogram histogram;
  FiveNumber summary;
  std::vector<CompetitionRef> competitions;
};

inline FiveNumber five_number(std::span<const std::int32_t> cs) {
  if (cs.empty()) return {};
  std::vector<double> s;
  s.reserve(cs.size());
  for (const auto v : cs) s.push_back(v / 100.0);
  const auto b = stat::baseline(s);
  const auto [lo, hi] = std::minmax_element(s.begin(), s.end());
  return {*lo, b.q1, b.median, b.q3, *hi};
}

/// Sturges bin count, widths rounded up to whole centiseconds.
inline Histogram histogram(std::span<const std::int32_t> cs) {
  Histogram h;
  if (cs.empty()) return h;
  const auto [lo_it, hi_it] = std::minmax_element(cs.begin(), cs.end());
  const std::int32_t lo = *lo_it, hi = *hi_it;
  const auto bins = static_cast<std::int32_t>(std::ceil(std::log2(static_cast<double>(cs.size())))) + 1;
  const std::int32_t width = std::max<std::int32_t>(1, (hi - lo + bins) / bins);  // ceil((hi-lo+1)/bins)
  const std::int32_t used = (hi - lo) / width + 1;
  h.counts.assign(static_cast<std::size_t>(used), 0);
  for (std::int32_t i = 0; i <= used; ++i) h.edges.push_back((lo + i * width) / 100.0);
  for (const auto v : cs) ++h.counts[static_cast<std::size_t>((v - lo) / width)];
  return h;
}

inline nlohmann::json to_json(const CaseReviewView& v) {
  nlohmann::json traj = nlohmann::json::array();
  for (const auto& p : v.trajectory) {
    nlohmann::json marks = nlohmann::json::object();
    for (const auto& m : p.marks)
      marks[m.method_id] = {{"status", to_string(m.status)},
                            {"flagged", m.flagged},
                            {"score", m.score},
                            {"severity", m.severity}};
    traj.push_back({{"index", p.index},
                    {"date", p.date.iso()},
                    {"centiseconds", p.centiseconds},
                    {"seconds", p.centiseconds / 100.0},
                    {"competition_id", p.competition_id},
                    {"wind_mps", p.wind_mps ? nlohmann::json(*p.wind_mps) : nlohmann::json(nullptr)},
                    {"reaction_time_s",
                     p.reaction_time_s ? nlohmann::json(*p.reaction_time_s) : nlohmann::json(nullptr)},
                    {"round", to_string(p.round)},
                    {"competition_level", p.competition_level},
                    {"methods", std::move(marks)}});
  }
  nlohmann::json flags = nlohmann::json::array();
  for (const auto& f : v.flags)
    flags.push_back({{"method_id", f.method_id},
                     {"index", f.index},
                     {"date", f.date.iso()},
                     {"seconds", f.centiseconds / 100.0},
                     {"competition_id", f.competition_id},
                     {"score", f.score},
                     {"explanation", f.explanation}});
  nlohmann::json comps = nlohmann::json::array();
  for (const auto& c : v.competitions)
    comps.push_back({{"competition_id", c.competition_id}, {"name", c.name}, {"date", c.date.iso()}, {"level", c.level}});
  return {{"athlete_id", v.athlete_id},
          {"name", v.name},
          {"country", v.country},
          {"slice", v.slice},
          {"is_sanctioned", v.is_sanctioned},
          {"methods", v.methods},
          {"trajectory", std::move(traj)},
          {"flags", std::move(flags)},
          {"distribution",
           {{"histogram", {{"edges", v.histogram.edges}, {"counts", v.histogram.counts}}},
            {"five_number",
             {{"min", v.summary.min},
              {"q1", v.summary.q1},
              {"median", v.summary.median},
              {"q3", v.summary.q3},
              {"max", v.summary.max}}}}},
          {"competitions", std::move(comps)}};
}

// ---------------------------------------------------------------------------
// Ingest

struct FileIngest {
  std::string path;
  std::string kind;
  IngestStats stats;
  std::size_t inserted = 0;
};

inline nlohmann::json to_json(const std::vector<FileIngest>& files) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& f : files)
    out.push_back({{"path", f.path},
                   {"kind", f.kind},
                   {"input_rows", f.stats.input_rows},
                   {"accepted", f.stats.accepted},
                   {"skipped", f.stats.skipped},
                   {"skip_reasons", f.stats.skip_reasons},
                   {"warnings", f.stats.warnings},
                   {"inserted", f.inserted}});
  return out;
}

// ---------------------------------------------------------------------------

/// Glue between the store and the detectors: every operation the HTTP API and
/// the CLI expose, with no transport concerns.
class Engine {
 public:
  explicit Engine(Store& store, DetectorConfig base = {}) : store_(store), base_(base), histories_(4) {
    base_.validate();
  }

  [[nodiscard]] Store& store() { return store_; }
  [[nodiscard]] const DetectorConfig& base_config() const { return base_; }
  [[nodiscard]] std::string base_config_hash() const { return config_version(base_); }

  // --- ingest --------------------------------------------------------------

  /// Loads files of any supported kind. Competition metadata goes first so
  /// result rows link to it; sanctions go last.
  std::vector<FileIngest> ingest_files(const std::vector<std::filesystem::path>& paths, Date today = Date::today()) {
    std::vector<std::pair<FileKind, std::filesystem::path>> files;
    for (const auto& p : paths) {
      std::ifstream in(p, std::ios::binary);
      if (!in) throw NotFound("cannot open " + p.string());
      const auto kind = detect_file_kind(in);
      if (kind == FileKind::unknown) throw MissingColumns(p.string() + ": header matches no known file kind");
      files.emplace_back(kind, p);
    }
    const auto rank = [](FileKind k) { return k == FileKind::competitions ? 0 : k == FileKind::results ? 1 : 2; };
    std::stable_sort(files.begin(), files.end(), [&](const auto& a, const auto& b) { return rank(a.first) < rank(b.first); });

    std::vector<FileIngest> out;
    for (const auto& [kind, p] : files) {
      std::ifstream in(p, std::ios::binary);
      FileIngest f;
      f.path = p.string();
      if (kind == FileKind::competitions) {
        const auto b = load_competitions(in);
        f.kind = "competitions";
        f.stats = b.stats;
        f.inserted = store_.upsert_competitions(b.records);
      } else if (kind == FileKind::results) {
        const auto b = load_results(in, today);
        f.kind = "results";
        f.stats = b.stats;
        f.inserted = ingest_results(b);
      } else {
        const auto b = load_sanctions(in);
        f.kind = "sanctions";
        f.stats = b.stats;
        f.inserted = store_.upsert_sanctions(b.records);
      }
      out.push_back(std::move(f));
    }
    return out;
  }

  std::size_t ingest_results(const ResultsBatch& b) {
    store_.upsert_athletes(b.athletes());
    store_.insert_missing_competitions(b.competitions());
    const auto records = b.records();
    return store_.upsert_performances(records);
  }

  /// Generated data straight into the store (no CSV round trip).
  std::size_t ingest_generated(const synth::GeneratedData& d) {
    store_.upsert_competitions(d.competitions);
    ResultsBatch b;
    b.rows = d.rows;
    const auto n = ingest_results(b);
    store_.upsert_sanctions(d.sanctions);
    return n;
  }

  // --- slices and detection ------------------------------------------------

  /// Parses a slice and checks its event is present in the store.
  [[nodiscard]] EventSlice resolve_slice(std::string_view text) const {
    auto s = EventSlice::parse(text);
    if (!store_.has_event(s.event_code)) throw NotFound("unknown slice: no performances for event " + s.event_code);
    return s;
  }

  [[nodiscard]] std::shared_ptr<const std::vector<AthleteHistory>> histories(const EventSlice& slice) const {
    const auto key = slice.key() + "@" + std::to_string(store_.generation());
    if (auto hit = histories_.get(key)) return *hit;
    auto h = std::make_shared<const std::vector<AthleteHistory>>(store_.query_slice(slice));
    histories_.put(key, h);
    return h;
  }

  [[nodiscard]] DetectorConfig config_with(const nlohmann::json& overrides) const {
    return apply_overrides(base_, overrides);
  }

  /// Runs one method and materializes the result, unless the stop token
  /// fired (then nothing is written).
  DetectionResult detect(const EventSlice& slice, const std::string& method_id, const DetectorConfig& cfg,
                         std::stop_token stop = {}) {
    require_method(method_id);
    const auto h = histories(slice);
    auto r = run_detector(method_id, *h, cfg, stop);
    if (stop.stop_requested()) throw Cancelled("detection of " + method_id + " was cancelled");
    store_.save_detection(slice.key(), config_version(cfg), r);
    return r;
  }

  [[nodiscard]] std::vector<std::shared_ptr<const DetectionResult>> materialized(const EventSlice& slice,
                                                                                 const std::string& cfg_hash) const {
    return store_.materialized(slice.key(), cfg_hash);
  }

  // --- views ---------------------------------------------------------------

  [[nodiscard]] std::shared_ptr<const std::string> screen(const EventSlice& slice, const std::string& method_id,
                                                          const std::string& cfg_hash,
                                                          const std::optional<std::string>& cursor) const {
    require_method(method_id);
    return store_.cached_screen(slice.key(), method_id, cfg_hash, cursor);
  }

  [[nodiscard]] eval::EvaluationReport evaluate(const EventSlice& slice, const std::string& cfg_hash,
                                                const eval::EvaluationOptions& opt = {}) const {
    const auto results = copies(slice, cfg_hash, 1);
    const auto sanctions = store_.sanctions();
    return eval::evaluate_methods(results, sanctions, slice.key(), opt);
  }

  [[nodiscard]] std::vector<eval::ConsensusEntry> consensus(const EventSlice& slice, const std::string& cfg_hash,
                                                            const eval::ConsensusOptions& opt) const {
    const auto results = copies(slice, cfg_hash, 2);
    const auto sanctions = store_.sanctions();
    return eval::consensus(results, sanctions, opt);
  }

  [[nodiscard]] CaseReviewView case_review(const EventSlice& slice, const std::string& athlete_id,
                                           const std::string& cfg_hash) const {
    const auto results = materialized(slice, cfg_hash);
    if (results.empty())
      throw NotMaterialized("no detection results for slice " + slice.key() + "; POST /api/detect first");
    const auto h = histories(slice);
    const auto it = std::lower_bound(h->begin(), h->end(), athlete_id,
                                     [](const AthleteHistory& a, const std::string& id) { return a.athlete_id < id; });
    if (it == h->end() || it->athlete_id != athlete_id)
      throw NotFound("athlete " + athlete_id + " has no performances in slice " + slice.key());

    CaseReviewView v;
    v.athlete_id = athlete_id;
    v.slice = slice.key();
    if (const auto a = store_.athlete(athlete_id)) {
      v.name = a->name;
      v.country = a->country;
    }
    const auto sanctions = store_.sanctions();
    v.is_sanctioned = eval::SanctionIndex(sanctions).is_sanctioned(athlete_id);

    std::vector<std::int32_t> cs;
    std::set<std::string> comp_ids;
    for (std::size_t i = 0; i < it->performances.size(); ++i) {
      const auto& p = it->performances[i];
      TrajectoryPoint t;
      t.index = static_cast<std::uint32_t>(i);
      t.date = p.date;
      t.centiseconds = p.centiseconds;
      t.competition_id = p.competition_id;
      t.wind_mps = p.wind_mps;
      t.reaction_time_s = p.reaction_time_s;
      t.round = p.round;
      t.competition_level = p.competition_level;
      v.trajectory.push_back(std::move(t));
      cs.push_back(p.centiseconds);
      comp_ids.insert(p.competition_id);
    }
    for (const auto& r : results) {
      v.methods.push_back(r->method_id);
      // Entries are grouped by athlete in athlete_id order.
      auto e = std::lower_bound(r->entries.begin(), r->entries.end(), athlete_id,
                                [](const DetectionEntry& x, const std::string& id) { return x.ref.athlete_id < id; });
      for (; e != r->entries.end() && e->ref.athlete_id == athlete_id; ++e) {
        if (e->ref.index >= v.trajectory.size()) continue;
        auto& point = v.trajectory[e->ref.index];
        if (point.date != e->ref.date || point.centiseconds != e->ref.centiseconds) continue;
        point.marks.push_back({r->method_id, e->status, e->flagged, e->score, e->severity});
        if (e->flagged)
          v.flags.push_back({r->method_id, e->ref.index, e->ref.date, e->ref.centiseconds, e->ref.competition_id,
                             e->score, e->explanation});
      }
    }
    std::stable_sort(v.flags.begin(), v.flags.end(), [](const FlagNote& a, const FlagNote& b) {
      return a.index != b.index ? a.index < b.index : a.method_id < b.method_id;
    });
    v.summary = five_number(cs);
    v.histogram = histogram(cs);
    for (const auto& id : comp_ids) {
      if (const auto c = store_.competition(id)) {
        v.competitions.push_back({c->competition_id, c->name, c->date, c->level});
      } else {
        v.competitions.push_back({id, id, Date{}, 0});
      }
    }
    return v;
  }

 private:
  [[nodiscard]] std::vector<DetectionResult> copies(const EventSlice& slice, const std::string& cfg_hash,
                                                    std::size_t at_least) const {
    const auto results = materialized(slice, cfg_hash);
    if (results.size() < at_least)
      throw NotMaterialized(std::to_string(results.size()) + " method result(s) materialized for slice " +
                            slice.key() + ", need " + std::to_string(at_least) + "; POST /api/detect first");
    std::vector<DetectionResult> out;
    out.reserve(results.size());
    for (const auto& r : results) out.push_back(*r);
    return out;
  }

  Store& store_;
  DetectorConfig base_;
  mutable LruCache<std::string, std::shared_ptr<const std::vector<AthleteHistory>>> histories_;
};

}  // namespace perfscreen::service
