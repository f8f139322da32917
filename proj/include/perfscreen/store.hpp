#pragma once

#include "perfscreen/core/errors.hpp"
#include "perfscreen/core/hash.hpp"
#include "perfscreen/core/lru.hpp"
#include "perfscreen/core/slice.hpp"
#include "perfscreen/detect/types.hpp"
#include "perfscreen/evaluate.hpp"
#include "perfscreen/ingest.hpp"

#include <sqlite3.h>
#include <json.hpp>

#include <atomic>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace perfscreen {

namespace sql {

/// Owning prepared statement with 1-based binds and 0-based columns.
class Stmt {
 public:
  Stmt(sqlite3* db, const char* text) : db_(db) {
    if (sqlite3_prepare_v2(db, text, -1, &stmt_, nullptr) != SQLITE_OK)
      throw StorageError(std::string("prepare failed: ") + sqlite3_errmsg(db) + " in: " + text);
  }
  Stmt(const Stmt&) = delete;
  Stmt& operator=(const Stmt&) = delete;
  ~Stmt() { sqlite3_finalize(stmt_); }

  Stmt& bind(int i, std::string_view v) {
    check(sqlite3_bind_text(stmt_, i, v.data(), static_cast<int>(v.size()), SQLITE_TRANSIENT));
    return *this;
  }
  Stmt& bind(int i, std::int64_t v) {
    check(sqlite3_bind_int64(stmt_, i, v));
    return *this;
  }
  Stmt& bind(int i, int v) { return bind(i, static_cast<std::int64_t>(v)); }
  Stmt& bind(int i, double v) {
    check(sqlite3_bind_double(stmt_, i, v));
    return *this;
  }
  Stmt& bind_null(int i) {
    check(sqlite3_bind_null(stmt_, i));
    return *this;
  }
  template <typename T>
  Stmt& bind(int i, const std::optional<T>& v) {
    return v ? bind(i, *v) : bind_null(i);
  }

  /// True while rows are available.
  bool step() {
    const int rc = sqlite3_step(stmt_);
    if (rc == SQLITE_ROW) return true;
    if (rc == SQLITE_DONE) return false;
    throw StorageError(std::string("step failed: ") + sqlite3_errmsg(db_));
  }
  void reset() {
    sqlite3_reset(stmt_);
    sqlite3_clear_bindings(stmt_);
  }

  [[nodiscard]] bool is_null(int c) const { return sqlite3_column_type(stmt_, c) == SQLITE_NULL; }
  [[nodiscard]] std::int64_t i64(int c) const { return sqlite3_column_int64(stmt_, c); }
  [[nodiscard]] double real(int c) const { return sqlite3_column_double(stmt_, c); }
  [[nodiscard]] std::string text(int c) const {
    const auto* p = reinterpret_cast<const char*>(sqlite3_column_text(stmt_, c));
    return p ? std::string(p, static_cast<std::size_t>(sqlite3_column_bytes(stmt_, c))) : std::string{};
  }
  [[nodiscard]] std::string_view text_view(int c) const {
    const auto* p = reinterpret_cast<const char*>(sqlite3_column_text(stmt_, c));
    return p ? std::string_view(p, static_cast<std::size_t>(sqlite3_column_bytes(stmt_, c))) : std::string_view{};
  }

 private:
  void check(int rc) const {
    if (rc != SQLITE_OK) throw StorageError(std::string("bind failed: ") + sqlite3_errmsg(db_));
  }
  sqlite3* db_;
  sqlite3_stmt* stmt_ = nullptr;
};

inline void exec(sqlite3* db, const char* text) {
  char* err = nullptr;
  if (sqlite3_exec(db, text, nullptr, nullptr, &err) != SQLITE_OK) {
    std::string msg = err ? err : "unknown error";
    sqlite3_free(err);
    throw StorageError("sqlite: " + msg + " in: " + text);
  }
}

inline sqlite3* open(const std::string& path, bool read_only) {
  sqlite3* db = nullptr;
  const int flags = (read_only ? SQLITE_OPEN_READONLY : SQLITE_OPEN_READWRITE | SQLITE_OPEN_CREATE) |
                    SQLITE_OPEN_NOMUTEX | SQLITE_OPEN_URI;
  if (sqlite3_open_v2(path.c_str(), &db, flags, nullptr) != SQLITE_OK) {
    std::string msg = db ? sqlite3_errmsg(db) : "out of memory";
    sqlite3_close(db);
    throw StorageError("cannot open database '" + path + "': " + msg);
  }
  sqlite3_busy_timeout(db, 10000);
  return db;
}

/// RAII transaction; rolls back unless committed.
class Transaction {
 public:
  Transaction(sqlite3* db, const char* begin = "BEGIN IMMEDIATE") : db_(db) { exec(db_, begin); }
  Transaction(const Transaction&) = delete;
  Transaction& operator=(const Transaction&) = delete;
  ~Transaction() {
    if (!done_) sqlite3_exec(db_, "ROLLBACK", nullptr, nullptr, nullptr);
  }
  void commit() {
    exec(db_, "COMMIT");
    done_ = true;
  }

 private:
  sqlite3* db_;
  bool done_ = false;
};

}  // namespace sql

struct SliceInfo {
  std::string event_code;
  Gender gender = Gender::mixed;
  std::size_t athletes = 0;
  std::size_t performances = 0;
  Date first_date;
  Date last_date;
  std::string key;  // default slice key (full date range, wind-legal)
};

/// Compact storage encoding of a DetectionResult (field order fixed, see
/// docs/model-format.md).
inline nlohmann::json encode_detection(const DetectionResult& r) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : r.entries)
    entries.push_back({e.ref.athlete_id, e.ref.index, e.ref.competition_id, e.ref.date.days(), e.ref.centiseconds,
                       static_cast<int>(e.status), e.flagged, e.score, e.severity, e.explanation});
  return {{"format", "perfscreen.detection"},
          {"version", 1},
          {"method_id", r.method_id},
          {"score_scale", r.score_scale},
          {"warnings", r.warnings},
          {"diagnostics", r.diagnostics},
          {"wall_time_ms", r.wall_time_ms},
          {"entries", std::move(entries)}};
}

inline DetectionResult decode_detection(const nlohmann::json& j) {
  if (j.value("format", "") != "perfscreen.detection" || j.value("version", 0) != 1)
    throw StorageError("unsupported stored detection format");
  DetectionResult r;
  r.method_id = j.at("method_id").get<std::string>();
  r.score_scale = j.at("score_scale").get<std::string>();
  r.warnings = j.at("warnings").get<std::vector<std::string>>();
  r.diagnostics = j.at("diagnostics").get<std::map<std::string, double>>();
  r.wall_time_ms = j.at("wall_time_ms").get<double>();
  const auto& entries = j.at("entries");
  r.entries.reserve(entries.size());
  for (const auto& e : entries) {
    DetectionEntry d;
    d.ref.athlete_id = e[0].get<std::string>();
    d.ref.index = e[1].get<std::uint32_t>();
    d.ref.competition_id = e[2].get<std::string>();
    d.ref.date = Date(e[3].get<std::int32_t>());
    d.ref.centiseconds = e[4].get<std::int32_t>();
    d.status = static_cast<EntryStatus>(e[5].get<int>());
    d.flagged = e[6].get<bool>();
    d.score = e[7].get<double>();
    d.severity = e[8].get<double>();
    d.explanation = e[9].get<std::string>();
    r.entries.push_back(std::move(d));
  }
  r.finalize();
  return r;
}

/// Embedded relational store: competitions, athletes, performances,
/// sanctions, plus materialized detection results. One writer connection,
/// a pool of reader connections (WAL gives readers a consistent snapshot
/// while a write transaction is open).
class Store {
 public:
  struct Options {
    std::size_t page_cache_entries = 256;
    std::size_t result_cache_entries = 16;
  };

  explicit Store(std::string path) : Store(std::move(path), Options{}) {}

  Store(std::string path, Options opt)
      : path_(std::move(path)),
        memory_(path_ == ":memory:" || path_.empty()),
        pages_(opt.page_cache_entries),
        results_(opt.result_cache_entries) {
    writer_ = sql::open(memory_ ? ":memory:" : path_, false);
    if (!memory_) sql::exec(writer_, "PRAGMA journal_mode=WAL");
    sql::exec(writer_, "PRAGMA foreign_keys=ON; PRAGMA synchronous=NORMAL;");
    create_schema();
    generation_ = read_generation(writer_);
  }

  Store(const Store&) = delete;
  Store& operator=(const Store&) = delete;

  ~Store() {
    for (auto* db : idle_readers_) sqlite3_close(db);
    sqlite3_close(writer_);
  }

  [[nodiscard]] const std::string& path() const { return path_; }

  /// Bumped on every committed change to performances, competitions or
  /// sanctions; part of every cache key and of materialized results.
  [[nodiscard]] std::uint64_t generation() const { return generation_.load(); }

  // -------------------------------------------------------------------------
  // Writes

  std::size_t upsert_competitions(std::span<const CompetitionRecord> records) {
    std::lock_guard lock(write_mu_);
    sql::Transaction tx(writer_);
    sql::Stmt st(writer_,
                 "INSERT INTO competitions(competition_id,name,date,country,venue,level) VALUES(?,?,?,?,?,?) "
                 "ON CONFLICT(competition_id) DO UPDATE SET name=excluded.name, date=excluded.date, "
                 "country=excluded.country, venue=excluded.venue, level=excluded.level");
    sql::Stmt ev(writer_, "INSERT OR IGNORE INTO competition_events(competition_id,event_code) VALUES(?,?)");
    std::size_t n = 0;
    for (const auto& c : records) {
      st.bind(1, c.competition_id).bind(2, c.name).bind(3, c.date.days()).bind(4, c.country).bind(5, c.venue);
      st.bind(6, c.level);
      st.step();
      n += static_cast<std::size_t>(sqlite3_changes(writer_));
      st.reset();
      for (const auto& e : c.event_codes) {
        ev.bind(1, c.competition_id).bind(2, e);
        ev.step();
        ev.reset();
      }
    }
    bump(tx);
    return n;
  }

  /// Inserts competitions that are not stored yet; existing metadata wins.
  std::size_t insert_missing_competitions(std::span<const CompetitionRecord> records) {
    std::lock_guard lock(write_mu_);
    sql::Transaction tx(writer_);
    sql::Stmt st(writer_,
                 "INSERT OR IGNORE INTO competitions(competition_id,name,date,country,venue,level) VALUES(?,?,?,?,?,?)");
    sql::Stmt ev(writer_, "INSERT OR IGNORE INTO competition_events(competition_id,event_code) VALUES(?,?)");
    std::size_t n = 0;
    for (const auto& c : records) {
      st.bind(1, c.competition_id).bind(2, c.name).bind(3, c.date.days()).bind(4, c.country).bind(5, c.venue);
      st.bind(6, c.level);
      st.step();
      n += static_cast<std::size_t>(sqlite3_changes(writer_));
      st.reset();
      for (const auto& e : c.event_codes) {
        ev.bind(1, c.competition_id).bind(2, e);
        ev.step();
        ev.reset();
      }
    }
    if (n > 0) {
      bump(tx);
    } else {
      tx.commit();
    }
    return n;
  }

  std::size_t upsert_athletes(std::span<const AthleteRecord> records) {
    std::lock_guard lock(write_mu_);
    sql::Transaction tx(writer_);
    sql::Stmt st(writer_,
                 "INSERT INTO athletes(athlete_id,name,country) VALUES(?,?,?) "
                 "ON CONFLICT(athlete_id) DO UPDATE SET name=excluded.name, country=excluded.country "
                 "WHERE name<>excluded.name OR country<>excluded.country");
    std::size_t n = 0;
    for (const auto& a : records) {
      st.bind(1, a.athlete_id).bind(2, a.name).bind(3, a.country);
      st.step();
      n += static_cast<std::size_t>(sqlite3_changes(writer_));
      st.reset();
    }
    tx.commit();
    return n;
  }

  /// Idempotent on (athlete_id, competition_id, event_code, round, time);
  /// returns the number of new rows. Unknown competitions get a stub row so
  /// every performance references an existing competition.
  std::size_t upsert_performances(std::span<const PerformanceRecord> records) {
    if (records.empty()) return 0;
    std::lock_guard lock(write_mu_);
    sql::Transaction tx(writer_);
    sql::Stmt comp(writer_,
                   "INSERT OR IGNORE INTO competitions(competition_id,name,date,country,venue,level) "
                   "VALUES(?,?,?,'','',0)");
    sql::Stmt ev(writer_, "INSERT OR IGNORE INTO competition_events(competition_id,event_code) VALUES(?,?)");
    sql::Stmt st(writer_,
                 "INSERT OR IGNORE INTO performances(athlete_id,competition_id,event_code,round,cs,date,wind,"
                 "reaction,rank,wind_legal) VALUES(?,?,?,?,?,?,?,?,?,?)");
    std::size_t n = 0;
    std::string last_comp, last_event;
    for (const auto& p : records) {
      if (p.competition_id != last_comp || p.event_code != last_event) {
        comp.bind(1, p.competition_id).bind(2, p.competition_id).bind(3, p.date.days());
        comp.step();
        comp.reset();
        ev.bind(1, p.competition_id).bind(2, p.event_code);
        ev.step();
        ev.reset();
        last_comp = p.competition_id;
        last_event = p.event_code;
      }
      st.bind(1, p.athlete_id).bind(2, p.competition_id).bind(3, p.event_code);
      st.bind(4, static_cast<int>(p.round)).bind(5, p.centiseconds).bind(6, p.date.days());
      st.bind(7, p.wind_mps).bind(8, p.reaction_time_s).bind(9, p.rank).bind(10, p.wind_legal ? 1 : 0);
      st.step();
      n += static_cast<std::size_t>(sqlite3_changes(writer_));
      st.reset();
    }
    if (n > 0) {
      bump(tx);
    } else {
      tx.commit();
    }
    return n;
  }

  /// Sanctions keyed by (athlete_id, start); a duplicate keeps the longer
  /// interval (an open end is longest).
  std::size_t upsert_sanctions(std::span<const SanctionRecord> records) {
    std::lock_guard lock(write_mu_);
    sql::Transaction tx(writer_);
    sql::Stmt st(writer_,
                 "INSERT INTO sanctions(athlete_id,start_date,end_date,note) VALUES(?,?,?,?) "
                 "ON CONFLICT(athlete_id,start_date) DO UPDATE SET end_date=excluded.end_date, note=excluded.note "
                 "WHERE end_date IS NOT NULL AND (excluded.end_date IS NULL OR excluded.end_date > end_date)");
    std::size_t n = 0;
    for (const auto& s : records) {
      st.bind(1, s.athlete_id).bind(2, s.sanction_start.days());
      if (s.sanction_end) {
        st.bind(3, s.sanction_end->days());
      } else {
        st.bind_null(3);
      }
      st.bind(4, s.source_note);
      st.step();
      n += static_cast<std::size_t>(sqlite3_changes(writer_));
      st.reset();
    }
    if (n > 0) {
      bump(tx);
    } else {
      tx.commit();
    }
    return n;
  }

  // -------------------------------------------------------------------------
  // Reads

  [[nodiscard]] std::size_t performance_count() const {
    auto r = reader();
    sql::Stmt st(r.db, "SELECT COUNT(*) FROM performances");
    st.step();
    return static_cast<std::size_t>(st.i64(0));
  }

  /// Per athlete, the slice's performances ordered by date then time;
  /// athletes ordered by athlete_id. Unknown events give an empty list.
  [[nodiscard]] std::vector<AthleteHistory> query_slice(const EventSlice& slice) const {
    slice.validate();
    auto r = reader();
    std::string q =
        "SELECT p.athlete_id,p.competition_id,p.cs,p.date,p.wind,p.reaction,p.round,p.rank,p.wind_legal,"
        "COALESCE(c.level,0) FROM performances p LEFT JOIN competitions c ON c.competition_id=p.competition_id "
        "WHERE p.event_code=? AND p.date>=? AND p.date<=?";
    if (slice.wind_legal_only) q += " AND p.wind_legal=1";
    q += " ORDER BY p.athlete_id,p.date,p.cs,p.competition_id,p.round";
    sql::Stmt st(r.db, q.c_str());
    st.bind(1, slice.event_code).bind(2, slice.date_from.days()).bind(3, slice.date_to.days());

    std::vector<AthleteHistory> out;
    while (st.step()) {
      const auto id = st.text_view(0);
      if (out.empty() || out.back().athlete_id != id) {
        out.emplace_back();
        out.back().athlete_id = std::string(id);
        out.back().event_code = slice.event_code;
      }
      PerformanceRecord p;
      p.athlete_id = out.back().athlete_id;
      p.event_code = slice.event_code;
      p.competition_id = st.text(1);
      p.centiseconds = static_cast<std::int32_t>(st.i64(2));
      p.date = Date(static_cast<std::int32_t>(st.i64(3)));
      if (!st.is_null(4)) p.wind_mps = st.real(4);
      if (!st.is_null(5)) p.reaction_time_s = st.real(5);
      p.round = static_cast<Round>(st.i64(6));
      if (!st.is_null(7)) p.rank = static_cast<int>(st.i64(7));
      p.wind_legal = st.i64(8) != 0;
      p.competition_level = static_cast<int>(st.i64(9));
      out.back().performances.push_back(std::move(p));
    }
    return out;
  }

  [[nodiscard]] std::vector<SliceInfo> list_slices() const {
    auto r = reader();
    sql::Stmt st(r.db,
                 "SELECT event_code,COUNT(DISTINCT athlete_id),COUNT(*),MIN(date),MAX(date) FROM performances "
                 "GROUP BY event_code ORDER BY event_code");
    std::vector<SliceInfo> out;
    while (st.step()) {
      SliceInfo s;
      s.event_code = st.text(0);
      s.gender = gender_of(s.event_code);
      s.athletes = static_cast<std::size_t>(st.i64(1));
      s.performances = static_cast<std::size_t>(st.i64(2));
      s.first_date = Date(static_cast<std::int32_t>(st.i64(3)));
      s.last_date = Date(static_cast<std::int32_t>(st.i64(4)));
      s.key = EventSlice::parse(s.event_code).key();
      out.push_back(std::move(s));
    }
    return out;
  }

  [[nodiscard]] bool has_event(const std::string& event_code) const {
    auto r = reader();
    sql::Stmt st(r.db, "SELECT 1 FROM performances WHERE event_code=? LIMIT 1");
    st.bind(1, event_code);
    return st.step();
  }

  [[nodiscard]] std::vector<SanctionRecord> sanctions() const {
    const auto gen = generation();
    {
      std::lock_guard lock(sanction_mu_);
      if (sanction_cache_ && sanction_gen_ == gen) return *sanction_cache_;
    }
    auto r = reader();
    sql::Stmt st(r.db, "SELECT athlete_id,start_date,end_date,note FROM sanctions ORDER BY athlete_id,start_date");
    std::vector<SanctionRecord> out;
    while (st.step()) {
      SanctionRecord s;
      s.athlete_id = st.text(0);
      s.sanction_start = Date(static_cast<std::int32_t>(st.i64(1)));
      if (!st.is_null(2)) s.sanction_end = Date(static_cast<std::int32_t>(st.i64(2)));
      s.source_note = st.text(3);
      out.push_back(std::move(s));
    }
    std::lock_guard lock(sanction_mu_);
    sanction_cache_ = std::make_shared<std::vector<SanctionRecord>>(out);
    sanction_gen_ = gen;
    return out;
  }

  [[nodiscard]] std::optional<CompetitionRecord> competition(const std::string& id) const {
    auto r = reader();
    sql::Stmt st(r.db, "SELECT competition_id,name,date,country,venue,level FROM competitions WHERE competition_id=?");
    st.bind(1, id);
    if (!st.step()) return std::nullopt;
    CompetitionRecord c;
    c.competition_id = st.text(0);
    c.name = st.text(1);
    c.date = Date(static_cast<std::int32_t>(st.i64(2)));
    c.country = st.text(3);
    c.venue = st.text(4);
    c.level = static_cast<int>(st.i64(5));
    sql::Stmt ev(r.db, "SELECT event_code FROM competition_events WHERE competition_id=? ORDER BY event_code");
    ev.bind(1, id);
    while (ev.step()) c.event_codes.insert(ev.text(0));
    return c;
  }

  [[nodiscard]] std::optional<AthleteRecord> athlete(const std::string& id) const {
    auto r = reader();
    sql::Stmt st(r.db, "SELECT athlete_id,name,country FROM athletes WHERE athlete_id=?");
    st.bind(1, id);
    if (!st.step()) return std::nullopt;
    return AthleteRecord{st.text(0), st.text(1), st.text(2)};
  }

  /// Competitions whose foreign key would dangle; empty for a healthy store.
  [[nodiscard]] std::size_t dangling_performances() const {
    auto r = reader();
    sql::Stmt st(r.db,
                 "SELECT COUNT(*) FROM performances p LEFT JOIN competitions c ON c.competition_id=p.competition_id "
                 "WHERE c.competition_id IS NULL");
    st.step();
    return static_cast<std::size_t>(st.i64(0));
  }

  // -------------------------------------------------------------------------
  // Materialized detections

  void save_detection(const std::string& slice_key, const std::string& config_hash, const DetectionResult& r) {
    const std::string payload = encode_detection(r).dump();
    std::lock_guard lock(write_mu_);
    sql::Transaction tx(writer_);
    sql::Stmt st(writer_,
                 "INSERT INTO detections(slice_key,method_id,config_hash,generation,payload) VALUES(?,?,?,?,?) "
                 "ON CONFLICT(slice_key,method_id,config_hash) DO UPDATE SET generation=excluded.generation, "
                 "payload=excluded.payload");
    st.bind(1, slice_key).bind(2, r.method_id).bind(3, config_hash);
    st.bind(4, static_cast<std::int64_t>(generation_.load())).bind(5, payload);
    st.step();
    tx.commit();
    results_.put(result_key(slice_key, r.method_id, config_hash, generation_.load()),
                 std::make_shared<const DetectionResult>(r));
  }

  /// The materialized result for the current data generation, if any.
  [[nodiscard]] std::shared_ptr<const DetectionResult> load_detection(const std::string& slice_key,
                                                                      const std::string& method_id,
                                                                      const std::string& config_hash) const {
    const auto gen = generation_.load();
    const auto key = result_key(slice_key, method_id, config_hash, gen);
    if (auto hit = results_.get(key)) return *hit;
    std::string payload;
    {
      auto r = reader();
      sql::Stmt st(r.db,
                   "SELECT payload FROM detections WHERE slice_key=? AND method_id=? AND config_hash=? "
                   "AND generation=?");
      st.bind(1, slice_key).bind(2, method_id).bind(3, config_hash).bind(4, static_cast<std::int64_t>(gen));
      if (!st.step()) return nullptr;
      payload = st.text(0);
    }
    auto result = std::make_shared<const DetectionResult>(decode_detection(nlohmann::json::parse(payload)));
    results_.put(key, result);
    return result;
  }

  /// Method ids materialized for (slice, config) at the current generation.
  [[nodiscard]] std::vector<std::string> materialized_methods(const std::string& slice_key,
                                                              const std::string& config_hash) const {
    auto r = reader();
    sql::Stmt st(r.db,
                 "SELECT method_id FROM detections WHERE slice_key=? AND config_hash=? AND generation=? "
                 "ORDER BY method_id");
    st.bind(1, slice_key).bind(2, config_hash).bind(3, static_cast<std::int64_t>(generation_.load()));
    std::vector<std::string> out;
    while (st.step()) out.push_back(st.text(0));
    return out;
  }

  /// Every materialized result for (slice, config) at the current generation.
  [[nodiscard]] std::vector<std::shared_ptr<const DetectionResult>> materialized(const std::string& slice_key,
                                                                                  const std::string& config_hash) const {
    std::vector<std::shared_ptr<const DetectionResult>> out;
    for (const auto& m : materialized_methods(slice_key, config_hash))
      if (auto r = load_detection(slice_key, m, config_hash)) out.push_back(std::move(r));
    return out;
  }

  /// Screening page served from the LRU when present. The key hashes slice,
  /// method, config version, data generation, the set of materialized
  /// methods (agreement badges depend on it) and the cursor. Identical calls
  /// return the same bytes.
  [[nodiscard]] std::shared_ptr<const std::string> cached_screen(const std::string& slice_key,
                                                                 const std::string& method_id,
                                                                 const std::string& config_hash,
                                                                 const std::optional<std::string>& cursor) const {
    const auto methods = materialized_methods(slice_key, config_hash);
    if (std::find(methods.begin(), methods.end(), method_id) == methods.end())
      throw NotMaterialized("no " + method_id + " result for slice " + slice_key + "; POST /api/detect first");
    std::uint64_t h = fnv1a64(slice_key);
    h = fnv1a64(method_id, h ^ 1);
    h = fnv1a64(config_hash, h ^ 2);
    h = fnv1a64(std::to_string(generation_.load()), h ^ 3);
    for (const auto& m : methods) h = fnv1a64(m, h ^ 4);
    h = fnv1a64(cursor.value_or(""), h ^ 5);
    const std::string key = hex64(h);
    if (auto hit = pages_.get(key)) return *hit;

    std::vector<DetectionResult> results;
    for (const auto& m : methods)
      if (auto r = load_detection(slice_key, m, config_hash)) results.push_back(*r);
    const auto sanctions_now = sanctions();
    const auto page = eval::build_screening_page(slice_key, method_id, results, cursor, sanctions_now);
    auto bytes = std::make_shared<const std::string>(eval::to_json(page).dump());
    pages_.put(key, bytes);
    return bytes;
  }

  [[nodiscard]] std::size_t page_cache_hits() const { return pages_.hits(); }
  [[nodiscard]] std::size_t page_cache_misses() const { return pages_.misses(); }

 private:
  struct Reader {
    const Store* owner;
    sqlite3* db;
    std::unique_lock<std::mutex> memory_lock;
    Reader(const Reader&) = delete;
    Reader(Reader&& o) noexcept : owner(o.owner), db(o.db), memory_lock(std::move(o.memory_lock)) { o.db = nullptr; }
    Reader(const Store* s, sqlite3* d, std::unique_lock<std::mutex> l) : owner(s), db(d), memory_lock(std::move(l)) {}
    ~Reader() {
      if (db && !owner->memory_) owner->release_reader(db);
    }
  };

  [[nodiscard]] Reader reader() const {
    if (memory_) return Reader(this, writer_, std::unique_lock(write_mu_));
    {
      std::lock_guard lock(pool_mu_);
      if (!idle_readers_.empty()) {
        auto* db = idle_readers_.back();
        idle_readers_.pop_back();
        return Reader(this, db, {});
      }
    }
    return Reader(this, sql::open(path_, true), {});
  }

  void release_reader(sqlite3* db) const {
    std::lock_guard lock(pool_mu_);
    if (idle_readers_.size() < 8) {
      idle_readers_.push_back(db);
    } else {
      sqlite3_close(db);
    }
  }

  static std::string result_key(const std::string& slice, const std::string& method, const std::string& cfg,
                                std::uint64_t gen) {
    return slice + '\x1f' + method + '\x1f' + cfg + '\x1f' + std::to_string(gen);
  }

  void bump(sql::Transaction& tx) {
    sql::exec(writer_, "UPDATE meta SET value=value+1 WHERE key='generation'");
    tx.commit();
    generation_ = read_generation(writer_);
  }

  static std::uint64_t read_generation(sqlite3* db) {
    sql::Stmt st(db, "SELECT value FROM meta WHERE key='generation'");
    return st.step() ? static_cast<std::uint64_t>(st.i64(0)) : 0;
  }

  void create_schema() {
    sql::exec(writer_, R"(
CREATE TABLE IF NOT EXISTS meta(key TEXT PRIMARY KEY, value INTEGER NOT NULL);
INSERT OR IGNORE INTO meta(key,value) VALUES('generation',0);
INSERT OR IGNORE INTO meta(key,value) VALUES('schema_version',1);
CREATE TABLE IF NOT EXISTS competitions(
  competition_id TEXT PRIMARY KEY, name TEXT NOT NULL, date INTEGER NOT NULL,
  country TEXT NOT NULL, venue TEXT NOT NULL, level INTEGER NOT NULL DEFAULT 0);
CREATE TABLE IF NOT EXISTS competition_events(
  competition_id TEXT NOT NULL REFERENCES competitions(competition_id), event_code TEXT NOT NULL,
  PRIMARY KEY(competition_id, event_code));
CREATE TABLE IF NOT EXISTS athletes(athlete_id TEXT PRIMARY KEY, name TEXT NOT NULL, country TEXT NOT NULL);
CREATE TABLE IF NOT EXISTS performances(
  athlete_id TEXT NOT NULL, competition_id TEXT NOT NULL REFERENCES competitions(competition_id),
  event_code TEXT NOT NULL, round INTEGER NOT NULL, cs INTEGER NOT NULL CHECK(cs > 0), date INTEGER NOT NULL,
  wind REAL, reaction REAL, rank INTEGER, wind_legal INTEGER NOT NULL,
  UNIQUE(athlete_id, competition_id, event_code, round, cs));
CREATE INDEX IF NOT EXISTS performances_slice ON performances(event_code, athlete_id, date);
CREATE TABLE IF NOT EXISTS sanctions(
  athlete_id TEXT NOT NULL, start_date INTEGER NOT NULL, end_date INTEGER, note TEXT NOT NULL DEFAULT '',
  PRIMARY KEY(athlete_id, start_date));
CREATE TABLE IF NOT EXISTS detections(
  slice_key TEXT NOT NULL, method_id TEXT NOT NULL, config_hash TEXT NOT NULL, generation INTEGER NOT NULL,
  payload TEXT NOT NULL, PRIMARY KEY(slice_key, method_id, config_hash));
)");
  }

  std::string path_;
  bool memory_;
  sqlite3* writer_ = nullptr;
  mutable std::mutex write_mu_;
  mutable std::mutex pool_mu_;
  mutable std::vector<sqlite3*> idle_readers_;
  std::atomic<std::uint64_t> generation_{0};

  mutable std::mutex sanction_mu_;
  mutable std::shared_ptr<std::vector<SanctionRecord>> sanction_cache_;
  mutable std::uint64_t sanction_gen_ = ~std::uint64_t{0};

  mutable LruCache<std::string, std::shared_ptr<const std::string>> pages_;
  mutable LruCache<std::string, std::shared_ptr<const DetectionResult>> results_;
};

}  // namespace perfscreen
