#pragma once

#include "perfscreen/core/csv.hpp"
#include "perfscreen/core/date.hpp"
#include "perfscreen/core/errors.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

namespace perfscreen {

enum class Round : std::uint8_t { heat = 0, semifinal = 1, final = 2, unknown = 3 };

inline std::string_view to_string(Round r) {
  switch (r) {
    case Round::heat: return "heat";
    case Round::semifinal: return "semifinal";
    case Round::final: return "final";
    case Round::unknown: break;
  }
  return "unknown";
}

/// Lenient round mapping; anything unrecognised is kept as `unknown`.
inline Round parse_round(std::string_view text) {
  std::string s;
  for (const char c : text)
    if (!std::isspace(static_cast<unsigned char>(c)) && c != '-' && c != '_')
      s += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (s == "heat" || s == "heats" || s == "h" || s == "q" || s == "qualification" || s == "round1")
    return Round::heat;
  if (s == "semifinal" || s == "semifinals" || s == "semi" || s == "sf") return Round::semifinal;
  if (s == "final" || s == "f" || s == "afinal" || s == "fa") return Round::final;
  return Round::unknown;
}

/// One raw line of a results file, all fields still text.
struct RawResultRow {
  std::string athlete_id;
  std::string athlete_name;
  std::string mark;
  std::string date;
  std::string wind;           // empty = absent
  std::string reaction_time;  // empty = absent
  std::string round;
  std::string rank;  // empty = absent
  std::string competition_id;
  std::string event_code;
  std::string country;
  std::string venue;

  static constexpr std::string_view kColumns[] = {
      "athlete_id", "athlete_name", "mark",    "date",       "wind",    "reaction_time",
      "round",      "rank",         "competition_id", "event_code", "country", "venue"};

  [[nodiscard]] std::vector<std::string> fields() const {
    return {athlete_id, athlete_name, mark,  date,           wind,       reaction_time,
            round,      rank,         competition_id, event_code, country, venue};
  }
};

struct PerformanceRecord {
  std::string athlete_id;
  std::string competition_id;
  std::string event_code;
  std::int32_t centiseconds = 0;
  Date date;
  std::optional<double> wind_mps;
  std::optional<double> reaction_time_s;
  Round round = Round::unknown;
  std::optional<int> rank;
  bool wind_legal = true;
  int competition_level = 0;  // filled from competition metadata by the store

  [[nodiscard]] double time_seconds() const { return centiseconds / 100.0; }

  friend bool operator==(const PerformanceRecord&, const PerformanceRecord&) = default;
};

struct SanctionRecord {
  std::string athlete_id;
  Date sanction_start;
  std::optional<Date> sanction_end;
  std::string source_note;

  friend bool operator==(const SanctionRecord&, const SanctionRecord&) = default;
};

struct CompetitionRecord {
  std::string competition_id;
  std::string name;
  Date date;
  std::string country;
  std::string venue;
  int level = 0;
  std::set<std::string> event_codes;
};

struct AthleteRecord {
  std::string athlete_id;
  std::string name;
  std::string country;
};

inline constexpr double kWindLegalLimit = 2.0;

// ---------------------------------------------------------------------------
// Marks

/// Parses `SS.ss`, `M:SS.ss` or `H:MM:SS.ss` (0-2 fractional digits) into
/// integer centiseconds. Throws MarkUnparseable for DNF/DQ/DNS and anything
/// malformed.
inline std::int32_t parse_mark_centiseconds(std::string_view mark) {
  const auto fail = [&] { return MarkUnparseable("cannot parse mark '" + std::string(mark) + "'"); };
  std::string_view s = mark;
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  if (s.empty()) throw fail();

  std::vector<std::string_view> parts;
  std::size_t pos = 0;
  while (true) {
    const auto colon = s.find(':', pos);
    parts.push_back(s.substr(pos, colon == std::string_view::npos ? std::string_view::npos : colon - pos));
    if (colon == std::string_view::npos) break;
    pos = colon + 1;
  }
  if (parts.size() > 3) throw fail();

  const auto digits = [&](std::string_view d, int max_len) -> std::int64_t {
    if (d.empty() || static_cast<int>(d.size()) > max_len) throw fail();
    std::int64_t v = 0;
    for (const char c : d) {
      if (c < '0' || c > '9') throw fail();
      v = v * 10 + (c - '0');
    }
    return v;
  };

  // Seconds component (last) carries the fraction.
  std::string_view sec = parts.back();
  std::string_view whole = sec, frac;
  if (const auto dot = sec.find('.'); dot != std::string_view::npos) {
    whole = sec.substr(0, dot);
    frac = sec.substr(dot + 1);
    if (frac.empty() || frac.size() > 2) throw fail();
  }
  const bool has_minutes = parts.size() >= 2;
  if (has_minutes && whole.size() != 2) throw fail();
  const std::int64_t seconds = digits(whole, has_minutes ? 2 : 5);
  if (has_minutes && seconds >= 60) throw fail();
  std::int64_t cs = seconds * 100;
  if (!frac.empty()) cs += digits(frac, 2) * (frac.size() == 1 ? 10 : 1);

  if (parts.size() == 2) {
    cs += digits(parts[0], 3) * 6000;
  } else if (parts.size() == 3) {
    if (parts[1].size() != 2) throw fail();
    const std::int64_t minutes = digits(parts[1], 2);
    if (minutes >= 60) throw fail();
    cs += (digits(parts[0], 2) * 60 + minutes) * 6000;
  }
  if (cs <= 0 || cs > 100LL * 86400) throw fail();
  return static_cast<std::int32_t>(cs);
}

inline double parse_mark(std::string_view mark) { return parse_mark_centiseconds(mark) / 100.0; }

/// Inverse of parse_mark_centiseconds using the shortest canonical form.
inline std::string format_mark(std::int32_t cs) {
  char buf[32];
  const int frac = cs % 100;
  const int total_s = cs / 100;
  if (total_s < 60) {
    std::snprintf(buf, sizeof buf, "%d.%02d", total_s, frac);
  } else if (total_s < 3600) {
    std::snprintf(buf, sizeof buf, "%d:%02d.%02d", total_s / 60, total_s % 60, frac);
  } else {
    std::snprintf(buf, sizeof buf, "%d:%02d:%02d.%02d", total_s / 3600, (total_s / 60) % 60,
                  total_s % 60, frac);
  }
  return buf;
}

// ---------------------------------------------------------------------------
// Small field parsers

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

inline std::optional<double> parse_real(std::string_view s) {
  s = trim(s);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

// IOC / World Athletics member codes plus the neutral-athlete codes in use.
inline const std::unordered_set<std::string>& known_countries() {
  static const std::unordered_set<std::string> codes = [] {
    std::unordered_set<std::string> out;
    constexpr std::string_view list =
        "AFG ALB ALG AND ANG ANT ARG ARM ARU ASA AUS AUT AZE BAH BAN BAR BDI BEL BEN BER BHU BIH "
        "BIZ BLR BOL BOT BRA BRN BRU BUL BUR CAF CAM CAN CAY CGO CHA CHI CHN CIV CMR COD COK COL "
        "COM CPV CRC CRO CUB CYP CZE DEN DJI DMA DOM ECU EGY ERI ESA ESP EST ETH FIJ FIN FRA FSM "
        "GAB GAM GBR GBS GEO GEQ GER GHA GRE GRN GUA GUI GUM GUY HAI HKG HON HUN INA IND IRI IRL "
        "IRQ ISL ISR ISV ITA IVB JAM JOR JPN KAZ KEN KGZ KIR KOR KOS KSA KUW LAO LAT LBA LBN LBR "
        "LCA LES LIE LTU LUX MAD MAR MAS MAW MDA MDV MEX MGL MHL MKD MLI MLT MNE MON MOZ MRI MTN "
        "MYA NAM NCA NED NEP NGR NIG NOR NRU NZL OMA PAK PAN PAR PER PHI PLE PLW PNG POL POR PRK "
        "PUR QAT ROU RSA RUS RWA SAM SEN SEY SGP SKN SLE SLO SMR SOL SOM SRB SRI SSD STP SUD SUI "
        "SUR SVK SWE SWZ SYR TAN TGA THA TJK TKM TLS TOG TPE TTO TUN TUR TUV UAE UGA UKR URU USA "
        "UZB VAN VEN VIE VIN YEM ZAM ZIM ANA AIN EOR MAC GIB NFI TKS MNT AIA";
    std::size_t p = 0;
    while (p < list.size()) {
      const auto sp = list.find(' ', p);
      out.emplace(list.substr(p, sp == std::string_view::npos ? std::string_view::npos : sp - p));
      if (sp == std::string_view::npos) break;
      p = sp + 1;
    }
    return out;
  }();
  return codes;
}

}  // namespace detail

/// Warnings raised while normalizing one row; the row is still accepted.
struct RowWarnings {
  bool country_unknown = false;
  bool wind_unparseable = false;
  bool reaction_unparseable = false;
  bool rank_unparseable = false;
};

struct NormalizedRow {
  PerformanceRecord record;
  std::string athlete_name;
  std::string country;  // upper-cased
  std::string venue;
  RowWarnings warnings;
};

inline std::string normalize_country(std::string_view raw, bool* unknown = nullptr) {
  std::string c;
  for (const char ch : detail::trim(raw)) c += static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  const bool known = c.size() == 3 && detail::known_countries().count(c) > 0;
  if (unknown) *unknown = !known;
  return c;
}

/// Validates and converts a raw row. Rejects (throws) on missing identifiers,
/// unparseable marks and unparseable or out-of-range dates; degrades
/// gracefully (absent value + warning) for wind, reaction time and rank.
inline NormalizedRow normalize_row(const RawResultRow& row, Date today = Date::today()) {
  NormalizedRow out;
  auto& rec = out.record;
  rec.athlete_id = std::string(detail::trim(row.athlete_id));
  rec.competition_id = std::string(detail::trim(row.competition_id));
  rec.event_code = std::string(detail::trim(row.event_code));
  if (rec.athlete_id.empty() || rec.competition_id.empty() || rec.event_code.empty())
    throw InvalidRow("athlete_id, competition_id and event_code are required");

  rec.centiseconds = parse_mark_centiseconds(row.mark);

  const auto date = Date::parse(row.date);
  if (!date) throw DateUnparseable("cannot parse date '" + row.date + "'");
  if (*date < Date::from_ymd(1990, 1, 1) || *date > today)
    throw DateUnparseable("date " + date->iso() + " outside [1990-01-01, today]");
  rec.date = *date;

  if (!detail::trim(row.wind).empty()) {
    if (auto w = detail::parse_real(row.wind)) {
      rec.wind_mps = *w;
    } else {
      out.warnings.wind_unparseable = true;
    }
  }
  rec.wind_legal = !(rec.wind_mps && *rec.wind_mps > kWindLegalLimit);

  if (!detail::trim(row.reaction_time).empty()) {
    auto rt = detail::parse_real(row.reaction_time);
    if (rt && *rt > 0.0) {
      rec.reaction_time_s = *rt;
    } else {
      out.warnings.reaction_unparseable = true;
    }
  }

  rec.round = parse_round(row.round);

  if (!detail::trim(row.rank).empty()) {
    const auto r = detail::trim(row.rank);
    int v = 0;
    const auto [ptr, ec] = std::from_chars(r.data(), r.data() + r.size(), v);
    if (ec == std::errc{} && ptr == r.data() + r.size() && v > 0) {
      rec.rank = v;
    } else {
      out.warnings.rank_unparseable = true;
    }
  }

  out.athlete_name = std::string(detail::trim(row.athlete_name));
  out.country = normalize_country(row.country, &out.warnings.country_unknown);
  out.venue = std::string(detail::trim(row.venue));
  return out;
}

/// Writes a record back to raw form (the exact text normalize_row accepts).
inline RawResultRow to_raw(const NormalizedRow& n) {
  const auto& r = n.record;
  RawResultRow raw;
  raw.athlete_id = r.athlete_id;
  raw.athlete_name = n.athlete_name;
  raw.mark = format_mark(r.centiseconds);
  raw.date = r.date.iso();
  if (r.wind_mps) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%+.17g", *r.wind_mps);
    raw.wind = buf;
  }
  if (r.reaction_time_s) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", *r.reaction_time_s);
    raw.reaction_time = buf;
  }
  raw.round = std::string(to_string(r.round));
  if (r.rank) raw.rank = std::to_string(*r.rank);
  raw.competition_id = r.competition_id;
  raw.event_code = r.event_code;
  raw.country = n.country;
  raw.venue = n.venue;
  return raw;
}

// ---------------------------------------------------------------------------
// File loaders

struct IngestStats {
  std::size_t input_rows = 0;
  std::size_t accepted = 0;
  std::size_t skipped = 0;
  std::map<std::string, std::size_t> skip_reasons;
  std::map<std::string, std::size_t> warnings;

  void skip(const std::string& reason) {
    ++skipped;
    ++skip_reasons[reason];
  }
};

struct ResultsBatch {
  std::vector<NormalizedRow> rows;
  IngestStats stats;

  /// Competition stubs derived from rows (first row seen wins for metadata).
  [[nodiscard]] std::vector<CompetitionRecord> competitions() const {
    std::map<std::string, CompetitionRecord> by_id;
    for (const auto& n : rows) {
      auto [it, inserted] = by_id.try_emplace(n.record.competition_id);
      auto& c = it->second;
      if (inserted) {
        c.competition_id = n.record.competition_id;
        c.name = n.record.competition_id;
        c.date = n.record.date;
        c.country = n.country;
        c.venue = n.venue;
      }
      c.event_codes.insert(n.record.event_code);
    }
    std::vector<CompetitionRecord> out;
    out.reserve(by_id.size());
    for (auto& [_, c] : by_id) out.push_back(std::move(c));
    return out;
  }

  [[nodiscard]] std::vector<AthleteRecord> athletes() const {
    std::map<std::string, AthleteRecord> by_id;
    for (const auto& n : rows)
      by_id.try_emplace(n.record.athlete_id, AthleteRecord{n.record.athlete_id, n.athlete_name, n.country});
    std::vector<AthleteRecord> out;
    for (auto& [_, a] : by_id) out.push_back(std::move(a));
    return out;
  }

  [[nodiscard]] std::vector<PerformanceRecord> records() const {
    std::vector<PerformanceRecord> out;
    out.reserve(rows.size());
    for (const auto& n : rows) out.push_back(n.record);
    return out;
  }
};

/// Parses a results stream whose header must list the RawResultRow columns in
/// order. Bad rows are skipped and counted; the loader never aborts on a row.
inline ResultsBatch load_results(std::istream& in, Date today = Date::today()) {
  csv::Reader reader(in);
  const auto& header = reader.header();
  const std::size_t ncols = std::size(RawResultRow::kColumns);
  bool header_ok = header.size() == ncols;
  for (std::size_t i = 0; header_ok && i < ncols; ++i) header_ok = header[i] == RawResultRow::kColumns[i];
  if (!header_ok) {
    std::string expected;
    for (const auto c : RawResultRow::kColumns) expected += (expected.empty() ? "" : ",") + std::string(c);
    throw MissingColumns("results header must be exactly: " + expected);
  }

  ResultsBatch batch;
  while (auto fields = reader.next()) {
    ++batch.stats.input_rows;
    if (fields->size() != ncols) {
      batch.stats.skip("column_count");
      continue;
    }
    auto& f = *fields;
    RawResultRow raw{f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8], f[9], f[10], f[11]};
    try {
      auto n = normalize_row(raw, today);
      if (n.warnings.country_unknown) ++batch.stats.warnings["country_unknown"];
      if (n.warnings.wind_unparseable) ++batch.stats.warnings["wind_unparseable"];
      if (n.warnings.reaction_unparseable) ++batch.stats.warnings["reaction_unparseable"];
      if (n.warnings.rank_unparseable) ++batch.stats.warnings["rank_unparseable"];
      batch.rows.push_back(std::move(n));
      ++batch.stats.accepted;
    } catch (const Error& e) {
      batch.stats.skip(e.code());
    }
  }
  return batch;
}

struct SanctionsBatch {
  std::vector<SanctionRecord> records;
  IngestStats stats;
};

/// Sanction file: header with athlete_id,start,end[,note]. Duplicate
/// (athlete_id, start) pairs keep the longer interval (open end is longest).
inline SanctionsBatch load_sanctions(std::istream& in) {
  csv::Reader reader(in);
  const auto id_col = reader.column("athlete_id");
  const auto start_col = reader.column("start");
  const auto end_col = reader.column("end");
  const auto note_col = reader.column("note");
  if (!id_col || !start_col || !end_col)
    throw MissingColumns("sanction file requires columns athlete_id,start,end");

  SanctionsBatch batch;
  std::map<std::pair<std::string, Date>, SanctionRecord> dedup;
  while (auto fields = reader.next()) {
    ++batch.stats.input_rows;
    const auto& f = *fields;
    const auto get = [&](std::optional<std::size_t> col) -> std::string {
      return col && *col < f.size() ? csv::Reader::trim(f[*col]) : std::string{};
    };
    SanctionRecord rec;
    rec.athlete_id = get(id_col);
    if (rec.athlete_id.empty()) {
      batch.stats.skip("invalid_row");
      continue;
    }
    const auto start = Date::parse(get(start_col));
    if (!start) {
      batch.stats.skip("date_unparseable");
      continue;
    }
    rec.sanction_start = *start;
    if (const auto end_text = get(end_col); !end_text.empty()) {
      const auto end = Date::parse(end_text);
      if (!end) {
        batch.stats.skip("date_unparseable");
        continue;
      }
      if (*end < *start) {
        batch.stats.skip("end_before_start");
        continue;
      }
      rec.sanction_end = *end;
    }
    rec.source_note = get(note_col);
    ++batch.stats.accepted;

    const auto key = std::make_pair(rec.athlete_id, rec.sanction_start);
    auto [it, inserted] = dedup.try_emplace(key, rec);
    if (!inserted) {
      ++batch.stats.warnings["duplicate_sanction"];
      auto& kept = it->second;
      const bool kept_open = !kept.sanction_end;
      const bool new_open = !rec.sanction_end;
      if (!kept_open && (new_open || *rec.sanction_end > *kept.sanction_end)) kept = rec;
    }
  }
  for (auto& [_, r] : dedup) batch.records.push_back(std::move(r));
  return batch;
}

struct CompetitionsBatch {
  std::vector<CompetitionRecord> records;
  IngestStats stats;
};

/// Optional competition metadata file:
/// competition_id,name,date,country,venue,level (level = small ordinal).
inline CompetitionsBatch load_competitions(std::istream& in) {
  csv::Reader reader(in);
  const auto id_col = reader.column("competition_id");
  const auto date_col = reader.column("date");
  if (!id_col || !date_col) throw MissingColumns("competition file requires competition_id,date");
  const auto name_col = reader.column("name");
  const auto country_col = reader.column("country");
  const auto venue_col = reader.column("venue");
  const auto level_col = reader.column("level");

  CompetitionsBatch batch;
  while (auto fields = reader.next()) {
    ++batch.stats.input_rows;
    const auto& f = *fields;
    const auto get = [&](std::optional<std::size_t> col) -> std::string {
      return col && *col < f.size() ? csv::Reader::trim(f[*col]) : std::string{};
    };
    CompetitionRecord c;
    c.competition_id = get(id_col);
    const auto d = Date::parse(get(date_col));
    if (c.competition_id.empty() || !d) {
      batch.stats.skip(c.competition_id.empty() ? "invalid_row" : "date_unparseable");
      continue;
    }
    c.date = *d;
    c.name = get(name_col);
    if (c.name.empty()) c.name = c.competition_id;
    c.country = normalize_country(get(country_col));
    c.venue = get(venue_col);
    if (const auto lvl = detail::parse_real(get(level_col)); lvl && *lvl >= 0 && *lvl < 100)
      c.level = static_cast<int>(*lvl);
    batch.records.push_back(std::move(c));
    ++batch.stats.accepted;
  }
  return batch;
}

enum class FileKind { results, sanctions, competitions, unknown };

/// Sniffs a file's header to decide which loader applies.
inline FileKind detect_file_kind(std::istream& in) {
  csv::Reader reader(in);
  const auto& h = reader.header();
  if (!h.empty() && h.size() == std::size(RawResultRow::kColumns) && h[0] == "athlete_id" && h[2] == "mark")
    return FileKind::results;
  if (reader.column("athlete_id") && reader.column("start") && reader.column("end")) return FileKind::sanctions;
  if (reader.column("competition_id") && reader.column("date") && !reader.column("athlete_id"))
    return FileKind::competitions;
  return FileKind::unknown;
}

}  // namespace perfscreen
