#pragma once

#include "perfscreen/core/csv.hpp"
#include "perfscreen/core/errors.hpp"
#include "perfscreen/core/hash.hpp"
#include "perfscreen/detect/types.hpp"
#include "perfscreen/ingest.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace perfscreen::synth {

enum class OnsetPolicy { fraction, last_k };

/// Doping effect: a drop of `effect_seconds` in mean time from the onset
/// performance onwards. With ramp_years > 0 the drop grows linearly to its
/// full size over that many years after onset.
struct InjectionSpec {
  double fraction_doped = 0.0;
  double effect_seconds = 0.4;
  OnsetPolicy onset = OnsetPolicy::fraction;
  double onset_fraction = 0.5;  // onset at this share of the career (fraction policy)
  int last_k = 1;               // affected trailing performances (last_k policy)
  double ramp_years = 0.0;
  int min_history = 3;          // only athletes with this many performances are injected
};

struct GeneratorSpec {
  std::size_t n_athletes = 1000;
  std::optional<std::size_t> total_performances;  // exact row count when set
  double median_performances = 7.0;   // lognormal count model, median ~7
  double performances_spread = 0.98;  // log-scale sd; mean ~ 1.6 x median
  std::size_t min_performances = 1;
  std::size_t max_performances = 150;
  std::size_t n_competitions = 0;  // 0 = max(max_performances * 2, n_athletes / 4)

  std::string event_code = "100m-men";
  Date first_date = Date::from_ymd(2010, 1, 1);
  Date last_date = Date::from_ymd(2025, 6, 30);
  double career_years_min = 1.0;
  double career_years_max = 12.0;

  double base_mean = 11.0;
  double base_sd = 0.4;
  double slope_sd = 0.05;  // seconds per year
  double within_sd = 0.12;
  double wind_sd = 1.0;
  double wind_min = -3.0;
  double wind_max = 4.0;
  double wind_missing_rate = 0.02;
  double wind_effect = 0.05;  // seconds faster per m/s of tailwind
  double reaction_mean = 0.150;
  double reaction_sd = 0.020;
  double reaction_min = 0.100;
  double reaction_max = 0.300;
  double reaction_missing_rate = 0.10;
  double reaction_effect = 1.0;  // seconds per second of reaction-time deviation

  InjectionSpec injection{};
  std::optional<std::size_t> sanctioned_count;  // exact, else round(sanction_fraction * injected)
  double sanction_fraction = 0.4;
  std::uint64_t seed = 1;

  void validate() const {
    const auto rate = [](double v, const char* name) {
      if (!(v >= 0.0 && v <= 1.0)) throw InvalidConfig(std::string(name) + " must lie in [0,1]");
    };
    rate(wind_missing_rate, "wind_missing_rate");
    rate(reaction_missing_rate, "reaction_missing_rate");
    rate(injection.fraction_doped, "injection.fraction_doped");
    rate(injection.onset_fraction, "injection.onset_fraction");
    rate(sanction_fraction, "sanction_fraction");
    if (n_athletes == 0) throw InvalidConfig("n_athletes must be positive");
    if (!(injection.effect_seconds > 0.0)) throw InvalidConfig("injection.effect_seconds must be positive");
    if (injection.last_k < 1) throw InvalidConfig("injection.last_k must be at least 1");
    if (min_performances < 1 || max_performances < min_performances)
      throw InvalidConfig("need 1 <= min_performances <= max_performances");
    if (total_performances &&
        (*total_performances < n_athletes * min_performances || *total_performances > n_athletes * max_performances))
      throw InvalidConfig("total_performances is not reachable with the per-athlete bounds");
    if (!(last_date > first_date)) throw InvalidConfig("last_date must follow first_date");
    if (!(within_sd >= 0 && base_sd >= 0 && slope_sd >= 0 && wind_sd >= 0 && reaction_sd >= 0))
      throw InvalidConfig("standard deviations must be non-negative");
    if (!(career_years_min > 0 && career_years_max >= career_years_min))
      throw InvalidConfig("career year bounds are invalid");
  }
};

inline std::string to_string(OnsetPolicy p) { return p == OnsetPolicy::last_k ? "last_k" : "fraction"; }

/// Reads a spec from JSON; unknown keys are rejected so typos do not pass
/// silently. Dates are YYYY-MM-DD strings.
inline GeneratorSpec spec_from_json(const nlohmann::json& j) {
  GeneratorSpec s;
  static const std::set<std::string> known = {
      "n_athletes", "total_performances", "median_performances", "performances_spread", "min_performances",
      "max_performances", "n_competitions", "event_code", "first_date", "last_date", "career_years_min",
      "career_years_max", "base_mean", "base_sd", "slope_sd", "within_sd", "wind_sd", "wind_min", "wind_max",
      "wind_missing_rate", "wind_effect", "reaction_mean", "reaction_sd", "reaction_min", "reaction_max",
      "reaction_missing_rate", "reaction_effect", "injection", "sanctioned_count", "sanction_fraction", "seed"};
  for (const auto& [k, _] : j.items())
    if (!known.contains(k)) throw InvalidConfig("unknown generator field '" + k + "'");
  try {
    const auto date = [&](const char* key, Date def) {
      if (!j.contains(key)) return def;
      const auto d = Date::parse(j.at(key).get<std::string>());
      if (!d) throw InvalidConfig(std::string(key) + " must be YYYY-MM-DD");
      return *d;
    };
    s.n_athletes = j.value("n_athletes", s.n_athletes);
    if (j.contains("total_performances") && !j.at("total_performances").is_null())
      s.total_performances = j.at("total_performances").get<std::size_t>();
    s.median_performances = j.value("median_performances", s.median_performances);
    s.performances_spread = j.value("performances_spread", s.performances_spread);
    s.min_performances = j.value("min_performances", s.min_performances);
    s.max_performances = j.value("max_performances", s.max_performances);
    s.n_competitions = j.value("n_competitions", s.n_competitions);
    s.event_code = j.value("event_code", s.event_code);
    s.first_date = date("first_date", s.first_date);
    s.last_date = date("last_date", s.last_date);
    s.career_years_min = j.value("career_years_min", s.career_years_min);
    s.career_years_max = j.value("career_years_max", s.career_years_max);
    s.base_mean = j.value("base_mean", s.base_mean);
    s.base_sd = j.value("base_sd", s.base_sd);
    s.slope_sd = j.value("slope_sd", s.slope_sd);
    s.within_sd = j.value("within_sd", s.within_sd);
    s.wind_sd = j.value("wind_sd", s.wind_sd);
    s.wind_min = j.value("wind_min", s.wind_min);
    s.wind_max = j.value("wind_max", s.wind_max);
    s.wind_missing_rate = j.value("wind_missing_rate", s.wind_missing_rate);
    s.wind_effect = j.value("wind_effect", s.wind_effect);
    s.reaction_mean = j.value("reaction_mean", s.reaction_mean);
    s.reaction_sd = j.value("reaction_sd", s.reaction_sd);
    s.reaction_min = j.value("reaction_min", s.reaction_min);
    s.reaction_max = j.value("reaction_max", s.reaction_max);
    s.reaction_missing_rate = j.value("reaction_missing_rate", s.reaction_missing_rate);
    s.reaction_effect = j.value("reaction_effect", s.reaction_effect);
    if (j.contains("sanctioned_count") && !j.at("sanctioned_count").is_null())
      s.sanctioned_count = j.at("sanctioned_count").get<std::size_t>();
    s.sanction_fraction = j.value("sanction_fraction", s.sanction_fraction);
    s.seed = j.value("seed", s.seed);
    if (j.contains("injection")) {
      const auto& inj = j.at("injection");
      for (const auto& [k, _] : inj.items())
        if (k != "fraction_doped" && k != "effect_seconds" && k != "onset" && k != "onset_fraction" &&
            k != "last_k" && k != "ramp_years" && k != "min_history")
          throw InvalidConfig("unknown injection field '" + k + "'");
      s.injection.fraction_doped = inj.value("fraction_doped", s.injection.fraction_doped);
      s.injection.effect_seconds = inj.value("effect_seconds", s.injection.effect_seconds);
      const auto onset = inj.value("onset", std::string("fraction"));
      if (onset == "fraction") {
        s.injection.onset = OnsetPolicy::fraction;
      } else if (onset == "last_k") {
        s.injection.onset = OnsetPolicy::last_k;
      } else {
        throw InvalidConfig("injection.onset must be 'fraction' or 'last_k'");
      }
      s.injection.onset_fraction = inj.value("onset_fraction", s.injection.onset_fraction);
      s.injection.last_k = inj.value("last_k", s.injection.last_k);
      s.injection.ramp_years = inj.value("ramp_years", s.injection.ramp_years);
      s.injection.min_history = inj.value("min_history", s.injection.min_history);
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidConfig(std::string("generator spec: ") + e.what());
  }
  s.validate();
  return s;
}

struct InjectedAthlete {
  std::string athlete_id;
  Date onset_date;
  std::size_t onset_index = 0;
  std::size_t affected = 0;
  double effect_seconds = 0.0;
};

struct Manifest {
  std::uint64_t seed = 0;
  std::size_t athletes = 0;
  std::size_t performances = 0;
  std::size_t competitions = 0;
  std::size_t athletes_with_legal_rows = 0;
  std::size_t legal_performances = 0;
  std::vector<InjectedAthlete> injected;
  std::vector<std::string> sanctioned;  // athlete ids, sorted
};

struct GeneratedData {
  GeneratorSpec spec;
  std::vector<NormalizedRow> rows;  // athlete_id, then date order
  std::vector<CompetitionRecord> competitions;
  std::vector<SanctionRecord> sanctions;
  Manifest manifest;

  [[nodiscard]] std::vector<PerformanceRecord> records() const {
    std::vector<PerformanceRecord> out;
    out.reserve(rows.size());
    for (const auto& r : rows) out.push_back(r.record);
    return out;
  }

  /// Histories as the store would return them for the full-range slice.
  [[nodiscard]] std::vector<AthleteHistory> histories(bool wind_legal_only = false) const {
    std::vector<PerformanceRecord> recs;
    recs.reserve(rows.size());
    for (const auto& r : rows)
      if (!wind_legal_only || r.record.wind_legal) recs.push_back(r.record);
    return group_histories(std::move(recs));
  }

  [[nodiscard]] std::set<std::string> injected_ids() const {
    std::set<std::string> out;
    for (const auto& a : manifest.injected) out.insert(a.athlete_id);
    return out;
  }
};

namespace detail {

inline constexpr const char* kCountries[] = {"USA", "JAM", "GBR", "CAN", "NGR", "RSA", "FRA", "GER",
                                             "ITA", "JPN", "CHN", "BRA", "KEN", "TTO", "BAH", "AUS"};

inline std::string padded(const char* prefix, std::size_t v, int width) {
  std::string digits = std::to_string(v);
  if (digits.size() < static_cast<std::size_t>(width)) digits.insert(0, static_cast<std::size_t>(width) - digits.size(), '0');
  return prefix + digits;
}

inline int digits(std::size_t n) {
  int d = 1;
  while (n >= 10) {
    n /= 10;
    ++d;
  }
  return std::max(d, 5);
}

/// k distinct integers from [lo, hi) (Floyd's algorithm), ascending.
inline std::vector<std::size_t> sample_distinct(std::size_t lo, std::size_t hi, std::size_t k, std::mt19937_64& rng) {
  std::set<std::size_t> chosen;
  const std::size_t n = hi - lo;
  for (std::size_t j = n - k; j < n; ++j) {
    std::uniform_int_distribution<std::size_t> d(0, j);
    const std::size_t t = d(rng);
    if (!chosen.insert(lo + t).second) chosen.insert(lo + j);
  }
  return {chosen.begin(), chosen.end()};
}

inline double truncated_normal(double mean, double sd, double lo, double hi, std::mt19937_64& rng) {
  std::normal_distribution<double> n(mean, sd);
  for (int i = 0; i < 1000; ++i) {
    const double v = n(rng);
    if (v >= lo && v <= hi) return v;
  }
  return std::clamp(mean, lo, hi);
}

}  // namespace detail

/// Seeded synthetic slice. Every random stream is derived from spec.seed,
/// so the same spec always produces the same rows.
inline GeneratedData generate(const GeneratorSpec& spec) {
  spec.validate();
  GeneratedData out;
  out.spec = spec;
  const std::size_t n = spec.n_athletes;
  const int id_width = detail::digits(n);

  // Competitions spread uniformly over the date range, sorted by date.
  const std::size_t n_comp =
      spec.n_competitions > 0 ? spec.n_competitions : std::max(spec.max_performances * 2, n / 4);
  if (n_comp < spec.max_performances) throw InvalidConfig("n_competitions must be at least max_performances");
  {
    std::mt19937_64 rng(derive_seed(spec.seed, 0xc0));
    std::uniform_int_distribution<std::int32_t> day(spec.first_date.days(), spec.last_date.days());
    std::discrete_distribution<int> level({50, 30, 15, 5});
    std::uniform_int_distribution<std::size_t> country(0, std::size(detail::kCountries) - 1);
    std::vector<Date> dates(n_comp);
    for (auto& d : dates) d = Date(day(rng));
    std::sort(dates.begin(), dates.end());
    const int cw = detail::digits(n_comp);
    for (std::size_t c = 0; c < n_comp; ++c) {
      CompetitionRecord rec;
      rec.competition_id = detail::padded("C", c + 1, cw);
      rec.name = "Meeting " + std::to_string(c + 1);
      rec.date = dates[c];
      rec.country = detail::kCountries[country(rng)];
      rec.venue = "Venue " + std::to_string(c % 97 + 1);
      rec.level = level(rng);
      rec.event_codes.insert(spec.event_code);
      out.competitions.push_back(std::move(rec));
    }
  }

  // Performance counts: discretised lognormal, then nudged to an exact total.
  std::vector<std::size_t> counts(n);
  {
    std::mt19937_64 rng(derive_seed(spec.seed, 0xc1));
    std::lognormal_distribution<double> ln(std::log(spec.median_performances), spec.performances_spread);
    for (auto& c : counts)
      c = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(ln(rng))), spec.min_performances,
                                  spec.max_performances);
    if (spec.total_performances) {
      std::size_t total = 0;
      for (const auto c : counts) total += c;
      std::uniform_int_distribution<std::size_t> pick(0, n - 1);
      while (total < *spec.total_performances) {
        auto& c = counts[pick(rng)];
        if (c < spec.max_performances) {
          ++c;
          ++total;
        }
      }
      while (total > *spec.total_performances) {
        auto& c = counts[pick(rng)];
        if (c > spec.min_performances) {
          --c;
          --total;
        }
      }
    }
  }

  // Injected athletes: a seeded choice among those with enough history.
  std::vector<bool> injected(n, false);
  {
    std::vector<std::size_t> eligible;
    for (std::size_t a = 0; a < n; ++a)
      if (counts[a] >= static_cast<std::size_t>(std::max(spec.injection.min_history, 2))) eligible.push_back(a);
    const auto want = static_cast<std::size_t>(std::llround(spec.injection.fraction_doped * static_cast<double>(n)));
    std::mt19937_64 rng(derive_seed(spec.seed, 0xc2));
    std::shuffle(eligible.begin(), eligible.end(), rng);
    for (std::size_t i = 0; i < std::min(want, eligible.size()); ++i) injected[eligible[i]] = true;
  }

  const double range_years = Date::years_between(spec.first_date, spec.last_date);
  for (std::size_t a = 0; a < n; ++a) {
    std::mt19937_64 rng(derive_seed(spec.seed, 0xa0, a));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const std::string id = detail::padded("A", a + 1, id_width);
    const std::string name = "Athlete " + std::to_string(a + 1);
    const std::string country = detail::kCountries[a % std::size(detail::kCountries)];

    // Career window, widened until it holds enough competitions.
    const double span = std::min(range_years, spec.career_years_min +
                                                  (spec.career_years_max - spec.career_years_min) * unif(rng));
    const double start_years = (range_years - span) * unif(rng);
    const Date c0 = spec.first_date.plus_days(static_cast<std::int32_t>(start_years * 365.2425));
    const Date c1 = c0.plus_days(static_cast<std::int32_t>(span * 365.2425));
    const auto by_date = [](const CompetitionRecord& c, Date d) { return c.date < d; };
    std::size_t lo = static_cast<std::size_t>(
        std::lower_bound(out.competitions.begin(), out.competitions.end(), c0, by_date) - out.competitions.begin());
    std::size_t hi = static_cast<std::size_t>(
        std::lower_bound(out.competitions.begin(), out.competitions.end(), c1.plus_days(1), by_date) -
        out.competitions.begin());
    while (hi - lo < counts[a]) {
      if (lo > 0) --lo;
      if (hi - lo < counts[a] && hi < n_comp) ++hi;
    }
    const auto picks = detail::sample_distinct(lo, hi, counts[a], rng);

    const double base = spec.base_mean + spec.base_sd * normal(rng);
    const double slope = spec.slope_sd * normal(rng);
    const Date origin = out.competitions[picks.front()].date;

    std::size_t onset = counts[a];
    if (injected[a]) {
      if (spec.injection.onset == OnsetPolicy::last_k) {
        onset = counts[a] - std::min<std::size_t>(static_cast<std::size_t>(spec.injection.last_k), counts[a] - 1);
      } else {
        onset = static_cast<std::size_t>(std::floor(spec.injection.onset_fraction * static_cast<double>(counts[a])));
        onset = std::clamp<std::size_t>(onset, 1, counts[a] - 1);
      }
    }
    const Date onset_date = injected[a] ? out.competitions[picks[onset]].date : Date{};

    for (std::size_t j = 0; j < picks.size(); ++j) {
      const auto& comp = out.competitions[picks[j]];
      NormalizedRow row;
      auto& p = row.record;
      p.athlete_id = id;
      p.competition_id = comp.competition_id;
      p.event_code = spec.event_code;
      p.date = comp.date;
      p.competition_level = comp.level;
      const double r = unif(rng);
      p.round = r < 0.5 ? Round::heat : r < 0.7 ? Round::semifinal : Round::final;

      const double wind = detail::truncated_normal(0.0, spec.wind_sd, spec.wind_min, spec.wind_max, rng);
      const bool wind_missing = unif(rng) < spec.wind_missing_rate;
      const double reaction =
          detail::truncated_normal(spec.reaction_mean, spec.reaction_sd, spec.reaction_min, spec.reaction_max, rng);
      const bool reaction_missing = unif(rng) < spec.reaction_missing_rate;
      const double wind_r = std::round(wind * 10.0) / 10.0;
      const double reaction_r = std::round(reaction * 1000.0) / 1000.0;

      const double t = Date::years_between(origin, p.date);
      double time = base + slope * t + spec.within_sd * normal(rng) - spec.wind_effect * wind_r +
                    spec.reaction_effect * (reaction_r - spec.reaction_mean);
      if (injected[a] && j >= onset) {
        double effect = spec.injection.effect_seconds;
        if (spec.injection.ramp_years > 0.0)
          effect *= std::min(1.0, Date::years_between(onset_date, p.date) / spec.injection.ramp_years);
        time -= effect;
      }
      p.centiseconds = std::max<std::int32_t>(1, static_cast<std::int32_t>(std::llround(time * 100.0)));
      if (!wind_missing) p.wind_mps = wind_r;
      if (!reaction_missing) p.reaction_time_s = reaction_r;
      p.wind_legal = !(p.wind_mps && *p.wind_mps > kWindLegalLimit);
      p.rank = 1 + static_cast<int>(unif(rng) * 8.0);
      row.athlete_name = name;
      row.country = country;
      row.venue = comp.venue;
      out.rows.push_back(std::move(row));
    }
    std::stable_sort(out.rows.end() - static_cast<std::ptrdiff_t>(picks.size()), out.rows.end(),
                     [](const NormalizedRow& x, const NormalizedRow& y) { return x.record.date < y.record.date; });

    if (injected[a]) {
      std::size_t affected = 0;
      for (std::size_t j = onset; j < counts[a]; ++j) ++affected;
      out.manifest.injected.push_back({id, onset_date, onset, affected, spec.injection.effect_seconds});
    }
  }

  // Sanctions: a subset of injected athletes, topped up with clean athletes
  // when an exact count larger than the injected set is requested.
  {
    std::mt19937_64 rng(derive_seed(spec.seed, 0xc3));
    std::vector<std::size_t> inj, clean;
    for (std::size_t a = 0; a < n; ++a) (injected[a] ? inj : clean).push_back(a);
    std::shuffle(inj.begin(), inj.end(), rng);
    std::shuffle(clean.begin(), clean.end(), rng);
    const std::size_t want = spec.sanctioned_count
                                 ? *spec.sanctioned_count
                                 : static_cast<std::size_t>(std::llround(spec.sanction_fraction * static_cast<double>(inj.size())));
    if (want > n) throw InvalidConfig("sanctioned_count exceeds n_athletes");
    std::vector<std::size_t> chosen(inj.begin(), inj.begin() + static_cast<std::ptrdiff_t>(std::min(want, inj.size())));
    for (std::size_t i = 0; chosen.size() < want; ++i) chosen.push_back(clean[i]);
    std::sort(chosen.begin(), chosen.end());

    std::map<std::string, Date> onset_of;
    for (const auto& m : out.manifest.injected) onset_of[m.athlete_id] = m.onset_date;
    std::uniform_real_distribution<double> lag(0.5, 4.0);
    std::uniform_int_distribution<int> years(2, 4);
    std::uniform_int_distribution<std::int32_t> any_day(spec.first_date.days(), spec.last_date.days());
    for (const auto a : chosen) {
      SanctionRecord s;
      s.athlete_id = detail::padded("A", a + 1, id_width);
      const auto it = onset_of.find(s.athlete_id);
      s.sanction_start = it != onset_of.end()
                             ? it->second.plus_days(static_cast<std::int32_t>(lag(rng) * 365.2425))
                             : Date(any_day(rng));
      s.sanction_end = s.sanction_start.plus_days(static_cast<std::int32_t>(years(rng) * 365.2425));
      s.source_note = it != onset_of.end() ? "synthetic: injected" : "synthetic: label without visible effect";
      out.sanctions.push_back(s);
      out.manifest.sanctioned.push_back(s.athlete_id);
    }
  }

  auto& m = out.manifest;
  m.seed = spec.seed;
  m.athletes = n;
  m.performances = out.rows.size();
  m.competitions = out.competitions.size();
  std::set<std::string> legal_athletes;
  for (const auto& r : out.rows)
    if (r.record.wind_legal) {
      ++m.legal_performances;
      legal_athletes.insert(r.record.athlete_id);
    }
  m.athletes_with_legal_rows = legal_athletes.size();
  return out;
}

inline nlohmann::json to_json(const Manifest& m) {
  nlohmann::json injected = nlohmann::json::array();
  for (const auto& a : m.injected)
    injected.push_back({{"athlete_id", a.athlete_id},
                        {"onset_date", a.onset_date.iso()},
                        {"onset_index", a.onset_index},
                        {"affected_performances", a.affected},
                        {"effect_seconds", a.effect_seconds}});
  return {{"seed", m.seed},
          {"counts",
           {{"athletes", m.athletes},
            {"performances", m.performances},
            {"competitions", m.competitions},
            {"sanctions", m.sanctioned.size()},
            {"injected", m.injected.size()},
            {"athletes_with_legal_rows", m.athletes_with_legal_rows},
            {"legal_performances", m.legal_performances}}},
          {"injected", std::move(injected)},
          {"sanctioned", m.sanctioned}};
}

struct RenderedFiles {
  std::string results;
  std::string competitions;
  std::string sanctions;
  std::string manifest;
};

/// Renders the four output files in the formats the loaders read.
inline RenderedFiles render(const GeneratedData& d) {
  RenderedFiles f;
  {
    std::string s;
    s.reserve(d.rows.size() * 96);
    std::vector<std::string> header(std::begin(RawResultRow::kColumns), std::end(RawResultRow::kColumns));
    s += csv::join(header) + "\n";
    char wind[16], reaction[16];
    for (const auto& row : d.rows) {
      const auto& p = row.record;
      if (p.wind_mps) {
        std::snprintf(wind, sizeof wind, "%+.1f", *p.wind_mps);
      } else {
        wind[0] = '\0';
      }
      if (p.reaction_time_s) {
        std::snprintf(reaction, sizeof reaction, "%.3f", *p.reaction_time_s);
      } else {
        reaction[0] = '\0';
      }
      s += csv::join({p.athlete_id, row.athlete_name, format_mark(p.centiseconds), p.date.iso(), wind, reaction,
                      std::string(to_string(p.round)), p.rank ? std::to_string(*p.rank) : "", p.competition_id,
                      p.event_code, row.country, row.venue});
      s += '\n';
    }
    f.results = std::move(s);
  }
  {
    std::string s = "competition_id,name,date,country,venue,level\n";
    for (const auto& c : d.competitions)
      s += csv::join({c.competition_id, c.name, c.date.iso(), c.country, c.venue, std::to_string(c.level)}) + "\n";
    f.competitions = std::move(s);
  }
  {
    std::string s = "athlete_id,start,end,note\n";
    for (const auto& x : d.sanctions)
      s += csv::join({x.athlete_id, x.sanction_start.iso(), x.sanction_end ? x.sanction_end->iso() : "",
                      x.source_note}) +
           "\n";
    f.sanctions = std::move(s);
  }
  f.manifest = to_json(d.manifest).dump(2) + "\n";
  return f;
}

/// Writes results.csv, competitions.csv, sanctions.csv and manifest.json.
inline void write_files(const GeneratedData& d, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto files = render(d);
  const auto put = [&](const char* name, const std::string& text) {
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw StorageError("cannot write " + (dir / name).string());
    out << text;
  };
  put("results.csv", files.results);
  put("competitions.csv", files.competitions);
  put("sanctions.csv", files.sanctions);
  put("manifest.json", files.manifest);
}

// ---------------------------------------------------------------------------
// Data drawn from the hierarchical trajectory model itself.

struct HierTruth {
  double mu_alpha = 11.0;
  double mu_beta = 0.0;
  double tau_alpha = 0.3;
  double tau_beta = 0.05;
  double sigma = 0.12;
};

/// Histories with y_ij = alpha_i + beta_i t_ij + N(0, sigma), t in years since
/// the athlete's first race; times rounded to centiseconds.
inline std::vector<AthleteHistory> model_histories(const HierTruth& truth, std::size_t athletes,
                                                   std::size_t per_athlete, std::uint64_t seed,
                                                   const std::string& event_code = "100m-men") {
  std::vector<AthleteHistory> out;
  const int width = detail::digits(athletes);
  for (std::size_t a = 0; a < athletes; ++a) {
    std::mt19937_64 rng(derive_seed(seed, 0xe0, a));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_int_distribution<std::int32_t> gap(10, 60);
    const double alpha = truth.mu_alpha + truth.tau_alpha * normal(rng);
    const double beta = truth.mu_beta + truth.tau_beta * normal(rng);
    AthleteHistory h;
    h.athlete_id = detail::padded("M", a + 1, width);
    h.event_code = event_code;
    Date d = Date::from_ymd(2012, 1, 1).plus_days(static_cast<std::int32_t>(a % 365));
    const Date origin = d;
    for (std::size_t j = 0; j < per_athlete; ++j) {
      PerformanceRecord p;
      p.athlete_id = h.athlete_id;
      p.competition_id = detail::padded("K", a * per_athlete + j + 1, 8);
      p.event_code = event_code;
      p.date = d;
      const double t = Date::years_between(origin, d);
      p.centiseconds = static_cast<std::int32_t>(std::llround((alpha + beta * t + truth.sigma * normal(rng)) * 100.0));
      p.round = Round::final;
      h.performances.push_back(std::move(p));
      d = d.plus_days(gap(rng));
    }
    out.push_back(std::move(h));
  }
  return out;
}

}  // namespace perfscreen::synth
