#include "perfscreen/detect/registry.hpp"
#include "perfscreen/synth/generator.hpp"
#include "perfscreen/synth/oracle.hpp"
#include "support/histories.hpp"

#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <unistd.h>

using namespace perfscreen;

namespace {

synth::GeneratorSpec small_spec(std::uint64_t seed = 3) {
  synth::GeneratorSpec s;
  s.n_athletes = 1000;
  s.seed = seed;
  return s;
}

std::map<std::string, std::vector<double>> times_by_athlete(const synth::GeneratedData& d) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& r : d.rows) out[r.record.athlete_id].push_back(r.record.time_seconds());
  return out;
}

double mean(std::span<const double> v) {
  double s = 0.0;
  for (const double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

TEST_CASE("no injection without a doped fraction") {
  const auto d = synth::generate(small_spec());
  CHECK(d.manifest.injected.empty());
  CHECK(d.sanctions.empty());
  CHECK(d.manifest.athletes == 1000);
  CHECK(d.manifest.performances == d.rows.size());
}

TEST_CASE("full-scale spec emits exact counts") {
  synth::GeneratorSpec s;
  s.n_athletes = 31'604;
  s.total_performances = 381'447;
  s.sanctioned_count = 25;
  s.injection.fraction_doped = 0.001;
  s.seed = 2024;
  const auto d = synth::generate(s);
  CHECK(d.manifest.athletes == 31'604);
  CHECK(d.manifest.performances == 381'447);
  CHECK(d.sanctions.size() == 25);
  CHECK(d.manifest.injected.size() == 32);
  std::set<std::string> athletes;
  for (const auto& r : d.rows) athletes.insert(r.record.athlete_id);
  CHECK(athletes.size() == 31'604);
  // every sanctioned athlete is injected while injected ones remain
  const auto inj = d.injected_ids();
  for (const auto& id : d.manifest.sanctioned) CHECK(inj.contains(id));
  // median career length in the 6-8 range
  std::vector<std::size_t> counts;
  std::map<std::string, std::size_t> per;
  for (const auto& r : d.rows) ++per[r.record.athlete_id];
  for (const auto& [_, c] : per) counts.push_back(c);
  std::nth_element(counts.begin(), counts.begin() + counts.size() / 2, counts.end());
  CHECK(counts[counts.size() / 2] >= 6);
  CHECK(counts[counts.size() / 2] <= 8);
}

TEST_CASE("same seed renders byte-identical files") {
  auto s = small_spec(9);
  s.injection.fraction_doped = 0.02;
  const auto a = synth::render(synth::generate(s));
  const auto b = synth::render(synth::generate(s));
  CHECK(a.results == b.results);
  CHECK(a.competitions == b.competitions);
  CHECK(a.sanctions == b.sanctions);
  CHECK(a.manifest == b.manifest);
  s.seed = 10;
  CHECK(synth::render(synth::generate(s)).results != a.results);
}

TEST_CASE("injected effect is a step down after onset") {
  SECTION("noise-free careers shift by the effect exactly") {
    auto s = small_spec(4);
    s.injection.fraction_doped = 0.05;
    s.within_sd = 0.0;
    s.slope_sd = 0.0;
    s.wind_effect = 0.0;
    s.reaction_effect = 0.0;
    const auto d = synth::generate(s);
    REQUIRE(d.manifest.injected.size() == 50);
    const auto times = times_by_athlete(d);
    for (const auto& m : d.manifest.injected) {
      const auto& t = times.at(m.athlete_id);
      REQUIRE(m.onset_index >= 1);
      REQUIRE(m.onset_index < t.size());
      const double pre = mean(std::span(t).first(m.onset_index));
      const double post = mean(std::span(t).subspan(m.onset_index));
      CHECK(pre - post == Catch::Approx(0.4).margin(0.0051));
      CHECK(m.affected == t.size() - m.onset_index);
    }
  }
  SECTION("with default noise the average drop is at least 0.8 of the effect") {
    auto s = small_spec(5);
    s.n_athletes = 4000;
    s.injection.fraction_doped = 0.1;
    const auto d = synth::generate(s);
    const auto times = times_by_athlete(d);
    double drop = 0.0;
    for (const auto& m : d.manifest.injected) {
      const auto& t = times.at(m.athlete_id);
      drop += mean(std::span(t).first(m.onset_index)) - mean(std::span(t).subspan(m.onset_index));
    }
    drop /= static_cast<double>(d.manifest.injected.size());
    CHECK(drop >= 0.8 * 0.4);
    CHECK(drop <= 1.2 * 0.4);
  }
  SECTION("last_k onset affects only the trailing races") {
    auto s = small_spec(6);
    s.injection.fraction_doped = 0.05;
    s.injection.onset = synth::OnsetPolicy::last_k;
    s.injection.last_k = 2;
    const auto d = synth::generate(s);
    for (const auto& m : d.manifest.injected) CHECK(m.affected == 2);
  }
}

TEST_CASE("within-athlete spread matches the configured sd") {
  auto s = small_spec(7);
  s.slope_sd = 0.0;
  s.wind_effect = 0.0;
  s.reaction_effect = 0.0;
  const auto d = synth::generate(s);
  double ss = 0.0, dof = 0.0;
  for (const auto& [_, t] : times_by_athlete(d)) {
    if (t.size() < 2) continue;
    const double m = mean(t);
    for (const double x : t) ss += (x - m) * (x - m);
    dof += static_cast<double>(t.size() - 1);
  }
  const double sd = std::sqrt(ss / dof);
  CHECK(std::abs(sd - 0.12) < 0.012);
}

TEST_CASE("generated rows respect their ranges") {
  auto s = small_spec(8);
  s.injection.fraction_doped = 0.01;
  const auto d = synth::generate(s);
  std::size_t wind_missing = 0;
  for (const auto& r : d.rows) {
    const auto& p = r.record;
    CHECK(p.date >= s.first_date);
    CHECK(p.date <= s.last_date);
    if (!p.wind_mps) {
      ++wind_missing;
      continue;
    }
    CHECK(*p.wind_mps >= -3.0);
    CHECK(*p.wind_mps <= 4.0);
    CHECK(p.wind_legal == (*p.wind_mps <= 2.0));
  }
  const double rate = static_cast<double>(wind_missing) / static_cast<double>(d.rows.size());
  CHECK(rate > 0.01);
  CHECK(rate < 0.03);
}

TEST_CASE("written files load back through ingest") {
  auto s = small_spec(12);
  s.injection.fraction_doped = 0.02;
  const auto d = synth::generate(s);
  const auto dir = std::filesystem::temp_directory_path() / ("perfscreen_synth_" + std::to_string(::getpid()));
  synth::write_files(d, dir);
  std::ifstream results(dir / "results.csv"), sanctions(dir / "sanctions.csv"), comps(dir / "competitions.csv");
  const auto rb = load_results(results, Date::from_ymd(2025, 6, 30));
  CHECK(rb.stats.accepted == d.rows.size());
  CHECK(rb.stats.skipped == 0);
  for (std::size_t i = 0; i < d.rows.size(); ++i) {
    auto want = d.rows[i].record;
    want.competition_level = 0;  // joined from competitions.csv by the store
    CHECK(rb.rows[i].record == want);
  }
  CHECK(load_sanctions(sanctions).records == d.sanctions);
  CHECK(load_competitions(comps).records.size() == d.competitions.size());
  std::ifstream manifest(dir / "manifest.json");
  const auto j = nlohmann::json::parse(manifest);
  CHECK(j["counts"]["injected"] == 20);
  CHECK(j["counts"]["sanctions"] == 8);
  std::filesystem::remove_all(dir);
}

TEST_CASE("generator spec parsing") {
  const auto s = synth::spec_from_json(nlohmann::json::parse(
      R"({"n_athletes": 50, "seed": 4, "first_date": "2015-01-01",
          "injection": {"fraction_doped": 0.1, "onset": "last_k", "last_k": 3}})"));
  CHECK(s.n_athletes == 50);
  CHECK(s.first_date == Date::from_ymd(2015, 1, 1));
  CHECK(s.injection.onset == synth::OnsetPolicy::last_k);
  CHECK(s.injection.last_k == 3);
  CHECK(s.within_sd == 0.12);

  const auto bad = [](const char* text) { return synth::spec_from_json(nlohmann::json::parse(text)); };
  CHECK_THROWS_AS(bad(R"({"n_athlete": 5})"), InvalidConfig);
  CHECK_THROWS_AS(bad(R"({"wind_missing_rate": 1.5})"), InvalidConfig);
  CHECK_THROWS_AS(bad(R"({"injection": {"effect_seconds": 0}})"), InvalidConfig);
  CHECK_THROWS_AS(bad(R"({"injection": {"onset": "sometime"}})"), InvalidConfig);
  CHECK_THROWS_AS(bad(R"({"first_date": "June"})"), InvalidConfig);
  CHECK_THROWS_AS(bad(R"({"n_athletes": "many"})"), InvalidConfig);
}

TEST_CASE("oracle agrees with the detectors") {
  const std::pair<synth::OracleRule, const char*> rules[] = {{synth::OracleRule::zscore, "zscore"},
                                                             {synth::OracleRule::mad, "mad"},
                                                             {synth::OracleRule::iqr, "iqr"},
                                                             {synth::OracleRule::excess, "excess_performance"}};
  DetectorConfig cfg;

  SECTION("random 50-athlete population") {
    for (unsigned seed = 1; seed <= 20; ++seed) {
      auto hist = testing::population(50, 12, seed);
      std::mt19937_64 rng(seed);
      // a few planted outliers in both directions
      for (int k = 0; k < 5; ++k) {
        auto& p = hist[rng() % hist.size()].performances[rng() % 12];
        p.centiseconds += (k % 2 ? 60 : -60);
      }
      std::vector<PerformanceRecord> recs;
      for (const auto& h : hist) recs.insert(recs.end(), h.performances.begin(), h.performances.end());
      for (const auto& [rule, method] : rules) {
        INFO(method << " seed " << seed);
        CHECK(synth::oracle_flags(recs, rule, cfg) == synth::flag_keys(run_detector(method, hist, cfg)));
      }
    }
  }

  SECTION("generated 1000-athlete slice") {
    auto s = small_spec(13);
    s.injection.fraction_doped = 0.05;
    const auto d = synth::generate(s);
    const auto recs = d.records();
    const auto hist = d.histories();
    std::size_t total = 0;
    for (const auto& [rule, method] : rules) {
      INFO(method);
      const auto oracle = synth::oracle_flags(recs, rule, cfg);
      CHECK(oracle == synth::flag_keys(run_detector(method, hist, cfg)));
      total += oracle.size();
    }
    CHECK(total > 0);
  }

  SECTION("constant athlete gives no flags anywhere") {
    const std::vector hist{testing::history("c", std::vector<double>(8, 10.5))};
    const auto recs = hist[0].performances;
    for (const auto& [rule, method] : rules) {
      CHECK(synth::oracle_flags(recs, rule, cfg).empty());
      CHECK(run_detector(method, hist, cfg).flagged_performances() == 0);
    }
  }

  SECTION("tightened thresholds are honoured") {
    DetectorConfig tight;
    tight.z_threshold = 1.5;
    tight.mad_threshold = 2.0;
    tight.iqr_multiplier = 0.5;
    tight.excess_threshold = -1.25;
    const auto hist = testing::population(50, 12, 99);
    std::vector<PerformanceRecord> recs;
    for (const auto& h : hist) recs.insert(recs.end(), h.performances.begin(), h.performances.end());
    for (const auto& [rule, method] : rules) {
      INFO(method);
      const auto oracle = synth::oracle_flags(recs, rule, tight);
      CHECK_FALSE(oracle.empty());
      CHECK(oracle == synth::flag_keys(run_detector(method, hist, tight)));
    }
  }
}

TEST_CASE("model histories follow the trajectory model") {
  const auto h = synth::model_histories(synth::HierTruth{}, 2000, 10, 4);
  REQUIRE(h.size() == 2000);
  double sum = 0.0;
  for (const auto& a : h) {
    CHECK(a.size() == 10);
    sum += a.performances.front().time_seconds();
  }
  CHECK(sum / 2000.0 == Catch::Approx(11.0).margin(0.03));  // sd of the mean ~0.007
  CHECK(h[0].athlete_id == "M00001");
}
