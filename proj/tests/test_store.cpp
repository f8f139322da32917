#include "perfscreen/detect/registry.hpp"
#include "perfscreen/store.hpp"
#include "perfscreen/synth/generator.hpp"

#include <catch_amalgamated.hpp>

#include <filesystem>
#include <thread>

using namespace perfscreen;

namespace {

PerformanceRecord perf(std::string athlete, std::string comp, int cs, Date d, std::optional<double> wind = {}) {
  PerformanceRecord p;
  p.athlete_id = std::move(athlete);
  p.competition_id = std::move(comp);
  p.event_code = "100m-men";
  p.centiseconds = cs;
  p.date = d;
  p.wind_mps = wind;
  p.wind_legal = !(wind && *wind > 2.0);
  p.round = Round::final;
  return p;
}

std::vector<PerformanceRecord> ten_rows() {
  std::vector<PerformanceRecord> out;
  for (int i = 0; i < 10; ++i)
    out.push_back(perf("A" + std::to_string(i % 3), "C" + std::to_string(i), 1000 + i,
                       Date::from_ymd(2015, 1, 1).plus_days(i * 20), i == 4 ? std::optional(2.4) : std::nullopt));
  return out;
}

struct TempDb {
  std::filesystem::path path = std::filesystem::temp_directory_path() /
                               ("perfscreen-store-" + std::to_string(::getpid()) + ".db");
  TempDb() { clean(); }
  ~TempDb() { clean(); }
  void clean() const {
    for (const char* suffix : {"", "-wal", "-shm"}) std::filesystem::remove(path.string() + suffix);
  }
};

}  // namespace

TEST_CASE("re-ingesting the same rows adds nothing") {
  Store s(":memory:");
  const auto rows = ten_rows();
  CHECK(s.upsert_performances(rows) == 10);
  const auto gen = s.generation();
  CHECK(s.upsert_performances(rows) == 0);
  CHECK(s.performance_count() == 10);
  CHECK(s.generation() == gen);
  CHECK(s.dangling_performances() == 0);
}

TEST_CASE("an empty store answers a slice with no histories") {
  Store s(":memory:");
  CHECK(s.query_slice(EventSlice::parse("100m-men")).empty());
  CHECK(s.list_slices().empty());
  CHECK_FALSE(s.has_event("100m-men"));
}

TEST_CASE("slices filter wind and dates and order each history") {
  Store s(":memory:");
  s.upsert_performances(ten_rows());
  const auto legal = s.query_slice(EventSlice::parse("100m-men"));
  const auto all = s.query_slice(EventSlice::parse("100m-men:1990-01-01:2030-01-01:all"));
  std::size_t nl = 0, na = 0;
  for (const auto& h : legal) {
    nl += h.size();
    CHECK_NOTHROW(h.validate());
    for (const auto& p : h.performances) CHECK(p.wind_legal);
  }
  for (const auto& h : all) na += h.size();
  CHECK(nl == 9);
  CHECK(na == 10);
  REQUIRE(legal.size() == 3);
  CHECK(legal[0].athlete_id == "A0");

  const auto window = s.query_slice(EventSlice::parse("100m-men:2015-01-01:2015-02-15:all"));
  std::size_t nw = 0;
  for (const auto& h : window) nw += h.size();
  CHECK(nw == 3);

  const auto info = s.list_slices();
  REQUIRE(info.size() == 1);
  CHECK(info[0].athletes == 3);
  CHECK(info[0].performances == 10);
  CHECK(info[0].key == "100m-men:1990-01-01:9999-12-31:legal");
}

TEST_CASE("competition metadata survives results-derived stubs") {
  Store s(":memory:");
  CompetitionRecord c{"C1", "Worlds", Date::from_ymd(2015, 1, 21), "CHN", "Beijing", 3, {"100m-men"}};
  s.upsert_competitions(std::vector{c});
  CompetitionRecord stub{"C1", "C1", Date::from_ymd(2015, 1, 21), "", "", 0, {"100m-men"}};
  CHECK(s.insert_missing_competitions(std::vector{stub}) == 0);
  s.upsert_performances(ten_rows());
  const auto got = s.competition("C1");
  REQUIRE(got);
  CHECK(got->level == 3);
  CHECK(got->name == "Worlds");
  for (const auto& h : s.query_slice(EventSlice::parse("100m-men:1990-01-01:2030-01-01:all")))
    for (const auto& p : h.performances) CHECK(p.competition_level == (p.competition_id == "C1" ? 3 : 0));
}

TEST_CASE("sanction upsert keeps the longer interval") {
  Store s(":memory:");
  const Date start = Date::from_ymd(2016, 1, 1);
  s.upsert_sanctions(std::vector{SanctionRecord{"X", start, Date::from_ymd(2017, 1, 1), "a"}});
  s.upsert_sanctions(std::vector{SanctionRecord{"X", start, Date::from_ymd(2016, 6, 1), "b"}});
  REQUIRE(s.sanctions().size() == 1);
  CHECK(s.sanctions()[0].sanction_end == Date::from_ymd(2017, 1, 1));
  s.upsert_sanctions(std::vector{SanctionRecord{"X", start, std::nullopt, "c"}});
  CHECK_FALSE(s.sanctions()[0].sanction_end);
}

TEST_CASE("materialized detections are scoped to the data generation") {
  Store s(":memory:");
  s.upsert_performances(ten_rows());
  const auto slice = EventSlice::parse("100m-men");
  const auto hist = s.query_slice(slice);
  const DetectorConfig cfg;
  const auto hash = config_version(cfg);
  const auto r = run_detector("zscore", hist, cfg);
  s.save_detection(slice.key(), hash, r);

  const auto back = s.load_detection(slice.key(), "zscore", hash);
  REQUIRE(back);
  CHECK(back->entries == r.entries);
  CHECK(s.materialized_methods(slice.key(), hash) == std::vector<std::string>{"zscore"});
  CHECK_FALSE(s.load_detection(slice.key(), "zscore", "other"));

  s.upsert_performances(std::vector{perf("A9", "C99", 1111, Date::from_ymd(2016, 1, 1))});
  CHECK_FALSE(s.load_detection(slice.key(), "zscore", hash));
  CHECK(s.materialized_methods(slice.key(), hash).empty());
}

TEST_CASE("screen pages are byte-identical and keyed by config and data") {
  Store s(":memory:");
  synth::GeneratorSpec spec;
  spec.n_athletes = 200;
  spec.injection.fraction_doped = 0.05;
  const auto data = synth::generate(spec);
  s.upsert_performances(data.records());
  s.upsert_sanctions(data.sanctions);
  const auto slice = EventSlice::parse("100m-men");
  const auto hist = s.query_slice(slice);
  DetectorConfig cfg;
  const auto hash = config_version(cfg);

  CHECK_THROWS_AS(s.cached_screen(slice.key(), "zscore", hash, std::nullopt), NotMaterialized);
  s.save_detection(slice.key(), hash, run_detector("zscore", hist, cfg));
  const auto a = s.cached_screen(slice.key(), "zscore", hash, std::nullopt);
  const auto b = s.cached_screen(slice.key(), "zscore", hash, std::nullopt);
  CHECK(*a == *b);
  CHECK(s.page_cache_hits() >= 1);

  cfg.z_threshold = 2.0;
  const auto hash2 = config_version(cfg);
  CHECK(hash2 != hash);
  CHECK_THROWS_AS(s.cached_screen(slice.key(), "zscore", hash2, std::nullopt), NotMaterialized);
  s.save_detection(slice.key(), hash2, run_detector("zscore", hist, cfg));
  CHECK(*s.cached_screen(slice.key(), "zscore", hash2, std::nullopt) != *a);
}

TEST_CASE("file-backed store persists across reopen and serves concurrent readers") {
  TempDb db;
  const auto rows = ten_rows();
  std::uint64_t gen = 0;
  {
    Store s(db.path.string());
    s.upsert_performances(rows);
    gen = s.generation();
  }
  Store s(db.path.string());
  CHECK(s.performance_count() == 10);
  CHECK(s.generation() == gen);

  std::vector<std::thread> readers;
  std::atomic<int> ok{0};
  for (int t = 0; t < 4; ++t)
    readers.emplace_back([&] {
      for (int i = 0; i < 20; ++i)
        if (s.query_slice(EventSlice::parse("100m-men")).size() >= 3) ++ok;
    });
  for (int i = 0; i < 20; ++i)
    s.upsert_performances(std::vector{perf("B" + std::to_string(i), "D" + std::to_string(i), 1050, Date::from_ymd(2018, 1, 1))});
  for (auto& r : readers) r.join();
  CHECK(ok == 80);
  CHECK(s.performance_count() == 30);
}
