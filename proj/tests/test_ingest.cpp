#include "perfscreen/ingest.hpp"

#include <catch_amalgamated.hpp>

#include <random>
#include <sstream>

using namespace perfscreen;

namespace {

const Date kToday = Date::from_ymd(2025, 6, 30);

RawResultRow row(std::string mark, std::string wind = "") {
  RawResultRow r;
  r.athlete_id = "A1";
  r.athlete_name = "Test Runner";
  r.mark = std::move(mark);
  r.date = "2012-08-05";
  r.wind = std::move(wind);
  r.round = "final";
  r.competition_id = "C1";
  r.event_code = "100m-men";
  r.country = "jam";
  r.venue = "London";
  return r;
}

std::string results_header() {
  std::string h;
  for (const auto c : RawResultRow::kColumns) h += (h.empty() ? "" : ",") + std::string(c);
  return h + "\n";
}

}  // namespace

TEST_CASE("marks in all three layouts") {
  CHECK(parse_mark("9.58") == 9.58);
  CHECK(parse_mark("1:45.23") == Catch::Approx(105.23));
  CHECK(parse_mark_centiseconds("1:45.23") == 10523);
  CHECK(parse_mark_centiseconds("2:01:09.5") == (2 * 3600 + 60 + 9) * 100 + 50);
  CHECK(parse_mark_centiseconds(" 10.1 ") == 1010);
  CHECK(parse_mark_centiseconds("13") == 1300);
  for (const char* bad : {"DNF", "DQ", "DNS", "", "  ", "9.581", "1:5.00", "1:60.00", "9,58", "-9.58", "0.00", "1:2:3:4"})
    CHECK_THROWS_AS(parse_mark_centiseconds(bad), MarkUnparseable);
}

TEST_CASE("format_mark inverts parse_mark") {
  for (const std::int32_t cs : {958, 1000, 5999, 6000, 10523, 359999, 360000, 763950})
    CHECK(parse_mark_centiseconds(format_mark(cs)) == cs);
}

TEST_CASE("same-layout marks order lexicographically and numerically alike") {
  std::mt19937 rng(7);
  std::uniform_int_distribution<int> m(1, 9), s(0, 59), f(0, 99);
  for (int i = 0; i < 500; ++i) {
    char a[16], b[16];
    std::snprintf(a, sizeof a, "%d:%02d.%02d", m(rng), s(rng), f(rng));
    std::snprintf(b, sizeof b, "%d:%02d.%02d", m(rng), s(rng), f(rng));
    CHECK((std::string(a) < std::string(b)) == (parse_mark(a) < parse_mark(b)));
  }
}

TEST_CASE("wind legality boundary") {
  const auto over = normalize_row(row("10.01", "+2.1"), kToday).record;
  CHECK(over.wind_mps == 2.1);
  CHECK_FALSE(over.wind_legal);
  const auto at = normalize_row(row("10.01", "+2.0"), kToday).record;
  CHECK(at.wind_mps == 2.0);
  CHECK(at.wind_legal);
  const auto none = normalize_row(row("10.01"), kToday).record;
  CHECK_FALSE(none.wind_mps);
  CHECK(none.wind_legal);
  const auto head = normalize_row(row("10.01", "-3.4"), kToday).record;
  CHECK(head.wind_legal);
}

TEST_CASE("unparseable wind is kept as absent with a warning") {
  const auto n = normalize_row(row("10.01", "n/a"), kToday);
  CHECK(n.warnings.wind_unparseable);
  CHECK_FALSE(n.record.wind_mps);
  CHECK(n.record.wind_legal);
}

TEST_CASE("normalization of country, round and dates") {
  auto r = row("10.01");
  const auto n = normalize_row(r, kToday);
  CHECK(n.country == "JAM");
  CHECK_FALSE(n.warnings.country_unknown);
  CHECK(n.record.round == Round::final);

  r.country = "xyz";
  CHECK(normalize_row(r, kToday).warnings.country_unknown);
  CHECK(normalize_row(r, kToday).country == "XYZ");

  r.round = "repechage";
  CHECK(normalize_row(r, kToday).record.round == Round::unknown);

  r.date = "2012-08-05T21:00:00+01:00";
  CHECK(normalize_row(r, kToday).record.date == Date::from_ymd(2012, 8, 5));
  r.date = "1989-12-31";
  CHECK_THROWS_AS(normalize_row(r, kToday), DateUnparseable);
  r.date = "2025-07-01";
  CHECK_THROWS_AS(normalize_row(r, kToday), DateUnparseable);
  r.date = "05/08/2012";
  CHECK_THROWS_AS(normalize_row(r, kToday), DateUnparseable);

  auto missing = row("10.01");
  missing.athlete_id = " ";
  CHECK_THROWS_AS(normalize_row(missing, kToday), InvalidRow);
}

TEST_CASE("serialized rows normalize back to the same record") {
  std::mt19937 rng(3);
  std::uniform_int_distribution<int> cs(900, 80000), day(0, 12000);
  std::uniform_real_distribution<double> wind(-4.0, 4.0), rt(0.1, 0.3);
  for (int i = 0; i < 300; ++i) {
    auto r = row(format_mark(cs(rng)));
    r.date = Date::from_ymd(1991, 1, 1).plus_days(day(rng)).iso();
    if (i % 3) {
      char b[32];
      std::snprintf(b, sizeof b, "%+.1f", wind(rng));
      r.wind = b;
    }
    if (i % 4) r.reaction_time = std::to_string(rt(rng));
    if (i % 5) r.rank = std::to_string(1 + i % 8);
    const auto first = normalize_row(r, kToday);
    const auto second = normalize_row(to_raw(first), kToday);
    CHECK(second.record == first.record);
    CHECK(second.country == first.country);
  }
}

TEST_CASE("results loader counts every row exactly once") {
  std::string text = results_header();
  text += "A1,Ann,10.01,2012-08-05,+1.0,0.150,final,1,C1,100m-men,USA,Rome\n";
  text += "A2,Bea,DNF,2012-08-05,+1.0,,final,,C1,100m-men,USA,Rome\n";
  text += "A3,Cy,10.20,2012-13-05,,,heat,,C1,100m-men,USA,Rome\n";
  text += "A4,Di,10.30,2012-08-05,,,heat,,C1,100m-men\n";
  text += "\n";
  text += "A5,Ed,10.40,2012-08-05,windy,x,semi,0,C1,100m-men,ZZZ,Rome\n";
  std::istringstream in(text);
  const auto b = load_results(in, kToday);
  CHECK(b.stats.input_rows == 5);
  CHECK(b.stats.accepted + b.stats.skipped == b.stats.input_rows);
  CHECK(b.stats.accepted == 2);
  CHECK(b.stats.skip_reasons.at("mark_unparseable") == 1);
  CHECK(b.stats.skip_reasons.at("date_unparseable") == 1);
  CHECK(b.stats.skip_reasons.at("column_count") == 1);
  CHECK(b.stats.warnings.at("wind_unparseable") == 1);
  CHECK(b.stats.warnings.at("reaction_unparseable") == 1);
  CHECK(b.stats.warnings.at("rank_unparseable") == 1);
  CHECK(b.stats.warnings.at("country_unknown") == 1);
  CHECK(b.rows[1].record.round == Round::semifinal);
}

TEST_CASE("results loader rejects a wrong header") {
  std::istringstream in("athlete_id,mark,date\nA1,10.0,2012-01-01\n");
  CHECK_THROWS_AS(load_results(in, kToday), MissingColumns);
}

TEST_CASE("sanction loader") {
  SECTION("sixty clean rows give sixty records") {
    std::string text = "athlete_id,start,end,note\n";
    for (int i = 0; i < 60; ++i) text += "S" + std::to_string(i) + ",2015-01-01,2017-01-01,test\n";
    std::istringstream in(text);
    const auto b = load_sanctions(in);
    CHECK(b.records.size() == 60);
    CHECK(b.stats.skipped == 0);
  }
  SECTION("header only") {
    std::istringstream in("athlete_id,start,end,note\n");
    CHECK(load_sanctions(in).records.empty());
  }
  SECTION("end before start is skipped and counted") {
    std::istringstream in("athlete_id,start,end\nX,2016-01-01,2015-01-01\nY,2016-01-01,\n");
    const auto b = load_sanctions(in);
    REQUIRE(b.records.size() == 1);
    CHECK(b.records[0].athlete_id == "Y");
    CHECK_FALSE(b.records[0].sanction_end);
    CHECK(b.stats.skip_reasons.at("end_before_start") == 1);
  }
  SECTION("duplicates keep the longer interval") {
    std::istringstream in(
        "athlete_id,start,end\nX,2016-01-01,2017-01-01\nX,2016-01-01,2020-01-01\nX,2016-01-01,2018-01-01\n"
        "Y,2016-01-01,\nY,2016-01-01,2030-01-01\n");
    const auto b = load_sanctions(in);
    REQUIRE(b.records.size() == 2);
    CHECK(b.records[0].sanction_end == Date::from_ymd(2020, 1, 1));
    CHECK_FALSE(b.records[1].sanction_end);
    CHECK(b.stats.warnings.at("duplicate_sanction") == 3);
  }
  SECTION("missing columns are fatal") {
    std::istringstream in("athlete_id,start\nX,2016-01-01\n");
    CHECK_THROWS_AS(load_sanctions(in), MissingColumns);
  }
}

TEST_CASE("file kind sniffing") {
  std::istringstream r(results_header());
  CHECK(detect_file_kind(r) == FileKind::results);
  std::istringstream s("athlete_id,start,end,note\n");
  CHECK(detect_file_kind(s) == FileKind::sanctions);
  std::istringstream c("competition_id,name,date,country,venue,level\n");
  CHECK(detect_file_kind(c) == FileKind::competitions);
  std::istringstream u("foo,bar\n");
  CHECK(detect_file_kind(u) == FileKind::unknown);
}

TEST_CASE("competition loader reads levels") {
  std::istringstream in("competition_id,name,date,country,venue,level\nC1,Worlds,2015-08-23,chn,Beijing,3\nC2,,bad,,,\n");
  const auto b = load_competitions(in);
  REQUIRE(b.records.size() == 1);
  CHECK(b.records[0].level == 3);
  CHECK(b.records[0].country == "CHN");
  CHECK(b.stats.skipped == 1);
}
