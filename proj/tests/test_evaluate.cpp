#include "perfscreen/evaluate.hpp"
#include "perfscreen/ingest.hpp"

#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <random>

using namespace perfscreen;

namespace {

std::string aid(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "A%05zu", i);
  return buf;
}

/// One entry per athlete in `all`; athletes in `flagged` carry the given
/// severity (larger = more anomalous), everyone else is scored and clean.
DetectionResult make_result(const std::string& method, std::size_t all,
                            const std::vector<std::pair<std::size_t, double>>& flagged) {
  DetectionResult r;
  r.method_id = method;
  std::map<std::size_t, double> sev(flagged.begin(), flagged.end());
  for (std::size_t i = 0; i < all; ++i) {
    DetectionEntry e;
    e.ref.athlete_id = aid(i);
    e.ref.date = Date::from_ymd(2020, 1, 1);
    if (const auto it = sev.find(i); it != sev.end()) {
      e.flagged = true;
      e.severity = it->second;
      e.score = -it->second;
      e.explanation = method + " flag " + aid(i);
    }
    r.entries.push_back(std::move(e));
  }
  r.finalize();
  return r;
}

std::vector<SanctionRecord> sanctions_for(const std::vector<std::size_t>& ids) {
  std::vector<SanctionRecord> out;
  for (const auto i : ids) out.push_back({aid(i), Date::from_ymd(2019, 6, 1), Date::from_ymd(2021, 6, 1), "test"});
  return out;
}

double round3(double x) { return std::round(x * 1000.0) / 1000.0; }

struct TableRow {
  const char* method;
  std::size_t tp, fp;
  double p, r, f1;
};

// Athlete-level benchmark on the 100 m slice: 31,604 athletes, 25 sanctioned.
constexpr TableRow kTable[] = {
    {"excess_performance", 2, 224, 0.009, 0.080, 0.016},
    {"bayes_hier", 4, 707, 0.006, 0.160, 0.011},
    {"iforest", 6, 1848, 0.003, 0.240, 0.006},
    {"iqr", 0, 5, 0.000, 0.000, 0.000},
    {"copula", 0, 16, 0.000, 0.000, 0.000},
    {"gbt_residual", 0, 53, 0.000, 0.000, 0.000},
    {"mad", 0, 0, 0.000, 0.000, 0.000},
    {"zscore", 0, 0, 0.000, 0.000, 0.000},
};

}  // namespace

TEST_CASE("metric arithmetic reproduces the benchmark rows") {
  for (const auto& row : kTable) {
    DYNAMIC_SECTION(row.method) {
      const auto m = eval::metrics_from_counts(row.tp, row.fp, 25);
      CHECK(round3(m.precision) == row.p);
      CHECK(round3(m.recall) == row.r);
      CHECK(round3(m.f1) == row.f1);
    }
  }
}

TEST_CASE("zero conventions") {
  const auto none = eval::metrics_from_counts(0, 0, 0);
  CHECK(none.precision == 0.0);
  CHECK(none.recall == 0.0);
  CHECK(none.f1 == 0.0);
  const auto no_sanctions = eval::metrics_from_counts(0, 10, 0);
  CHECK(no_sanctions.precision == 0.0);
  CHECK(no_sanctions.recall == 0.0);
  const auto perfect = eval::metrics_from_counts(5, 0, 5);
  CHECK(perfect.f1 == 1.0);
}

TEST_CASE("full-size benchmark reproduces every row through evaluate_methods") {
  constexpr std::size_t kAthletes = 31'604;
  std::vector<std::size_t> sanctioned;
  for (std::size_t i = 0; i < 25; ++i) sanctioned.push_back(1000 * i + 7);
  const auto sanctions = sanctions_for(sanctioned);

  std::vector<DetectionResult> results;
  for (const auto& row : kTable) {
    std::vector<std::pair<std::size_t, double>> flags;
    // the baseline's two hits rank 1st and 152nd; other methods rank them last
    for (std::size_t k = 0; k < row.tp; ++k) {
      const double sev = std::string_view(row.method) == "excess_performance" ? (k == 0 ? 2e6 : 1e6 - 149.5) : -1.0 - k;
      flags.emplace_back(sanctioned[k], sev);
    }
    std::size_t next = 1;
    for (std::size_t k = 0; k < row.fp; ++k) {
      while (next % 1000 == 7) ++next;
      flags.emplace_back(next, 1e6 - static_cast<double>(k));
      ++next;
    }
    results.push_back(make_result(row.method, kAthletes, flags));
  }
  const auto rep = eval::evaluate_methods(results, sanctions, "100m-men");
  CHECK(rep.athlete_count == kAthletes);
  CHECK(rep.sanctioned_count == 25);
  REQUIRE(rep.methods.size() == std::size(kTable));
  for (std::size_t i = 0; i < std::size(kTable); ++i) {
    const auto& m = rep.methods[i];
    const auto& row = kTable[i];
    INFO(row.method);
    CHECK(m.true_positives == row.tp);
    CHECK(m.false_positives == row.fp);
    CHECK(m.true_positives + m.false_positives == m.flagged_athletes);
    CHECK(round3(m.precision) == row.p);
    CHECK(round3(m.recall) == row.r);
    CHECK(round3(m.f1) == row.f1);
  }
  CHECK(rep.methods[0].precision_at_k.at(200) == Catch::Approx(0.010));
  CHECK(rep.methods[2].precision_at_k.at(200) == 0.0);

  const auto table = eval::format_table(rep);
  CHECK(table.find("31604 athletes, 25 sanctioned") != std::string::npos);
  CHECK(table.find(" 0.009  0.080  0.016   0.010      2     224") != std::string::npos);
  const auto j = eval::to_json(rep);
  CHECK(j["methods"][1]["true_positives"] == 4);
  CHECK(j["methods"][0]["precision_at_k"]["200"] == Catch::Approx(0.01));
}

TEST_CASE("precision at k") {
  const auto s = sanctions_for({3});
  SECTION("top athlete sanctioned") {
    const auto r = make_result("m", 10, {{3, 5.0}, {1, 4.0}});
    CHECK(eval::precision_at_k(r, eval::SanctionIndex(s), 1) == 1.0);
    CHECK(eval::precision_at_k(r, eval::SanctionIndex(s), 2) == 0.5);
  }
  SECTION("fewer flagged than k keeps k as the denominator") {
    const auto r = make_result("m", 10, {{3, 5.0}});
    CHECK(eval::precision_at_k(r, eval::SanctionIndex(s), 200) == Catch::Approx(1.0 / 200));
  }
  SECTION("nothing flagged") {
    const auto r = make_result("m", 10, {});
    CHECK(eval::precision_at_k(r, eval::SanctionIndex(s), 200) == 0.0);
  }
  SECTION("k of zero is rejected") {
    const auto r = make_result("m", 10, {});
    CHECK_THROWS_AS(eval::precision_at_k(r, eval::SanctionIndex(s), 0), PreconditionError);
  }
  SECTION("non-increasing in k once every sanctioned athlete is ranked") {
    std::vector<std::pair<std::size_t, double>> flags;
    for (std::size_t i = 0; i < 50; ++i) flags.emplace_back(i, 100.0 - i);
    const auto r = make_result("m", 60, flags);
    const eval::SanctionIndex idx(sanctions_for({0, 2, 5, 9}));
    double prev = 1.0;
    for (std::size_t k = 10; k <= 60; ++k) {
      const double p = eval::precision_at_k(r, idx, k);
      CHECK(p <= prev);
      prev = p;
    }
  }
  SECTION("athlete ranked by its most anomalous performance") {
    auto r = make_result("m", 3, {{0, 1.0}, {1, 2.0}});
    DetectionEntry extra;
    extra.ref.athlete_id = aid(0);
    extra.flagged = true;
    extra.severity = 9.0;
    r.entries.push_back(extra);
    r.finalize();
    const auto ranked = eval::rank_flagged_athletes(r);
    REQUIRE(ranked.size() == 2);
    CHECK(ranked[0].athlete_id == aid(0));
    CHECK(ranked[0].flagged_performances == 2);
    CHECK(ranked[0].severity == 9.0);
  }
}

TEST_CASE("sanction matching ignores dates unless a window is requested") {
  auto r = make_result("m", 5, {{1, 3.0}});
  r.entries[1].ref.date = Date::from_ymd(2005, 1, 1);
  const std::vector<SanctionRecord> s = {{aid(1), Date::from_ymd(2020, 1, 1), Date::from_ymd(2022, 1, 1), ""}};
  std::vector<DetectionResult> rs{r};
  CHECK(eval::evaluate_methods(rs, s, "x").methods[0].true_positives == 1);
  eval::EvaluationOptions opt;
  opt.date_window = true;
  CHECK(eval::evaluate_methods(rs, s, "x", opt).methods[0].true_positives == 0);
  rs[0].entries[1].ref.date = Date::from_ymd(2015, 1, 1);  // within 8 years before the start
  CHECK(eval::evaluate_methods(rs, s, "x", opt).methods[0].true_positives == 1);
}

TEST_CASE("consensus ordering and filters") {
  const auto sanctions = sanctions_for({2});
  const std::vector<DetectionResult> results = {
      make_result("zscore", 10, {{0, 5.0}, {1, 4.0}, {2, 3.0}}),
      make_result("iqr", 10, {{1, 2.0}, {2, 3.0}}),
      make_result("mad", 10, {{2, 1.0}, {3, 9.0}}),
      make_result("copula", 10, {{3, 1.0}, {9, 2.0}}),
  };
  const auto c = eval::consensus(results, sanctions);
  REQUIRE(c.size() == 3);
  CHECK(c[0].athlete_id == aid(2));  // three methods first
  CHECK(c[0].method_count == 3);
  CHECK(c[0].is_sanctioned);
  CHECK(c[0].methods_flagging == std::set<std::string>{"iqr", "mad", "zscore"});
  // two-method athletes by best normalized rank: A00003 is first for mad (1/2),
  // A00001 is second for both zscore (2/3) and iqr (2/2)
  CHECK(c[1].athlete_id == aid(3));
  CHECK(c[2].athlete_id == aid(1));
  for (const auto& e : c) {
    CHECK(e.method_count == e.methods_flagging.size());
    CHECK(e.method_count >= 2);
    CHECK(e.athlete_id != aid(0));  // single method only
  }
  CHECK(c[0].top_scores.at("iqr").rank == 1);

  eval::ConsensusOptions only_sanctioned;
  only_sanctioned.sanctioned = true;
  CHECK(eval::consensus(results, sanctions, only_sanctioned).size() == 1);
  eval::ConsensusOptions clean;
  clean.sanctioned = false;
  CHECK(eval::consensus(results, sanctions, clean).size() == 2);
  eval::ConsensusOptions three;
  three.min_methods = 3;
  CHECK(eval::consensus(results, sanctions, three).size() == 1);
  eval::ConsensusOptions subset;
  subset.methods = {"zscore", "iqr"};
  const auto sub = eval::consensus(results, sanctions, subset);
  REQUIRE(sub.size() == 2);
  CHECK(sub[0].athlete_id == aid(2));  // rank 1 for iqr
  CHECK(sub[1].athlete_id == aid(1));

  CHECK_THROWS_AS(eval::consensus(std::span(results).first(1), sanctions), PreconditionError);
}

TEST_CASE("consensus depends only on flag sets, not result order") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<DetectionResult> results;
  for (const char* m : {"a", "b", "c", "d", "e"}) {
    std::vector<std::pair<std::size_t, double>> flags;
    for (std::size_t i = 0; i < 200; ++i)
      if (u(rng) < 0.1) flags.emplace_back(i, u(rng));
    results.push_back(make_result(m, 200, flags));
  }
  const auto sanctions = sanctions_for({4, 40, 120});
  const auto base = eval::consensus(results, sanctions);
  REQUIRE_FALSE(base.empty());
  for (int t = 0; t < 20; ++t) {
    std::shuffle(results.begin(), results.end(), rng);
    const auto again = eval::consensus(results, sanctions);
    REQUIRE(again.size() == base.size());
    for (std::size_t i = 0; i < base.size(); ++i) {
      CHECK(again[i].athlete_id == base[i].athlete_id);
      CHECK(again[i].methods_flagging == base[i].methods_flagging);
    }
  }
  const auto rep = eval::evaluate_methods(results, sanctions, "x");
  CHECK(rep.consensus_count == base.size());
  CHECK(rep.reduction_ratio == Catch::Approx(1.0 - base.size() / 200.0));
}

TEST_CASE("screening pages") {
  std::vector<std::pair<std::size_t, double>> flags;
  for (std::size_t i = 0; i < 250; ++i) flags.emplace_back(i, i == 0 ? 10.0 : static_cast<double>(i % 7));
  const std::vector<DetectionResult> results = {
      make_result("iqr", 300, flags),
      make_result("zscore", 300, {{0, 1.0}, {7, 1.0}, {299, 1.0}}),
      make_result("mad", 300, {{0, 1.0}}),
  };

  std::vector<std::size_t> sizes;
  std::vector<std::string> seen;
  std::optional<std::string> cursor;
  do {
    const auto page = eval::build_screening_page("s", "iqr", results, cursor);
    CHECK(page.total_flagged == 250);
    sizes.push_back(page.rows.size());
    for (const auto& r : page.rows) seen.push_back(r.athlete_id);
    cursor = page.next_cursor;
  } while (cursor);
  CHECK(sizes == std::vector<std::size_t>{100, 100, 50});
  REQUIRE(seen.size() == 250);
  CHECK(std::set<std::string>(seen.begin(), seen.end()).size() == 250);

  const auto first = eval::build_screening_page("s", "iqr", results, std::nullopt);
  // descending severity, ties by athlete id
  for (std::size_t i = 1; i < first.rows.size(); ++i) {
    const auto& a = first.rows[i - 1];
    const auto& b = first.rows[i];
    CHECK((a.severity > b.severity || (a.severity == b.severity && a.athlete_id < b.athlete_id)));
  }

  SECTION("badge equals consensus method count") {
    const auto c = eval::consensus(results, {}, {.min_methods = 1, .sanctioned = std::nullopt, .methods = {}});
    std::map<std::string, std::size_t> counts;
    for (const auto& e : c) counts[e.athlete_id] = e.method_count;
    std::optional<std::string> cur;
    do {
      const auto page = eval::build_screening_page("s", "iqr", results, cur);
      for (const auto& r : page.rows) CHECK(r.agreement == counts.at(r.athlete_id));
      cur = page.next_cursor;
    } while (cur);
    const auto row0 = std::find_if(first.rows.begin(), first.rows.end(), [](const auto& r) { return r.athlete_id == aid(0); });
    REQUIRE(row0 != first.rows.end());
    CHECK(row0->agreement == 3);
    CHECK(row0->other_methods == std::vector<std::string>{"mad", "zscore"});
    CHECK(row0->explanations == std::vector<std::string>{"iqr flag A00000"});
  }

  SECTION("stale and malformed cursors") {
    const auto next = *first.next_cursor;
    auto changed = results;
    changed[0] = make_result("iqr", 300, {{1, 1.0}, {2, 2.0}});
    CHECK_THROWS_AS(eval::build_screening_page("s", "iqr", changed, next), StaleCursor);
    CHECK_THROWS_AS(eval::build_screening_page("other", "iqr", results, next), StaleCursor);
    CHECK_THROWS_AS(eval::build_screening_page("s", "iqr", results, std::string("zz")), StaleCursor);
    CHECK_THROWS_AS(eval::build_screening_page("s", "iqr", results, std::string(32, 'g')), StaleCursor);
  }

  SECTION("empty flag set and missing method") {
    const auto page = eval::build_screening_page("s", "mad", std::vector{make_result("mad", 5, {})}, std::nullopt);
    CHECK(page.rows.empty());
    CHECK_FALSE(page.next_cursor);
    CHECK(eval::to_json(page)["next_cursor"].is_null());
    CHECK_THROWS_AS(eval::build_screening_page("s", "copula", results, std::nullopt), NotMaterialized);
  }
}
