#include "perfscreen/detect/registry.hpp"
#include "support/histories.hpp"

#include <catch_amalgamated.hpp>

#include <random>

using namespace perfscreen;

namespace {

std::size_t count_flags(const DetectionResult& r) { return r.flagged_performances(); }

}  // namespace

TEST_CASE("features use only earlier races for recent form") {
  auto h = testing::history("f", {10.0, 10.2, 10.4, 10.6, 10.8, 11.0, 11.2});
  h.performances[2].wind_mps = 1.5;
  h.performances[3].round = Round::semifinal;
  const auto t = ml::build_features(std::vector{h});
  REQUIRE(t.rows.size() == 7);
  CHECK(t.rows[0].recent_form == Catch::Approx(10.6));  // slice mean fallback
  CHECK(t.rows[1].recent_form == Catch::Approx(10.0));
  CHECK(t.rows[5].recent_form == Catch::Approx(10.4));  // mean of 1..5
  CHECK(t.rows[6].recent_form == Catch::Approx(10.6));  // window slides
  CHECK(t.rows[0].wind_mps == 0.0);                     // missing wind imputed
  CHECK(t.rows[2].wind_mps == 1.5);
  CHECK(t.rows[3].round_ordinal == 1);
  CHECK(t.rows[4].round_ordinal == 2);
}

TEST_CASE("isolation score normaliser") {
  for (const double n : {2.0, 10.0, 256.0, 5000.0}) {
    const double c = ml::average_path_length(n);
    CHECK(ml::isolation_score(c, n) == Catch::Approx(0.5));
    CHECK(ml::isolation_score(0.5 * c, n) > ml::isolation_score(c, n));
  }
  CHECK(ml::average_path_length(256) == Catch::Approx(2 * (std::log(255.0) + ml::kEulerGamma) - 2 * 255.0 / 256));
}

TEST_CASE("a far point among 255 tight ones is isolated for every seed") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    std::mt19937_64 rng(seed * 101);
    std::normal_distribution<double> n(0.0, 0.1);
    ml::Matrix x(256, 2);
    for (std::size_t i = 0; i < 255; ++i) {
      x(i, 0) = n(rng);
      x(i, 1) = n(rng);
    }
    x(255, 0) = 5.0;
    x(255, 1) = -5.0;
    const auto model = ml::fit_isolation_forest(x, 100, seed);
    const auto s = model.score_all(x);
    for (const double v : s) CHECK((v > 0.0 && v <= 1.0));
    const auto top = ml::top_k_indices(s, 26);
    CHECK(std::find(top.begin(), top.end(), 255u) != top.end());
    CHECK(top[0] == 255u);
  }
}

TEST_CASE("iforest flags exactly the contamination share") {
  const auto pop = testing::population(100, 10, 31);
  const auto r = run_detector("iforest", pop, DetectorConfig{});
  CHECK(r.entries.size() == 1000);
  CHECK(count_flags(r) == 100);
  for (const auto& e : r.entries) CHECK((e.score > 0.0 && e.score <= 1.0));

  DetectorConfig cfg;
  cfg.iforest_contamination = 0.05;
  CHECK(count_flags(run_detector("iforest", pop, cfg)) == 50);
}

TEST_CASE("isolation forest model round-trips through JSON") {
  const auto pop = testing::population(20, 10, 2);
  ml::Matrix x(200, 2);
  for (std::size_t i = 0; i < 200; ++i) {
    x(i, 0) = pop[i / 10].performances[i % 10].time_seconds();
    x(i, 1) = *pop[i / 10].performances[i % 10].wind_mps;
  }
  const auto m = ml::fit_isolation_forest(x, 20, 9);
  const auto back = ml::isolation_forest_from_json(ml::to_json(m));
  CHECK(back.score_all(x) == m.score_all(x));
  CHECK(ml::to_json(back) == ml::to_json(m));
}

TEST_CASE("boosting on a noiseless linear target") {
  const std::size_t n = 400;
  ml::Matrix x(n, 3);
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    x(i, 0) = -2.0 + 4.0 * static_cast<double>(i) / (n - 1);
    x(i, 1) = static_cast<double>(i % 3);
    x(i, 2) = static_cast<double>(i % 4);
    y[i] = 10.5 - 0.05 * x(i, 0);
  }
  const auto m = ml::fit_boosted_residual(x, y, 100, 3, 0.1, 0.95);
  // loss never increases
  for (std::size_t s = 1; s < m.train_loss.size(); ++s) CHECK(m.train_loss[s] <= m.train_loss[s - 1] * (1 + 1e-9));
  double worst = 0.0;
  std::size_t above = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = std::abs(y[i] - m.predict(x.row(i)));
    worst = std::max(worst, r);
    above += r > m.residual_cutoff ? 1 : 0;
  }
  CHECK(worst < 0.01);
  CHECK(std::abs(static_cast<double>(above) - 0.05 * n) <= 1.0);

  const auto back = ml::boosted_residual_from_json(ml::to_json(m));
  for (std::size_t i = 0; i < n; i += 17) CHECK(back.predict(x.row(i)) == m.predict(x.row(i)));
  CHECK(back.residual_cutoff == m.residual_cutoff);
}

TEST_CASE("constant targets are degenerate") {
  ml::Matrix x(30, 1);
  std::vector<double> y(30, 10.0);
  for (std::size_t i = 0; i < 30; ++i) x(i, 0) = static_cast<double>(i);
  CHECK_THROWS_AS(ml::fit_boosted_residual(x, y, 10, 3, 0.1, 0.95), DegenerateTarget);

  std::vector<AthleteHistory> pop;
  for (int a = 0; a < 5; ++a) pop.push_back(testing::history("c" + std::to_string(a), std::vector<double>(6, 10.0)));
  const auto r = run_detector("gbt_residual", pop, DetectorConfig{});
  CHECK(count_flags(r) == 0);
  REQUIRE_FALSE(r.warnings.empty());
  CHECK(r.warnings[0].rfind("degenerate_target", 0) == 0);
}

TEST_CASE("boosting skips slices under twenty rows") {
  const auto pop = testing::population(3, 5, 4);
  const auto r = run_detector("gbt_residual", pop, DetectorConfig{});
  CHECK(count_flags(r) == 0);
  for (const auto& e : r.entries) CHECK(e.status == EntryStatus::skipped);
  CHECK_FALSE(r.warnings.empty());
}

TEST_CASE("boosting flags about five percent and catches a context-free drop") {
  auto pop = testing::population(100, 10, 77);
  // times depend on wind and level only, plus noise
  std::mt19937_64 rng(5);
  std::normal_distribution<double> noise(0.0, 0.08);
  for (auto& h : pop)
    for (auto& p : h.performances)
      p.centiseconds = static_cast<std::int32_t>(
          std::llround((10.6 - 0.06 * *p.wind_mps + 0.05 * p.competition_level + noise(rng)) * 100));
  pop[42].performances[6].centiseconds -= 100;
  const auto r = run_detector("gbt_residual", pop, DetectorConfig{});
  CHECK(std::abs(static_cast<double>(count_flags(r)) - 50.0) <= 1.0);
  bool hit = false;
  for (const auto& e : r.entries)
    if (e.ref.athlete_id == pop[42].athlete_id && e.ref.index == 6) hit = e.flagged;
  CHECK(hit);
  CHECK(r.diagnostics.at("residual_cutoff") > 0.0);
}

TEST_CASE("ML flag sets depend only on the seed") {
  const auto pop = testing::population(60, 8, 8);
  for (const auto* m : {"iforest", "gbt_residual"}) {
    DetectorConfig a, b;
    b.seed = 43;
    const auto ra = run_detector(m, pop, a);
    CHECK(ra.athletes_flagged == run_detector(m, pop, a).athletes_flagged);
    if (std::string(m) == "iforest") CHECK(ra.entries != run_detector(m, pop, b).entries);
  }
}
