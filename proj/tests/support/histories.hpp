#pragma once

#include "perfscreen/detect/types.hpp"

#include <cmath>
#include <random>
#include <string>
#include <vector>

namespace testing {

inline perfscreen::AthleteHistory history(const std::string& id, const std::vector<double>& seconds,
                                          const std::string& event = "100m-men") {
  perfscreen::AthleteHistory h;
  h.athlete_id = id;
  h.event_code = event;
  auto d = perfscreen::Date::from_ymd(2014, 3, 1);
  for (std::size_t i = 0; i < seconds.size(); ++i) {
    perfscreen::PerformanceRecord p;
    p.athlete_id = id;
    p.event_code = event;
    p.competition_id = id + "-" + std::to_string(i);
    p.centiseconds = static_cast<std::int32_t>(std::llround(seconds[i] * 100.0));
    p.date = d;
    p.round = perfscreen::Round::final;
    h.performances.push_back(std::move(p));
    d = d.plus_days(21);
  }
  return h;
}

/// Population of Gaussian-ish careers with wind and reaction filled in.
inline std::vector<perfscreen::AthleteHistory> population(std::size_t athletes, std::size_t per, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> base(10.5, 0.3), noise(0.0, 0.1), wind(0.0, 1.0), rt(0.15, 0.02);
  std::vector<perfscreen::AthleteHistory> out;
  for (std::size_t a = 0; a < athletes; ++a) {
    const double mu = base(rng);
    std::vector<double> xs;
    for (std::size_t j = 0; j < per; ++j) xs.push_back(mu + noise(rng));
    char id[16];
    std::snprintf(id, sizeof id, "P%05zu", a);
    auto h = history(id, xs);
    for (auto& p : h.performances) {
      p.wind_mps = std::round(wind(rng) * 10.0) / 10.0;
      p.reaction_time_s = std::clamp(rt(rng), 0.1, 0.3);
      p.competition_level = static_cast<int>(a % 4);
    }
    out.push_back(std::move(h));
  }
  return out;
}

}  // namespace testing
