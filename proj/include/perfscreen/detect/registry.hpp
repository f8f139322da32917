#pragma once

#include "perfscreen/detect/boosted_residual.hpp"
#include "perfscreen/detect/copula.hpp"
#include "perfscreen/detect/features.hpp"
#include "perfscreen/detect/hierarchical.hpp"
#include "perfscreen/detect/isolation_forest.hpp"
#include "perfscreen/detect/statistical.hpp"
#include "perfscreen/detect/types.hpp"

#include <algorithm>
#include <chrono>
#include <functional>
#include <span>
#include <stop_token>
#include <string>
#include <vector>

namespace perfscreen {

struct MethodInfo {
  std::string method_id;
  std::string category;  // ST, ML, TM, BS, MV
  std::string name;
  std::string complexity_note;
  std::string score_scale;
};

inline const std::vector<MethodInfo>& list_methods() {
  static const std::vector<MethodInfo> methods = {
      {"zscore", "ST", "Z-score", "O(n) per athlete", "z = (x - mean) / sd; flagged when |z| > z_threshold"},
      {"mad", "ST", "Robust MAD z-score", "O(n log n) per athlete",
       "z* = mad_scale * (x - median) / MAD; flagged when |z*| > mad_threshold"},
      {"iqr", "ST", "IQR fences", "O(n log n) per athlete",
       "seconds beyond the nearest Tukey fence (negative inside); flagged when > 0"},
      {"iforest", "ML", "Isolation forest", "O(T psi log psi) fit, O(T N log psi) scoring",
       "isolation score s in (0, 1]; top contamination fraction flagged"},
      {"gbt_residual", "ML", "Gradient-boosted residual", "O(T d F N) fit on presorted features",
       "absolute residual |y - y_hat| in seconds; flagged above the residual quantile"},
      {"excess_performance", "TM", "Excess performance", "O(n) per athlete",
       "EP = (x - mean_i) / sd_i; flagged when EP < excess_threshold (fast side only)"},
      {"bayes_hier", "BS", "Bayesian hierarchical trajectory", "O(chains x draws x N) Gibbs + predictive replicates",
       "posterior predictive tail p in [0, 1]; flagged when p < bayes_p_threshold"},
      {"copula", "MV", "Gaussian copula", "O(N log N) fit, O(log N) per scored row",
       "copula log-density; flagged below the training density quantile"},
  };
  return methods;
}

inline const MethodInfo* find_method(std::string_view id) {
  for (const auto& m : list_methods())
    if (m.method_id == id) return &m;
  return nullptr;
}

inline const MethodInfo& require_method(std::string_view id) {
  const auto* m = find_method(id);
  if (!m) throw UnknownMethod("unknown method '" + std::string(id) + "'");
  return *m;
}

namespace detail {

using PerAthleteRule = std::vector<stat::ScoredFlag> (*)(const AthleteHistory&, const DetectorConfig&);

inline void run_per_athlete(const std::string& method, std::span<const AthleteHistory> histories,
                            const DetectorConfig& cfg, DetectionResult& out, std::stop_token stop) {
  for (const auto& h : histories) {
    if (stop.stop_requested()) throw Cancelled("detection cancelled");
    if (h.size() < static_cast<std::size_t>(cfg.min_history)) {
      for (std::size_t i = 0; i < h.size(); ++i) {
        auto e = make_entry(h, i);
        e.status = EntryStatus::insufficient_history;
        e.explanation = fmt("fewer than %d performances", cfg.min_history);
        out.entries.push_back(std::move(e));
      }
      continue;
    }
    const auto b = stat::baseline_seconds(h);
    std::vector<stat::ScoredFlag> scores;
    if (method == "zscore") {
      scores = stat::zscore_detect(h, cfg);
    } else if (method == "mad") {
      scores = stat::mad_detect(h, cfg);
    } else if (method == "iqr") {
      scores = stat::iqr_detect(h, cfg);
    } else {
      scores = stat::excess_detect(h, cfg);
    }
    const double lo = b.q1 - cfg.iqr_multiplier * b.iqr();
    const double hi = b.q3 + cfg.iqr_multiplier * b.iqr();
    for (std::size_t i = 0; i < h.size(); ++i) {
      auto e = make_entry(h, i);
      const double t = h.performances[i].time_seconds();
      e.score = scores[i].score;
      e.flagged = scores[i].flagged;
      if (method == "zscore") {
        e.severity = std::abs(e.score);
        if (b.std == 0.0) {
          e.explanation = "constant times: sd = 0, no z-scores";
        } else if (e.flagged) {
          e.explanation = fmt("%.2f s is %+.2f sd from career mean %.2f s (sd %.3f s)", t, e.score, b.mean, b.std);
        }
      } else if (method == "mad") {
        e.severity = std::abs(e.score);
        if (b.mad == 0.0) {
          e.explanation = "MAD = 0: degenerate scale, nothing flagged";
        } else if (e.flagged) {
          e.explanation = fmt("%.2f s vs career median %.2f s (MAD %.3f s): z* = %+.2f", t, b.median, b.mad, e.score);
        }
      } else if (method == "iqr") {
        e.severity = e.score;
        if (e.flagged)
          e.explanation = fmt("%.2f s outside fences [%.2f, %.2f] s by %.2f s", t, lo, hi, e.score);
      } else {
        e.severity = -e.score;
        if (b.std == 0.0) {
          e.explanation = "constant times: sd = 0, no excess performance";
        } else if (e.flagged) {
          e.explanation = fmt("%.2f s: EP = %.2f vs career mean %.2f s (sd %.3f s)", t, e.score, b.mean, b.std);
        }
      }
      out.entries.push_back(std::move(e));
    }
  }
}

inline void mark_all(std::span<const AthleteHistory> histories, EntryStatus status, const std::string& why,
                     DetectionResult& out) {
  for (const auto& h : histories)
    for (std::size_t i = 0; i < h.size(); ++i) {
      auto e = make_entry(h, i);
      e.status = status;
      e.explanation = why;
      out.entries.push_back(std::move(e));
    }
}

inline void run_iforest(std::span<const AthleteHistory> histories, const DetectorConfig& cfg, DetectionResult& out,
                        std::stop_token stop) {
  const auto table = ml::build_features(histories);
  const std::size_t n = table.rows.size();
  if (n < 2) {
    out.warnings.push_back("iforest: fewer than 2 rows, method skipped");
    mark_all(histories, EntryStatus::skipped, "too few rows for an isolation forest", out);
    return;
  }
  ml::Matrix x(n, 4);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& f = table.rows[i];
    x(i, 0) = f.time_seconds;
    x(i, 1) = f.wind_mps;
    x(i, 2) = f.competition_level;
    x(i, 3) = f.recent_form;
  }
  const auto model = ml::fit_isolation_forest(x, cfg.iforest_trees, cfg.seed, stop);
  const auto scores = model.score_all(x);
  const auto count = static_cast<std::size_t>(std::llround(cfg.iforest_contamination * static_cast<double>(n)));
  std::vector<bool> flagged(n, false);
  for (const auto i : ml::top_k_indices(scores, count)) flagged[i] = true;
  out.diagnostics["subsample_size"] = static_cast<double>(model.subsample_size);
  out.diagnostics["flag_count"] = static_cast<double>(count);

  for (std::size_t i = 0; i < n; ++i) {
    const auto& src = table.sources[i];
    const auto& h = histories[src.history];
    auto e = make_entry(h, src.performance);
    e.score = scores[i];
    e.severity = scores[i];
    e.flagged = flagged[i];
    if (e.flagged)
      e.explanation = fmt("isolation score %.3f (time %.2f s, wind %+.1f, recent form %.2f s)", scores[i],
                          table.rows[i].time_seconds, table.rows[i].wind_mps, table.rows[i].recent_form);
    out.entries.push_back(std::move(e));
  }
}

inline constexpr std::size_t kGbtMinRows = 20;

inline void run_gbt(std::span<const AthleteHistory> histories, const DetectorConfig& cfg, DetectionResult& out,
                    std::stop_token stop) {
  const auto table = ml::build_features(histories);
  const std::size_t n = table.rows.size();
  if (n < kGbtMinRows) {
    out.warnings.push_back("gbt_residual: fewer than 20 rows, method skipped");
    mark_all(histories, EntryStatus::skipped, "too few rows for boosting", out);
    return;
  }
  ml::Matrix x(n, 3);
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& f = table.rows[i];
    x(i, 0) = f.wind_mps;
    x(i, 1) = f.round_ordinal;
    x(i, 2) = f.competition_level;
    y[i] = f.time_seconds;
  }
  ml::BoostedResidualModel model;
  try {
    model = ml::fit_boosted_residual(x, y, cfg.gbt_trees, cfg.gbt_depth, cfg.gbt_learning_rate,
                                     cfg.gbt_residual_quantile, stop);
  } catch (const DegenerateTarget& e) {
    out.warnings.push_back(std::string("degenerate_target: ") + e.what());
    mark_all(histories, EntryStatus::skipped, "all times equal: nothing to model", out);
    return;
  }
  out.diagnostics["residual_cutoff"] = model.residual_cutoff;
  out.diagnostics["train_mse"] = model.train_loss.empty() ? 0.0 : model.train_loss.back();

  for (std::size_t i = 0; i < n; ++i) {
    const auto& src = table.sources[i];
    auto e = make_entry(histories[src.history], src.performance);
    const double pred = model.predict(x.row(i));
    const double r = std::abs(y[i] - pred);
    e.score = r;
    e.severity = r;
    e.flagged = r > model.residual_cutoff;
    if (e.flagged)
      e.explanation = fmt("%.2f s vs %.2f s expected from context: residual %.2f s > cutoff %.3f s", y[i], pred, r,
                          model.residual_cutoff);
    out.entries.push_back(std::move(e));
  }
}

inline void run_bayes(std::span<const AthleteHistory> histories, const DetectorConfig& cfg, DetectionResult& out,
                      std::stop_token stop) {
  const auto data = bayes::prepare_data(histories, cfg.min_history);
  if (data.athletes() == 0) {
    out.warnings.push_back("bayes_hier: no athlete has min_history performances, method skipped");
    mark_all(histories, EntryStatus::insufficient_history, fmt("fewer than %d performances", cfg.min_history), out);
    return;
  }
  std::vector<std::uint32_t> counts;
  bayes::FitOptions opt;
  opt.retain_athlete_draws = false;
  opt.replicate_counts = &counts;
  opt.stop = stop;
  const auto sample = bayes::fit_hier(histories, cfg, opt);
  const auto ppc = bayes::ppc_from_counts(counts, sample.total_draws(), cfg);

  const auto& d = sample.diagnostics;
  out.diagnostics["max_rhat"] = d.max_rhat;
  out.diagnostics["min_ess"] = d.min_ess;
  for (const auto& [name, r] : d.rhat) out.diagnostics["rhat_" + name] = r;
  out.diagnostics["eligible_athletes"] = static_cast<double>(data.athletes());
  if (!sample.healthy) out.warnings.push_back(fmt("sampler_diverged: max R-hat %.3f >= 1.05", d.max_rhat));

  std::vector<std::int64_t> slot_of(histories.size(), -1);
  for (std::size_t i = 0; i < data.athletes(); ++i) slot_of[data.history_index[i]] = static_cast<std::int64_t>(i);
  const std::size_t halves = 2 * sample.chains;
  for (std::size_t hi = 0; hi < histories.size(); ++hi) {
    const auto& h = histories[hi];
    if (slot_of[hi] < 0) {
      for (std::size_t j = 0; j < h.size(); ++j) {
        auto e = make_entry(h, j);
        e.status = EntryStatus::insufficient_history;
        e.explanation = fmt("fewer than %d performances", cfg.min_history);
        out.entries.push_back(std::move(e));
      }
      continue;
    }
    const auto a = static_cast<std::size_t>(slot_of[hi]);
    double alpha = 0.0, beta = 0.0;
    for (std::size_t k = 0; k < halves; ++k) {
      alpha += sample.alpha_halves[a * halves + k].mean;
      beta += sample.beta_halves[a * halves + k].mean;
    }
    alpha /= static_cast<double>(halves);
    beta /= static_cast<double>(halves);
    for (std::size_t j = 0; j < h.size(); ++j) {
      const std::size_t o = data.offsets[a] + j;
      auto e = make_entry(h, j);
      e.score = ppc[o].p_value;
      e.severity = 1.0 - ppc[o].p_value;
      e.flagged = ppc[o].flagged;
      if (e.flagged)
        e.explanation = fmt("%.2f s vs trajectory %.2f s at %.1f y: predictive p = %.3f", data.y[o],
                            alpha + beta * data.t[o], data.t[o], ppc[o].p_value);
      out.entries.push_back(std::move(e));
    }
  }
}

inline void run_copula(std::span<const AthleteHistory> histories, const DetectorConfig& cfg, DetectionResult& out) {
  std::vector<copula::Row> rows;
  for (const auto& h : histories)
    for (const auto& p : h.performances)
      if (p.wind_mps && p.reaction_time_s) rows.push_back({p.time_seconds(), *p.wind_mps, *p.reaction_time_s});
  if (rows.size() < copula::kMinRows) {
    out.warnings.push_back("copula: fewer than 50 complete rows, method skipped");
    for (const auto& h : histories)
      for (std::size_t j = 0; j < h.size(); ++j) {
        auto e = make_entry(h, j);
        const auto& p = h.performances[j];
        e.status = p.wind_mps && p.reaction_time_s ? EntryStatus::skipped : EntryStatus::missing_features;
        out.entries.push_back(std::move(e));
      }
    return;
  }
  const auto model = copula::copula_fit(rows, cfg.copula_density_quantile);
  for (std::size_t k = 0; k < copula::kDims; ++k)
    if (model.degenerate[k])
      out.warnings.push_back(std::string("degenerate_feature: ") + copula::kFeatureNames[k] +
                             " is constant; identity correlation used for it");
  out.diagnostics["density_cutoff"] = model.density_cutoff;
  out.diagnostics["shrinkage"] = model.shrinkage;
  out.diagnostics["complete_rows"] = static_cast<double>(rows.size());
  out.diagnostics["rho_time_wind"] = model.correlation(0, 1);
  out.diagnostics["rho_time_reaction"] = model.correlation(0, 2);
  out.diagnostics["rho_wind_reaction"] = model.correlation(1, 2);

  const auto scores = copula::copula_flag(model, rows);
  std::size_t r = 0;
  for (const auto& h : histories)
    for (std::size_t j = 0; j < h.size(); ++j) {
      auto e = make_entry(h, j);
      const auto& p = h.performances[j];
      if (!p.wind_mps || !p.reaction_time_s) {
        e.status = EntryStatus::missing_features;
        e.explanation = !p.reaction_time_s ? "no reaction time" : "no wind reading";
      } else {
        const auto& s = scores[r++];
        e.score = s.log_density;
        e.severity = -s.log_density;
        e.flagged = s.flagged;
        if (e.flagged)
          e.explanation = fmt("unusual combination: %.2f s, wind %+.1f m/s, reaction %.3f s (log density %.2f)",
                              p.time_seconds(), *p.wind_mps, *p.reaction_time_s, s.log_density);
      }
      out.entries.push_back(std::move(e));
    }
}

}  // namespace detail

/// Uniform entry point for every method. Histories are processed in
/// athlete_id order so seeded methods do not depend on input order; entries
/// come back in that order.
inline DetectionResult run_detector(const std::string& method_id, std::span<const AthleteHistory> histories,
                                    const DetectorConfig& cfg, std::stop_token stop = {}) {
  const auto& info = require_method(method_id);
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();

  DetectionResult out;
  out.method_id = method_id;
  out.score_scale = info.score_scale;
  if (histories.empty()) return out;

  std::vector<AthleteHistory> sorted_copy;
  const auto by_id = [](const AthleteHistory& a, const AthleteHistory& b) { return a.athlete_id < b.athlete_id; };
  if (!std::is_sorted(histories.begin(), histories.end(), by_id)) {
    sorted_copy.assign(histories.begin(), histories.end());
    std::stable_sort(sorted_copy.begin(), sorted_copy.end(), by_id);
    histories = sorted_copy;
  }
  std::size_t total = 0;
  for (const auto& h : histories) total += h.size();
  out.entries.reserve(total);

  if (method_id == "zscore" || method_id == "mad" || method_id == "iqr" || method_id == "excess_performance") {
    detail::run_per_athlete(method_id, histories, cfg, out, stop);
  } else if (method_id == "iforest") {
    detail::run_iforest(histories, cfg, out, stop);
  } else if (method_id == "gbt_residual") {
    detail::run_gbt(histories, cfg, out, stop);
  } else if (method_id == "bayes_hier") {
    detail::run_bayes(histories, cfg, out, stop);
  } else {
    detail::run_copula(histories, cfg, out);
  }
  out.finalize();
  const auto elapsed = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  out.wall_time_ms = std::max(elapsed, 1e-6);
  return out;
}

}  // namespace perfscreen
