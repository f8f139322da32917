#pragma once

#include "perfscreen/core/errors.hpp"
#include "perfscreen/core/hash.hpp"
#include "perfscreen/detect/types.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <future>
#include <limits>
#include <map>
#include <random>
#include <span>
#include <stop_token>
#include <string>
#include <vector>

namespace perfscreen::bayes {

/// Priors of the random intercept/slope model
///
///     y_ij ~ N(alpha_i + beta_i * t_ij, sigma^2)
///     alpha_i ~ N(mu_alpha, tau_alpha^2),  beta_i ~ N(mu_beta, tau_beta^2)
///
/// t_ij is years since the athlete's first performance in the slice.
struct HierModelSpec {
  double mu_alpha_mean = 11.0;
  double mu_alpha_sd = 1.0;
  double mu_beta_mean = 0.0;
  double mu_beta_sd = 0.1;
  double tau_alpha_scale = 1.0;  // HalfNormal
  double tau_beta_scale = 1.0;   // HalfNormal
  double sigma_scale = 1.0;      // HalfNormal; our choice, override as needed

  void validate() const {
    for (const double s : {mu_alpha_sd, mu_beta_sd, tau_alpha_scale, tau_beta_scale, sigma_scale})
      if (!(s > 0.0) || !std::isfinite(s)) throw InvalidConfig("prior scales must be positive");
  }
};

/// Flattened observations of the athletes that meet min_history.
struct HierData {
  std::vector<std::string> athlete_ids;
  std::vector<std::size_t> history_index;
  std::vector<std::size_t> offsets{0};  // athlete i owns [offsets[i], offsets[i+1])
  std::vector<double> t;
  std::vector<double> y;

  // Per-athlete sufficient statistics.
  std::vector<double> n, st, stt, sy, sty, syy;

  [[nodiscard]] std::size_t athletes() const { return athlete_ids.size(); }
  [[nodiscard]] std::size_t observations() const { return y.size(); }
};

inline HierData prepare_data(std::span<const AthleteHistory> histories, int min_history) {
  HierData d;
  for (std::size_t h = 0; h < histories.size(); ++h) {
    const auto& hist = histories[h];
    if (hist.size() < static_cast<std::size_t>(min_history) || hist.performances.empty()) continue;
    d.athlete_ids.push_back(hist.athlete_id);
    d.history_index.push_back(h);
    const Date origin = hist.performances.front().date;
    double n = 0, st = 0, stt = 0, sy = 0, sty = 0, syy = 0;
    for (const auto& p : hist.performances) {
      const double t = Date::years_between(origin, p.date);
      const double y = p.time_seconds();
      d.t.push_back(t);
      d.y.push_back(y);
      n += 1;
      st += t;
      stt += t * t;
      sy += y;
      sty += t * y;
      syy += y * y;
    }
    d.offsets.push_back(d.y.size());
    d.n.push_back(n);
    d.st.push_back(st);
    d.stt.push_back(stt);
    d.sy.push_back(sy);
    d.sty.push_back(sty);
    d.syy.push_back(syy);
  }
  return d;
}

struct HyperDraw {
  double mu_alpha = 0.0;
  double mu_beta = 0.0;
  double tau_alpha = 0.0;
  double tau_beta = 0.0;
  double sigma = 0.0;
};

inline constexpr const char* kHyperNames[] = {"mu_alpha", "mu_beta", "tau_alpha", "tau_beta", "sigma"};

inline double hyper_value(const HyperDraw& d, std::size_t k) {
  switch (k) {
    case 0: return d.mu_alpha;
    case 1: return d.mu_beta;
    case 2: return d.tau_alpha;
    case 3: return d.tau_beta;
    default: return d.sigma;
  }
}

/// Welford accumulator; enough to compute split-R-hat without keeping draws.
struct RunningMoments {
  std::size_t count = 0;
  double mean = 0.0;
  double m2 = 0.0;

  void add(double x) {
    ++count;
    const double delta = x - mean;
    mean += delta / static_cast<double>(count);
    m2 += delta * (x - mean);
  }
  [[nodiscard]] double variance() const { return count > 1 ? m2 / static_cast<double>(count - 1) : 0.0; }
};

struct Diagnostics {
  std::map<std::string, double> rhat;  // hyperparameters
  std::map<std::string, double> ess;   // hyperparameters
  double max_rhat_alpha = 1.0;
  double max_rhat_beta = 1.0;
  double max_rhat = 1.0;
  double min_ess = 0.0;
  bool healthy = true;
};

inline constexpr double kRhatLimit = 1.05;

struct PosteriorSample {
  std::size_t chains = 0;
  std::size_t draws_per_chain = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> athlete_ids;

  std::vector<HyperDraw> hyper;  // index chain * draws_per_chain + draw

  // Athlete draws in single precision, index (chain * draws + draw) * A + i.
  bool has_athlete_draws = false;
  std::vector<float> alpha;
  std::vector<float> beta;

  // Moments per athlete and half chain, index i * (2 * chains) + half.
  std::vector<RunningMoments> alpha_halves;
  std::vector<RunningMoments> beta_halves;

  Diagnostics diagnostics;
  bool healthy = true;

  [[nodiscard]] std::size_t total_draws() const { return chains * draws_per_chain; }
  [[nodiscard]] const HyperDraw& hyper_at(std::size_t chain, std::size_t draw) const {
    return hyper[chain * draws_per_chain + draw];
  }
  [[nodiscard]] float alpha_at(std::size_t chain, std::size_t draw, std::size_t i) const {
    return alpha[(chain * draws_per_chain + draw) * athlete_ids.size() + i];
  }
  [[nodiscard]] float beta_at(std::size_t chain, std::size_t draw, std::size_t i) const {
    return beta[(chain * draws_per_chain + draw) * athlete_ids.size() + i];
  }
};

// ---------------------------------------------------------------------------
// Convergence diagnostics

/// Split R-hat from per-half-chain moments (all halves the same length).
inline double split_rhat_from_moments(std::span<const RunningMoments> halves) {
  const std::size_t m = halves.size();
  if (m < 2) return 1.0;
  const double n = static_cast<double>(halves.front().count);
  if (n < 2) return 1.0;
  double w = 0.0, grand = 0.0;
  for (const auto& h : halves) {
    w += h.variance();
    grand += h.mean;
  }
  w /= static_cast<double>(m);
  grand /= static_cast<double>(m);
  double b_over_n = 0.0;
  for (const auto& h : halves) b_over_n += (h.mean - grand) * (h.mean - grand);
  b_over_n /= static_cast<double>(m - 1);
  if (w <= 0.0) return b_over_n > 0.0 ? std::numeric_limits<double>::infinity() : 1.0;
  const double var_plus = (n - 1.0) / n * w + b_over_n;
  return std::sqrt(var_plus / w);
}

/// Splits each chain in half (dropping a middle draw when odd).
inline std::vector<std::vector<double>> split_chains(std::span<const std::vector<double>> chains) {
  std::vector<std::vector<double>> out;
  for (const auto& c : chains) {
    const std::size_t half = c.size() / 2;
    out.emplace_back(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(half));
    out.emplace_back(c.end() - static_cast<std::ptrdiff_t>(half), c.end());
  }
  return out;
}

inline double split_rhat(std::span<const std::vector<double>> chains) {
  const auto halves = split_chains(chains);
  std::vector<RunningMoments> moments(halves.size());
  for (std::size_t h = 0; h < halves.size(); ++h)
    for (const double v : halves[h]) moments[h].add(v);
  return split_rhat_from_moments(moments);
}

/// Multi-chain effective sample size on split chains, with Geyer's initial
/// monotone positive-pair truncation of the combined autocorrelation.
inline double effective_sample_size(std::span<const std::vector<double>> chains) {
  const auto halves = split_chains(chains);
  const std::size_t m = halves.size();
  if (m == 0) return 0.0;
  const std::size_t n = halves.front().size();
  if (n < 4) return static_cast<double>(m * n);

  std::vector<double> means(m, 0.0), vars(m, 0.0);
  for (std::size_t c = 0; c < m; ++c) {
    RunningMoments rm;
    for (const double v : halves[c]) rm.add(v);
    means[c] = rm.mean;
    vars[c] = rm.variance();
  }
  double w = 0.0, grand = 0.0;
  for (std::size_t c = 0; c < m; ++c) {
    w += vars[c];
    grand += means[c];
  }
  w /= static_cast<double>(m);
  grand /= static_cast<double>(m);
  double b_over_n = 0.0;
  for (std::size_t c = 0; c < m; ++c) b_over_n += (means[c] - grand) * (means[c] - grand);
  b_over_n = m > 1 ? b_over_n / static_cast<double>(m - 1) : 0.0;
  const double nd = static_cast<double>(n);
  const double var_plus = (nd - 1.0) / nd * w + b_over_n;
  if (!(var_plus > 0.0)) return static_cast<double>(m * n);

  const auto autocov = [&](std::size_t c, std::size_t lag) {
    double s = 0.0;
    const auto& x = halves[c];
    for (std::size_t i = 0; i + lag < n; ++i) s += (x[i] - means[c]) * (x[i + lag] - means[c]);
    return s / nd;
  };
  const auto rho = [&](std::size_t lag) {
    double acov = 0.0;
    for (std::size_t c = 0; c < m; ++c) acov += autocov(c, lag);
    acov /= static_cast<double>(m);
    return 1.0 - (w - acov) / var_plus;
  };

  double tau = -1.0;
  double prev_pair = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; 2 * k + 1 < n; ++k) {
    double pair = rho(2 * k) + rho(2 * k + 1);
    if (pair <= 0.0) break;
    pair = std::min(pair, prev_pair);
    tau += 2.0 * pair;
    prev_pair = pair;
  }
  tau = std::max(tau, 1.0 / std::log10(static_cast<double>(m * n)));
  return static_cast<double>(m * n) / tau;
}

/// R-hat for every hyperparameter and every athlete effect, ESS for the
/// hyperparameters. Healthy iff every R-hat < 1.05.
inline Diagnostics mcmc_diagnostics(const PosteriorSample& s) {
  if (s.chains < 2) throw PreconditionError("diagnostics need at least 2 chains");
  Diagnostics d;
  for (std::size_t k = 0; k < 5; ++k) {
    std::vector<std::vector<double>> chains(s.chains);
    for (std::size_t c = 0; c < s.chains; ++c) {
      chains[c].reserve(s.draws_per_chain);
      for (std::size_t i = 0; i < s.draws_per_chain; ++i) chains[c].push_back(hyper_value(s.hyper_at(c, i), k));
    }
    d.rhat[kHyperNames[k]] = split_rhat(chains);
    d.ess[kHyperNames[k]] = effective_sample_size(chains);
  }
  const std::size_t halves = 2 * s.chains;
  for (std::size_t i = 0; i < s.athlete_ids.size(); ++i) {
    d.max_rhat_alpha = std::max(
        d.max_rhat_alpha, split_rhat_from_moments(std::span(s.alpha_halves).subspan(i * halves, halves)));
    d.max_rhat_beta = std::max(
        d.max_rhat_beta, split_rhat_from_moments(std::span(s.beta_halves).subspan(i * halves, halves)));
  }
  d.max_rhat = std::max(d.max_rhat_alpha, d.max_rhat_beta);
  d.min_ess = std::numeric_limits<double>::infinity();
  for (const auto& [name, r] : d.rhat) d.max_rhat = std::max(d.max_rhat, r);
  for (const auto& [name, e] : d.ess) d.min_ess = std::min(d.min_ess, e);
  d.healthy = d.max_rhat < kRhatLimit;
  return d;
}

// ---------------------------------------------------------------------------
// Sampler internals

namespace detail {

/// Univariate slice sampler (stepping out + shrinkage).
template <typename LogDensity>
double slice_sample(double x0, LogDensity&& logf, double width, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::exponential_distribution<double> expo(1.0);
  const double level = logf(x0) - expo(rng);
  double lo = x0 - width * unif(rng);
  double hi = lo + width;
  for (int i = 0; i < 64 && logf(lo) > level; ++i) lo -= width;
  for (int i = 0; i < 64 && logf(hi) > level; ++i) hi += width;
  for (int i = 0; i < 200; ++i) {
    const double x1 = lo + (hi - lo) * unif(rng);
    if (logf(x1) > level) return x1;
    if (x1 < x0) {
      lo = x1;
    } else {
      hi = x1;
    }
  }
  return x0;
}

/// Draws a HalfNormal(scale) scale parameter given n centred values with sum
/// of squares ss. Works on u = log(scale) with the Jacobian included.
inline double draw_scale(double current, double n, double ss, double prior_scale, std::mt19937_64& rng) {
  const double inv_two_prior = 1.0 / (2.0 * prior_scale * prior_scale);
  const auto logf = [&](double u) {
    const double e2 = std::exp(2.0 * u);
    return -e2 * inv_two_prior - n * u - ss / (2.0 * e2) + u;
  };
  return std::exp(slice_sample(std::log(current), logf, 1.0, rng));
}

inline std::uint64_t replicate_seed(std::uint64_t seed, std::size_t chain, std::size_t draw) {
  return derive_seed(seed, 0xbb01, chain, draw);
}

/// Adds one draw's predictive replicates to the per-observation counts of
/// replicates at or below the observed time.
inline void accumulate_replicates(const HierData& data, std::uint64_t seed, std::size_t chain, std::size_t draw,
                                  std::span<const float> alpha, std::span<const float> beta, double sigma,
                                  std::span<std::uint32_t> at_or_below) {
  std::mt19937_64 rng(replicate_seed(seed, chain, draw));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t i = 0; i < data.athletes(); ++i) {
    const double a = alpha[i];
    const double b = beta[i];
    for (std::size_t o = data.offsets[i]; o < data.offsets[i + 1]; ++o) {
      const double rep = a + b * data.t[o] + sigma * normal(rng);
      if (rep <= data.y[o]) ++at_or_below[o];
    }
  }
}

/// Non-centred Gibbs step for one random-effect block. Given eta_i =
/// (effect_i - mu) / tau, both tau and mu enter the likelihood linearly, so
/// each conditional is normal. tau is drawn on the real line under its
/// symmetric N(0, scale^2) extension and folded back with the sign moved into
/// eta, which leaves the effects (and the half-normal target) unchanged.
inline void interweave(const HierData& data, std::vector<double>& alpha, std::vector<double>& beta, HyperDraw& h,
                       const HierModelSpec& prior, bool slope, std::normal_distribution<double>& normal,
                       std::mt19937_64& rng) {
  const std::size_t A = data.athletes();
  auto& effect = slope ? beta : alpha;
  double& mu = slope ? h.mu_beta : h.mu_alpha;
  double& tau = slope ? h.tau_beta : h.tau_alpha;
  const double inv_s2 = 1.0 / (h.sigma * h.sigma);
  std::vector<double> eta(A);
  for (std::size_t i = 0; i < A; ++i) eta[i] = (effect[i] - mu) / tau;

  // Per athlete, with x = t (slope) or 1 (intercept): the "other" part of the
  // mean is fixed, r_ij = y_ij - other_ij, and sums are over observations.
  // sxr = sum x*r, sxx = sum x^2.
  const auto sums = [&](std::size_t i, double& sxr, double& sxx) {
    if (slope) {
      sxr = data.sty[i] - alpha[i] * data.st[i];
      sxx = data.stt[i];
    } else {
      sxr = data.sy[i] - beta[i] * data.st[i];
      sxx = data.n[i];
    }
  };

  // tau | mu, eta
  {
    double prec = 1.0 / (slope ? prior.tau_beta_scale * prior.tau_beta_scale
                               : prior.tau_alpha_scale * prior.tau_alpha_scale);
    double lin = 0.0;
    for (std::size_t i = 0; i < A; ++i) {
      double sxr, sxx;
      sums(i, sxr, sxx);
      prec += eta[i] * eta[i] * sxx * inv_s2;
      lin += eta[i] * (sxr - mu * sxx) * inv_s2;
    }
    const double draw = lin / prec + normal(rng) / std::sqrt(prec);
    if (draw < 0.0)
      for (auto& e : eta) e = -e;
    tau = std::max(std::abs(draw), 1e-12);
  }
  // mu | tau, eta
  {
    const double p0 = 1.0 / (slope ? prior.mu_beta_sd * prior.mu_beta_sd : prior.mu_alpha_sd * prior.mu_alpha_sd);
    double prec = p0;
    double lin = (slope ? prior.mu_beta_mean : prior.mu_alpha_mean) * p0;
    for (std::size_t i = 0; i < A; ++i) {
      double sxr, sxx;
      sums(i, sxr, sxx);
      prec += sxx * inv_s2;
      lin += (sxr - tau * eta[i] * sxx) * inv_s2;
    }
    mu = lin / prec + normal(rng) / std::sqrt(prec);
  }
  for (std::size_t i = 0; i < A; ++i) effect[i] = mu + tau * eta[i];
}

/// Slope counterpart of interweave with the intercepts integrated out:
/// intercepts and slopes are strongly correlated when t is not centred, so
/// (tau_beta, mu_beta) are drawn from their collapsed conditionals and the
/// intercepts are redrawn afterwards. Per athlete the marginal covariance is
/// sigma^2 I + tau_alpha^2 11', whose inverse is (I - c 11') / sigma^2.
inline void interweave_slope(const HierData& data, std::vector<double>& alpha, std::vector<double>& beta,
                             HyperDraw& h, const HierModelSpec& prior, std::normal_distribution<double>& normal,
                             std::mt19937_64& rng) {
  const std::size_t A = data.athletes();
  const double s2 = h.sigma * h.sigma;
  const double ta2 = h.tau_alpha * h.tau_alpha;
  std::vector<double> eta(A), c(A);
  for (std::size_t i = 0; i < A; ++i) {
    eta[i] = (beta[i] - h.mu_beta) / h.tau_beta;
    c[i] = ta2 / (s2 + data.n[i] * ta2);
  }
  // x' S^-1 r for x = t and r = y - mu_alpha - k * t, and t' S^-1 t.
  const auto t_r = [&](std::size_t i, double k) {
    const double str = data.sty[i] - h.mu_alpha * data.st[i] - k * data.stt[i];
    const double sr = data.sy[i] - h.mu_alpha * data.n[i] - k * data.st[i];
    return (str - c[i] * data.st[i] * sr) / s2;
  };
  const auto t_t = [&](std::size_t i) { return (data.stt[i] - c[i] * data.st[i] * data.st[i]) / s2; };

  {
    double prec = 1.0 / (prior.tau_beta_scale * prior.tau_beta_scale);
    double lin = 0.0;
    for (std::size_t i = 0; i < A; ++i) {
      prec += eta[i] * eta[i] * t_t(i);
      lin += eta[i] * t_r(i, h.mu_beta);
    }
    const double draw = lin / prec + normal(rng) / std::sqrt(prec);
    if (draw < 0.0)
      for (auto& e : eta) e = -e;
    h.tau_beta = std::max(std::abs(draw), 1e-12);
  }
  {
    const double p0 = 1.0 / (prior.mu_beta_sd * prior.mu_beta_sd);
    double prec = p0;
    double lin = prior.mu_beta_mean * p0;
    for (std::size_t i = 0; i < A; ++i) {
      prec += t_t(i);
      lin += t_r(i, h.tau_beta * eta[i]);
    }
    h.mu_beta = lin / prec + normal(rng) / std::sqrt(prec);
  }
  const double pa = 1.0 / ta2;
  for (std::size_t i = 0; i < A; ++i) {
    beta[i] = h.mu_beta + h.tau_beta * eta[i];
    const double prec = data.n[i] / s2 + pa;
    const double mean = ((data.sy[i] - beta[i] * data.st[i]) / s2 + h.mu_alpha * pa) / prec;
    alpha[i] = mean + normal(rng) / std::sqrt(prec);
  }
}

/// (alpha_i, beta_i) | rest: bivariate normal, drawn through the Cholesky
/// factor of the conditional precision.
inline void draw_effects(const HierData& data, const HyperDraw& h, std::vector<double>& alpha,
                         std::vector<double>& beta, std::normal_distribution<double>& normal, std::mt19937_64& rng) {
  const double inv_s2 = 1.0 / (h.sigma * h.sigma);
  const double pa = 1.0 / (h.tau_alpha * h.tau_alpha);
  const double pb = 1.0 / (h.tau_beta * h.tau_beta);
  for (std::size_t i = 0; i < data.athletes(); ++i) {
    const double p11 = data.n[i] * inv_s2 + pa;
    const double p12 = data.st[i] * inv_s2;
    const double p22 = data.stt[i] * inv_s2 + pb;
    const double b1 = data.sy[i] * inv_s2 + h.mu_alpha * pa;
    const double b2 = data.sty[i] * inv_s2 + h.mu_beta * pb;
    const double det = p11 * p22 - p12 * p12;
    const double m1 = (p22 * b1 - p12 * b2) / det;
    const double m2 = (p11 * b2 - p12 * b1) / det;
    // P = L L^T; x = m + L^{-T} z.
    const double l11 = std::sqrt(p11);
    const double l21 = p12 / l11;
    const double l22 = std::sqrt(std::max(p22 - l21 * l21, 1e-300));
    const double z1 = normal(rng), z2 = normal(rng);
    const double x2 = z2 / l22;
    const double x1 = (z1 - l21 * x2) / l11;
    alpha[i] = m1 + x1;
    beta[i] = m2 + x2;
  }
}

/// Slice update of tau_alpha or tau_beta with both effects integrated out.
/// Per athlete y ~ N(mu_a + mu_b t, sigma^2 I + Z D Z'), Z = [1 t],
/// D = diag(tau_a^2, tau_b^2); with M = sigma^2 D^-1 + Z'Z and g = Z'(y - mean)
/// the scale-dependent part of the log likelihood is
///   -1/2 (log |D| + log |M|) + g' M^-1 g / (2 sigma^2).
/// The caller redraws the effects afterwards.
inline void collapsed_scale(const HierData& data, HyperDraw& h, const HierModelSpec& prior, bool slope,
                            std::mt19937_64& rng) {
  const std::size_t A = data.athletes();
  const double s2 = h.sigma * h.sigma;
  std::vector<double> g1(A), g2(A);
  for (std::size_t i = 0; i < A; ++i) {
    g1[i] = data.sy[i] - h.mu_alpha * data.n[i] - h.mu_beta * data.st[i];
    g2[i] = data.sty[i] - h.mu_alpha * data.st[i] - h.mu_beta * data.stt[i];
  }
  const double other = slope ? h.tau_alpha : h.tau_beta;
  const double d_other = s2 / (other * other);
  const double scale = slope ? prior.tau_beta_scale : prior.tau_alpha_scale;
  const double inv_two_prior = 1.0 / (2.0 * scale * scale);
  const auto logf = [&](double u) {
    const double e2 = std::exp(2.0 * u);
    const double d_this = s2 / e2;
    const double da = slope ? d_other : d_this;
    const double db = slope ? d_this : d_other;
    double acc = 0.0;
    for (std::size_t i = 0; i < A; ++i) {
      const double m11 = da + data.n[i];
      const double m12 = data.st[i];
      const double m22 = db + data.stt[i];
      const double det = m11 * m22 - m12 * m12;
      const double quad = (m22 * g1[i] * g1[i] - 2.0 * m12 * g1[i] * g2[i] + m11 * g2[i] * g2[i]) / det;
      acc += -u - 0.5 * std::log(det) + 0.5 * quad / s2;
    }
    return acc - e2 * inv_two_prior + u;
  };
  double& tau = slope ? h.tau_beta : h.tau_alpha;
  tau = std::exp(slice_sample(std::log(tau), logf, 1.0, rng));
}

struct ChainOutput {
  std::vector<HyperDraw> hyper;
  std::vector<float> alpha, beta;  // draws * A when retained
  std::vector<RunningMoments> alpha_halves, beta_halves;  // A * 2
  std::vector<std::uint32_t> at_or_below;                 // when counting replicates
};

inline ChainOutput run_chain(const HierData& data, const HierModelSpec& prior, std::size_t chain, std::size_t warmup,
                             std::size_t draws, std::uint64_t seed, bool retain, bool count_replicates,
                             std::stop_token stop) {
  const std::size_t A = data.athletes();
  std::mt19937_64 rng(derive_seed(seed, 0xb0, chain));
  std::normal_distribution<double> normal(0.0, 1.0);

  // Dispersed start around the athletes' own means.
  std::vector<double> alpha(A), beta(A);
  double sum_a = 0.0;
  for (std::size_t i = 0; i < A; ++i) {
    alpha[i] = data.sy[i] / data.n[i] + 0.05 * normal(rng);
    beta[i] = 0.02 * normal(rng);
    sum_a += alpha[i];
  }
  double ss_a = 0.0;
  for (std::size_t i = 0; i < A; ++i) ss_a += (alpha[i] - sum_a / A) * (alpha[i] - sum_a / A);
  HyperDraw h;
  h.mu_alpha = sum_a / static_cast<double>(A) + 0.1 * normal(rng);
  h.mu_beta = 0.02 * normal(rng);
  h.tau_alpha = std::max(0.05, A > 1 ? std::sqrt(ss_a / static_cast<double>(A - 1)) : 0.3) * std::exp(0.2 * normal(rng));
  h.tau_beta = 0.05 * std::exp(0.3 * normal(rng));
  h.sigma = 0.1 * std::exp(0.3 * normal(rng));

  ChainOutput out;
  out.hyper.reserve(draws);
  if (retain) {
    out.alpha.resize(draws * A);
    out.beta.resize(draws * A);
  }
  out.alpha_halves.resize(A * 2);
  out.beta_halves.resize(A * 2);
  if (count_replicates) out.at_or_below.assign(data.observations(), 0);
  std::vector<float> alpha_f(A), beta_f(A);

  const double total_obs = static_cast<double>(data.observations());
  const double prec_mu_a0 = 1.0 / (prior.mu_alpha_sd * prior.mu_alpha_sd);
  const double prec_mu_b0 = 1.0 / (prior.mu_beta_sd * prior.mu_beta_sd);
  const std::size_t half_len = draws / 2;

  for (std::size_t iter = 0; iter < warmup + draws; ++iter) {
    if ((iter & 15) == 0 && stop.stop_requested()) throw Cancelled("MCMC cancelled");

    draw_effects(data, h, alpha, beta, normal, rng);
    const double pa = 1.0 / (h.tau_alpha * h.tau_alpha);
    const double pb = 1.0 / (h.tau_beta * h.tau_beta);
    double sum_alpha = 0.0, sum_beta = 0.0, ssr = 0.0;
    for (std::size_t i = 0; i < A; ++i) {
      const double a = alpha[i], b = beta[i];
      sum_alpha += a;
      sum_beta += b;
      ssr += data.syy[i] - 2.0 * a * data.sy[i] - 2.0 * b * data.sty[i] + data.n[i] * a * a +
             2.0 * a * b * data.st[i] + b * b * data.stt[i];
    }
    ssr = std::max(ssr, 0.0);

    // Population means: conjugate normal updates.
    {
      const double prec = prec_mu_a0 + static_cast<double>(A) * pa;
      const double mean = (prior.mu_alpha_mean * prec_mu_a0 + sum_alpha * pa) / prec;
      h.mu_alpha = mean + normal(rng) / std::sqrt(prec);
    }
    {
      const double prec = prec_mu_b0 + static_cast<double>(A) * pb;
      const double mean = (prior.mu_beta_mean * prec_mu_b0 + sum_beta * pb) / prec;
      h.mu_beta = mean + normal(rng) / std::sqrt(prec);
    }

    // Scales: slice sampling on the log scale.
    double ss_alpha = 0.0, ss_beta = 0.0;
    for (std::size_t i = 0; i < A; ++i) {
      ss_alpha += (alpha[i] - h.mu_alpha) * (alpha[i] - h.mu_alpha);
      ss_beta += (beta[i] - h.mu_beta) * (beta[i] - h.mu_beta);
    }
    h.tau_alpha = draw_scale(h.tau_alpha, static_cast<double>(A), ss_alpha, prior.tau_alpha_scale, rng);
    h.tau_beta = draw_scale(h.tau_beta, static_cast<double>(A), ss_beta, prior.tau_beta_scale, rng);
    h.sigma = draw_scale(h.sigma, total_obs, ssr, prior.sigma_scale, rng);

    // Interweaving (ASIS): redraw (tau, mu) in the non-centred form
    // alpha_i = mu + tau * eta_i with eta fixed. With weak slope information
    // the centred updates alone stick in the tau_beta -> 0 funnel.
    interweave(data, alpha, beta, h, prior, /*slope=*/false, normal, rng);
    interweave_slope(data, alpha, beta, h, prior, normal, rng);
    // Both scales once more with every effect integrated out, then fresh
    // effects. This removes the remaining tau_beta <-> beta dependence.
    collapsed_scale(data, h, prior, /*slope=*/true, rng);
    collapsed_scale(data, h, prior, /*slope=*/false, rng);
    draw_effects(data, h, alpha, beta, normal, rng);

    if (iter < warmup) continue;
    const std::size_t d = iter - warmup;
    out.hyper.push_back(h);
    for (std::size_t i = 0; i < A; ++i) {
      alpha_f[i] = static_cast<float>(alpha[i]);
      beta_f[i] = static_cast<float>(beta[i]);
    }
    if (retain) {
      std::copy(alpha_f.begin(), alpha_f.end(), out.alpha.begin() + static_cast<std::ptrdiff_t>(d * A));
      std::copy(beta_f.begin(), beta_f.end(), out.beta.begin() + static_cast<std::ptrdiff_t>(d * A));
    }
    // Split-chain moments; the middle draw of an odd-length chain is dropped.
    const bool first_half = d < half_len;
    const bool second_half = d >= draws - half_len;
    if (first_half || second_half) {
      const std::size_t half = first_half ? 0 : 1;
      for (std::size_t i = 0; i < A; ++i) {
        out.alpha_halves[i * 2 + half].add(alpha_f[i]);
        out.beta_halves[i * 2 + half].add(beta_f[i]);
      }
    }
    if (count_replicates) accumulate_replicates(data, seed, chain, d, alpha_f, beta_f, h.sigma, out.at_or_below);
  }
  return out;
}

}  // namespace detail

struct FitOptions {
  HierModelSpec prior{};
  bool retain_athlete_draws = true;
  /// When set, predictive replicate counts are accumulated during sampling
  /// (identical to ppc_flag on a retained sample) and stored here.
  std::vector<std::uint32_t>* replicate_counts = nullptr;
  std::stop_token stop{};
};

/// Gibbs sampler: blocked (alpha_i, beta_i) normal draws, conjugate updates for
/// the population means and slice-sampled scales. Chains run concurrently with
/// seeds derived from config.seed; diagnostics are attached and an unhealthy
/// run is still returned (healthy = false).
inline PosteriorSample fit_hier(std::span<const AthleteHistory> histories, const DetectorConfig& cfg,
                                const FitOptions& options = {}) {
  options.prior.validate();
  const HierData data = prepare_data(histories, cfg.min_history);
  if (data.athletes() == 0)
    throw PreconditionError("hierarchical model needs at least one athlete with min_history performances");

  const auto chains = static_cast<std::size_t>(cfg.mcmc_chains);
  const auto draws = static_cast<std::size_t>(cfg.mcmc_draws);
  const auto warmup = static_cast<std::size_t>(cfg.mcmc_warmup);
  const bool count = options.replicate_counts != nullptr;

  std::vector<std::future<detail::ChainOutput>> futures;
  for (std::size_t c = 0; c < chains; ++c)
    futures.push_back(std::async(std::launch::async, [&, c] {
      return detail::run_chain(data, options.prior, c, warmup, draws, cfg.seed, options.retain_athlete_draws, count,
                               options.stop);
    }));

  PosteriorSample s;
  s.chains = chains;
  s.draws_per_chain = draws;
  s.seed = cfg.seed;
  s.athlete_ids = data.athlete_ids;
  s.has_athlete_draws = options.retain_athlete_draws;
  const std::size_t A = data.athletes();
  s.alpha_halves.resize(A * 2 * chains);
  s.beta_halves.resize(A * 2 * chains);
  if (count) options.replicate_counts->assign(data.observations(), 0);

  for (std::size_t c = 0; c < chains; ++c) {
    auto out = futures[c].get();
    s.hyper.insert(s.hyper.end(), out.hyper.begin(), out.hyper.end());
    if (s.has_athlete_draws) {
      s.alpha.insert(s.alpha.end(), out.alpha.begin(), out.alpha.end());
      s.beta.insert(s.beta.end(), out.beta.begin(), out.beta.end());
    }
    for (std::size_t i = 0; i < A; ++i)
      for (std::size_t half = 0; half < 2; ++half) {
        s.alpha_halves[i * 2 * chains + 2 * c + half] = out.alpha_halves[i * 2 + half];
        s.beta_halves[i * 2 * chains + 2 * c + half] = out.beta_halves[i * 2 + half];
      }
    if (count)
      for (std::size_t o = 0; o < out.at_or_below.size(); ++o) (*options.replicate_counts)[o] += out.at_or_below[o];
  }

  if (chains >= 2) {
    s.diagnostics = mcmc_diagnostics(s);
    s.healthy = s.diagnostics.healthy;
  }
  return s;
}

/// Throws SamplerDiverged for an unhealthy sample.
inline void require_healthy(const PosteriorSample& s) {
  if (!s.healthy)
    throw SamplerDiverged("MCMC diagnostics failed (max R-hat " + std::to_string(s.diagnostics.max_rhat) + ")");
}

struct PpcScore {
  double p_value = 1.0;  // two-sided unless configured one-sided
  bool flagged = false;
};

/// Converts replicate counts into p-values and flags. p is the share of
/// replicates at or below the observed time; the two-sided tail is
/// 2 * min(p, 1 - p). The one-sided variant tests the fast tail only (p).
inline std::vector<PpcScore> ppc_from_counts(std::span<const std::uint32_t> at_or_below, std::size_t total_draws,
                                             const DetectorConfig& cfg) {
  std::vector<PpcScore> out(at_or_below.size());
  for (std::size_t o = 0; o < at_or_below.size(); ++o) {
    const double p = static_cast<double>(at_or_below[o]) / static_cast<double>(total_draws);
    const double tail = cfg.bayes_one_sided ? p : std::min(1.0, 2.0 * std::min(p, 1.0 - p));
    out[o] = {tail, tail < cfg.bayes_p_threshold};
  }
  return out;
}

/// Posterior predictive check over the retained draws. Output follows the
/// flattened order of prepare_data (eligible athletes, history order).
inline std::vector<PpcScore> ppc_flag(const PosteriorSample& s, std::span<const AthleteHistory> histories,
                                      const DetectorConfig& cfg, bool allow_unhealthy = false) {
  if (!allow_unhealthy) require_healthy(s);
  if (!s.has_athlete_draws) throw PreconditionError("posterior sample was fitted without athlete draws");
  const HierData data = prepare_data(histories, cfg.min_history);
  if (data.athlete_ids != s.athlete_ids) throw PreconditionError("histories do not match the posterior sample");
  const std::size_t A = data.athletes();
  std::vector<std::uint32_t> counts(data.observations(), 0);
  for (std::size_t c = 0; c < s.chains; ++c)
    for (std::size_t d = 0; d < s.draws_per_chain; ++d) {
      const std::size_t base = (c * s.draws_per_chain + d) * A;
      detail::accumulate_replicates(data, s.seed, c, d, std::span(s.alpha).subspan(base, A),
                                    std::span(s.beta).subspan(base, A), s.hyper_at(c, d).sigma, counts);
    }
  return ppc_from_counts(counts, s.total_draws(), cfg);
}

/// Draws times from the prior predictive at t = 0 (prior sanity checks).
inline std::vector<double> prior_predictive(const HierModelSpec& prior, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> out(n);
  for (auto& y : out) {
    const double mu_alpha = prior.mu_alpha_mean + prior.mu_alpha_sd * normal(rng);
    const double tau_alpha = std::abs(prior.tau_alpha_scale * normal(rng));
    const double sigma = std::abs(prior.sigma_scale * normal(rng));
    const double alpha = mu_alpha + tau_alpha * normal(rng);
    y = alpha + sigma * normal(rng);
  }
  return out;
}

/// Writes hyperparameter draws (and athlete draws when retained and
/// requested) as CSV: chain,draw,mu_alpha,...,sigma[,alpha[id],beta[id]...].
inline void export_draws(const PosteriorSample& s, std::ostream& out, bool include_athletes = false) {
  out << "chain,draw,mu_alpha,mu_beta,tau_alpha,tau_beta,sigma";
  const bool athletes = include_athletes && s.has_athlete_draws;
  if (athletes)
    for (const auto& id : s.athlete_ids) out << ",alpha[" << id << "],beta[" << id << "]";
  out << '\n';
  out.precision(10);
  for (std::size_t c = 0; c < s.chains; ++c)
    for (std::size_t d = 0; d < s.draws_per_chain; ++d) {
      const auto& h = s.hyper_at(c, d);
      out << c << ',' << d << ',' << h.mu_alpha << ',' << h.mu_beta << ',' << h.tau_alpha << ',' << h.tau_beta << ','
          << h.sigma;
      if (athletes)
        for (std::size_t i = 0; i < s.athlete_ids.size(); ++i)
          out << ',' << s.alpha_at(c, d, i) << ',' << s.beta_at(c, d, i);
      out << '\n';
    }
}

}  // namespace perfscreen::bayes
