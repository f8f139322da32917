#pragma once

#include "perfscreen/core/errors.hpp"
#include "perfscreen/detect/features.hpp"

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>
#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

namespace perfscreen::copula {

inline constexpr std::size_t kDims = 3;
inline constexpr std::array<const char*, kDims> kFeatureNames = {"time", "wind", "reaction_time"};
inline constexpr std::size_t kMinRows = 50;

using Row = std::array<double, kDims>;

/// Smallest eigenvalue accepted for a correlation matrix before shrinking it
/// toward the identity.
inline constexpr double kMinEigenvalue = 1e-8;

struct CopulaModel {
  static constexpr int kFormatVersion = 1;

  std::array<std::vector<double>, kDims> marginals;  // sorted training values
  Eigen::Matrix3d correlation = Eigen::Matrix3d::Identity();
  Eigen::Matrix3d precision_minus_identity = Eigen::Matrix3d::Zero();
  double log_det = 0.0;
  double shrinkage = 0.0;  // epsilon used to restore positive definiteness
  std::array<bool, kDims> degenerate{};
  double density_cutoff = 0.0;

  /// Mid-rank plotting position: (#{< x} + (#{== x} + 1) / 2) / (n + 1).
  /// Equals rank / (n + 1) for untied training points and never reaches 0 or 1.
  [[nodiscard]] double u(std::size_t k, double x) const {
    const auto& s = marginals[k];
    const auto lo = std::lower_bound(s.begin(), s.end(), x);
    const auto hi = std::upper_bound(lo, s.end(), x);
    const double less = static_cast<double>(lo - s.begin());
    const double equal = static_cast<double>(hi - lo);
    return (less + (equal + 1.0) / 2.0) / (static_cast<double>(s.size()) + 1.0);
  }

  [[nodiscard]] Eigen::Vector3d normal_scores(const Row& r) const {
    static const boost::math::normal_distribution<double> std_normal;
    Eigen::Vector3d z;
    for (std::size_t k = 0; k < kDims; ++k) z[static_cast<Eigen::Index>(k)] = boost::math::quantile(std_normal, u(k, r[k]));
    return z;
  }

  /// log c(u) = log phi_R(z) - sum log phi(z_k)
  ///          = -1/2 log det R - 1/2 z^T (R^-1 - I) z.
  [[nodiscard]] double log_density_z(const Eigen::Vector3d& z) const {
    return -0.5 * log_det - 0.5 * z.dot(precision_minus_identity * z);
  }

  [[nodiscard]] double log_density(const Row& r) const { return log_density_z(normal_scores(r)); }

  /// Installs a correlation matrix (must be positive definite).
  void set_correlation(const Eigen::Matrix3d& r) {
    const Eigen::LLT<Eigen::Matrix3d> llt(r);
    if (llt.info() != Eigen::Success) throw PreconditionError("copula correlation is not positive definite");
    correlation = r;
    precision_minus_identity = llt.solve(Eigen::Matrix3d::Identity()) - Eigen::Matrix3d::Identity();
    const auto& l = llt.matrixL();
    log_det = 0.0;
    for (Eigen::Index i = 0; i < 3; ++i) log_det += 2.0 * std::log(l(i, i));
  }
};

/// Shrinks R toward I by the minimal epsilon that lifts its smallest
/// eigenvalue to kMinEigenvalue: (1 - eps) R + eps I.
inline std::pair<Eigen::Matrix3d, double> regularize(const Eigen::Matrix3d& r) {
  const Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(r, Eigen::EigenvaluesOnly);
  const double lambda = es.eigenvalues().minCoeff();
  if (lambda >= kMinEigenvalue) return {r, 0.0};
  const double eps = (kMinEigenvalue - lambda) / (1.0 - lambda);
  return {(1.0 - eps) * r + eps * Eigen::Matrix3d::Identity(), eps};
}

/// Fits empirical marginals and the normal-scores correlation. A constant
/// feature gets an identity row/column and is reported in `degenerate`.
inline CopulaModel copula_fit(std::span<const Row> rows, double density_quantile) {
  if (rows.size() < kMinRows)
    throw PreconditionError("copula needs at least " + std::to_string(kMinRows) + " complete rows");
  CopulaModel m;
  const std::size_t n = rows.size();
  for (std::size_t k = 0; k < kDims; ++k) {
    auto& s = m.marginals[k];
    s.reserve(n);
    for (const auto& r : rows) s.push_back(r[k]);
    std::sort(s.begin(), s.end());
    m.degenerate[k] = s.front() == s.back();
  }

  std::vector<Eigen::Vector3d> z(n);
  for (std::size_t i = 0; i < n; ++i) z[i] = m.normal_scores(rows[i]);
  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  for (const auto& v : z) mean += v;
  mean /= static_cast<double>(n);
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (const auto& v : z) cov += (v - mean) * (v - mean).transpose();

  Eigen::Matrix3d r = Eigen::Matrix3d::Identity();
  for (Eigen::Index a = 0; a < 3; ++a)
    for (Eigen::Index b = 0; b < 3; ++b) {
      if (a == b || m.degenerate[static_cast<std::size_t>(a)] || m.degenerate[static_cast<std::size_t>(b)]) continue;
      r(a, b) = cov(a, b) / std::sqrt(cov(a, a) * cov(b, b));
    }
  const auto [reg, eps] = regularize(r);
  m.shrinkage = eps;
  m.set_correlation(reg);

  std::vector<double> logd(n);
  for (std::size_t i = 0; i < n; ++i) logd[i] = m.log_density_z(z[i]);
  m.density_cutoff = ml::lower_quantile_cut(std::move(logd), density_quantile);
  return m;
}

struct CopulaScore {
  double log_density = 0.0;
  bool flagged = false;
};

/// Flags rows whose copula log-density lies strictly below the cutoff.
inline std::vector<CopulaScore> copula_flag(const CopulaModel& m, std::span<const Row> rows) {
  std::vector<CopulaScore> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double ld = m.log_density(rows[i]);
    out[i] = {ld, ld < m.density_cutoff};
  }
  return out;
}

inline nlohmann::json to_json(const CopulaModel& m) {
  nlohmann::json corr = nlohmann::json::array();
  for (Eigen::Index a = 0; a < 3; ++a) corr.push_back({m.correlation(a, 0), m.correlation(a, 1), m.correlation(a, 2)});
  return {{"format", "perfscreen.copula"},
          {"version", CopulaModel::kFormatVersion},
          {"features", kFeatureNames},
          {"marginals", m.marginals},
          {"correlation", corr},
          {"shrinkage", m.shrinkage},
          {"degenerate", m.degenerate},
          {"density_cutoff", m.density_cutoff}};
}

inline CopulaModel copula_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "perfscreen.copula" || j.value("version", 0) != CopulaModel::kFormatVersion)
    throw PreconditionError("unsupported copula model format");
  CopulaModel m;
  m.marginals = j.at("marginals").get<std::array<std::vector<double>, kDims>>();
  Eigen::Matrix3d r;
  for (Eigen::Index a = 0; a < 3; ++a)
    for (Eigen::Index b = 0; b < 3; ++b) r(a, b) = j.at("correlation")[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)].get<double>();
  m.set_correlation(r);
  m.shrinkage = j.at("shrinkage").get<double>();
  m.degenerate = j.at("degenerate").get<std::array<bool, kDims>>();
  m.density_cutoff = j.at("density_cutoff").get<double>();
  return m;
}

}  // namespace perfscreen::copula
