#pragma once

#include "perfscreen/core/errors.hpp"
#include "perfscreen/core/hash.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stop_token>
#include <vector>

namespace perfscreen::ml {

inline constexpr double kEulerGamma = 0.5772156649015329;

/// Average path length of an unsuccessful BST search over n points; the
/// normaliser c(n) of the isolation score.
inline double average_path_length(double n) {
  if (n <= 1.0) return 0.0;
  if (n <= 2.0) return 1.0;
  return 2.0 * (std::log(n - 1.0) + kEulerGamma) - 2.0 * (n - 1.0) / n;
}

/// s(x, n) = 2^(-E[h(x)] / c(n)).
inline double isolation_score(double mean_path_length, double n) {
  const double c = average_path_length(n);
  if (c <= 0.0) return 1.0;
  return std::exp2(-mean_path_length / c);
}

/// Dense row-major feature matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  [[nodiscard]] double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  [[nodiscard]] std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
};

struct IsolationNode {
  std::int32_t feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  std::int32_t left = -1;
  std::int32_t right = -1;
  std::uint32_t size = 0;  // training points that reached the node
};

struct IsolationTree {
  std::vector<IsolationNode> nodes;

  /// Edges to the leaf plus c(leaf size) for leaves cut off by the height
  /// limit or holding duplicates.
  [[nodiscard]] double path_length(std::span<const double> x) const {
    std::int32_t at = 0;
    double depth = 0.0;
    while (nodes[at].feature >= 0) {
      at = x[static_cast<std::size_t>(nodes[at].feature)] < nodes[at].threshold ? nodes[at].left : nodes[at].right;
      depth += 1.0;
    }
    return depth + average_path_length(nodes[at].size);
  }
};

struct IsolationForestModel {
  static constexpr int kFormatVersion = 1;

  std::vector<IsolationTree> trees;
  std::size_t subsample_size = 0;
  double c_norm = 0.0;
  std::size_t num_features = 0;

  [[nodiscard]] double mean_path_length(std::span<const double> x) const {
    double s = 0.0;
    for (const auto& t : trees) s += t.path_length(x);
    return trees.empty() ? 0.0 : s / static_cast<double>(trees.size());
  }

  [[nodiscard]] double score(std::span<const double> x) const {
    if (c_norm <= 0.0) return 1.0;
    return std::exp2(-mean_path_length(x) / c_norm);
  }

  [[nodiscard]] std::vector<double> score_all(const Matrix& m) const {
    std::vector<double> out(m.rows);
    for (std::size_t r = 0; r < m.rows; ++r) out[r] = score(m.row(r));
    return out;
  }
};

namespace detail {

inline void grow(IsolationTree& tree, const Matrix& data, std::vector<std::size_t>& idx, std::size_t begin,
                 std::size_t end, int depth, int height_limit, std::mt19937_64& rng) {
  const auto node_id = static_cast<std::int32_t>(tree.nodes.size());
  tree.nodes.push_back({});
  tree.nodes[node_id].size = static_cast<std::uint32_t>(end - begin);
  if (end - begin <= 1 || depth >= height_limit) return;

  // Features that still vary inside the node.
  std::vector<std::pair<std::size_t, std::pair<double, double>>> candidates;
  for (std::size_t f = 0; f < data.cols; ++f) {
    double lo = data(idx[begin], f), hi = lo;
    for (std::size_t i = begin + 1; i < end; ++i) {
      const double v = data(idx[i], f);
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    if (hi > lo) candidates.push_back({f, {lo, hi}});
  }
  if (candidates.empty()) return;

  std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
  const auto& [feature, range] = candidates[pick(rng)];
  std::uniform_real_distribution<double> split(range.first, range.second);
  double threshold = split(rng);
  if (threshold <= range.first) threshold = std::nextafter(range.first, range.second);

  const auto mid_it = std::partition(idx.begin() + static_cast<std::ptrdiff_t>(begin),
                                     idx.begin() + static_cast<std::ptrdiff_t>(end),
                                     [&](std::size_t r) { return data(r, feature) < threshold; });
  const auto mid = static_cast<std::size_t>(mid_it - idx.begin());

  tree.nodes[node_id].feature = static_cast<std::int32_t>(feature);
  tree.nodes[node_id].threshold = threshold;
  const auto left = static_cast<std::int32_t>(tree.nodes.size());
  tree.nodes[node_id].left = left;
  grow(tree, data, idx, begin, mid, depth + 1, height_limit, rng);
  const auto right = static_cast<std::int32_t>(tree.nodes.size());
  tree.nodes[node_id].right = right;
  grow(tree, data, idx, mid, end, depth + 1, height_limit, rng);
}

}  // namespace detail

/// Canonical isolation forest: each tree sees ψ = min(256, N) rows drawn
/// without replacement, splits on a uniformly chosen varying feature at a
/// uniform threshold, and stops at height ceil(log2 ψ).
inline IsolationForestModel fit_isolation_forest(const Matrix& data, int num_trees, std::uint64_t seed,
                                                 std::stop_token stop = {}) {
  if (data.rows < 2) throw PreconditionError("isolation forest needs at least 2 rows");
  IsolationForestModel model;
  model.num_features = data.cols;
  model.subsample_size = std::min<std::size_t>(256, data.rows);
  model.c_norm = average_path_length(static_cast<double>(model.subsample_size));
  const int height_limit = static_cast<int>(std::ceil(std::log2(static_cast<double>(model.subsample_size))));

  model.trees.resize(static_cast<std::size_t>(num_trees));
  std::vector<std::size_t> all(data.rows);
  for (std::size_t t = 0; t < model.trees.size(); ++t) {
    if (stop.stop_requested()) throw Cancelled("isolation forest fit cancelled");
    std::mt19937_64 rng(derive_seed(seed, 0x1f0e, t));
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    // Partial Fisher-Yates: first ψ entries become the subsample.
    for (std::size_t i = 0; i < model.subsample_size; ++i) {
      std::uniform_int_distribution<std::size_t> d(i, all.size() - 1);
      std::swap(all[i], all[d(rng)]);
    }
    std::vector<std::size_t> idx(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(model.subsample_size));
    model.trees[t].nodes.reserve(2 * model.subsample_size);
    detail::grow(model.trees[t], data, idx, 0, idx.size(), 0, height_limit, rng);
  }
  return model;
}

inline nlohmann::json to_json(const IsolationForestModel& m) {
  nlohmann::json trees = nlohmann::json::array();
  for (const auto& t : m.trees) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const auto& n : t.nodes) nodes.push_back({n.feature, n.threshold, n.left, n.right, n.size});
    trees.push_back(std::move(nodes));
  }
  return {{"format", "perfscreen.iforest"},
          {"version", IsolationForestModel::kFormatVersion},
          {"subsample_size", m.subsample_size},
          {"c_norm", m.c_norm},
          {"num_features", m.num_features},
          {"trees", std::move(trees)}};
}

inline IsolationForestModel isolation_forest_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "perfscreen.iforest" || j.value("version", 0) != IsolationForestModel::kFormatVersion)
    throw PreconditionError("unsupported isolation forest model format");
  IsolationForestModel m;
  m.subsample_size = j.at("subsample_size").get<std::size_t>();
  m.c_norm = j.at("c_norm").get<double>();
  m.num_features = j.at("num_features").get<std::size_t>();
  for (const auto& tj : j.at("trees")) {
    IsolationTree t;
    for (const auto& n : tj)
      t.nodes.push_back({n[0].get<std::int32_t>(), n[1].get<double>(), n[2].get<std::int32_t>(),
                         n[3].get<std::int32_t>(), n[4].get<std::uint32_t>()});
    m.trees.push_back(std::move(t));
  }
  return m;
}

}  // namespace perfscreen::ml
