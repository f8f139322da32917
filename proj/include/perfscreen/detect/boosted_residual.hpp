#pragma once

#include "perfscreen/detect/features.hpp"
#include "perfscreen/detect/isolation_forest.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <stop_token>
#include <vector>

namespace perfscreen::ml {

struct RegressionNode {
  std::int32_t feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  std::int32_t left = -1;
  std::int32_t right = -1;
  double value = 0.0;
};

struct RegressionTree {
  std::vector<RegressionNode> nodes;

  [[nodiscard]] double predict(std::span<const double> x) const {
    std::int32_t at = 0;
    while (nodes[at].feature >= 0)
      at = x[static_cast<std::size_t>(nodes[at].feature)] < nodes[at].threshold ? nodes[at].left : nodes[at].right;
    return nodes[at].value;
  }
};

struct BoostedResidualModel {
  static constexpr int kFormatVersion = 1;

  std::vector<RegressionTree> stages;
  double learning_rate = 0.1;
  double base_prediction = 0.0;
  double residual_cutoff = 0.0;
  std::vector<double> train_loss;  // mean squared error after each stage

  [[nodiscard]] double predict(std::span<const double> x) const {
    double y = base_prediction;
    for (const auto& t : stages) y += learning_rate * t.predict(x);
    return y;
  }
};

namespace detail {

/// Grows one least-squares tree level by level using a single presorted pass
/// per feature and level (exact greedy splits).
inline RegressionTree grow_regression_tree(const Matrix& x, std::span<const double> residual,
                                           const std::vector<std::vector<std::size_t>>& sorted_by_feature,
                                           int max_depth, std::vector<std::int32_t>& node_of) {
  RegressionTree tree;
  tree.nodes.push_back({});
  std::fill(node_of.begin(), node_of.end(), 0);
  std::vector<std::int32_t> frontier{0};

  for (int depth = 0; depth < max_depth && !frontier.empty(); ++depth) {
    std::vector<std::int32_t> slot_of(tree.nodes.size(), -1);
    for (std::size_t s = 0; s < frontier.size(); ++s) slot_of[static_cast<std::size_t>(frontier[s])] = static_cast<std::int32_t>(s);

    const std::size_t k = frontier.size();
    std::vector<double> total_sum(k, 0.0);
    std::vector<std::size_t> total_n(k, 0);
    for (std::size_t i = 0; i < x.rows; ++i) {
      const auto s = slot_of[static_cast<std::size_t>(node_of[i])];
      if (s < 0) continue;
      total_sum[static_cast<std::size_t>(s)] += residual[i];
      ++total_n[static_cast<std::size_t>(s)];
    }

    struct Best {
      double gain = 0.0;
      std::int32_t feature = -1;
      double threshold = 0.0;
    };
    std::vector<Best> best(k);

    for (std::size_t f = 0; f < x.cols; ++f) {
      std::vector<double> left_sum(k, 0.0);
      std::vector<std::size_t> left_n(k, 0);
      std::vector<double> last(k, 0.0);
      for (const std::size_t i : sorted_by_feature[f]) {
        const auto s_signed = slot_of[static_cast<std::size_t>(node_of[i])];
        if (s_signed < 0) continue;
        const auto s = static_cast<std::size_t>(s_signed);
        const double v = x(i, f);
        if (left_n[s] > 0 && v > last[s]) {
          const double nl = static_cast<double>(left_n[s]);
          const double nr = static_cast<double>(total_n[s] - left_n[s]);
          const double sl = left_sum[s];
          const double sr = total_sum[s] - sl;
          const double gain = sl * sl / nl + sr * sr / nr - total_sum[s] * total_sum[s] / static_cast<double>(total_n[s]);
          if (gain > best[s].gain) {
            double thr = 0.5 * (last[s] + v);
            if (!(thr > last[s])) thr = v;
            best[s] = {gain, static_cast<std::int32_t>(f), thr};
          }
        }
        left_sum[s] += residual[i];
        ++left_n[s];
        last[s] = v;
      }
    }

    std::vector<std::int32_t> next;
    for (std::size_t s = 0; s < k; ++s) {
      const auto id = frontier[s];
      if (best[s].feature < 0 || best[s].gain <= 1e-12 * (1.0 + std::abs(total_sum[s]))) continue;
      const auto left = static_cast<std::int32_t>(tree.nodes.size());
      tree.nodes.push_back({});
      tree.nodes.push_back({});
      auto& node = tree.nodes[static_cast<std::size_t>(id)];
      node.feature = best[s].feature;
      node.threshold = best[s].threshold;
      node.left = left;
      node.right = left + 1;
      next.push_back(left);
      next.push_back(left + 1);
    }
    if (next.empty()) break;
    for (std::size_t i = 0; i < x.rows; ++i) {
      const auto& node = tree.nodes[static_cast<std::size_t>(node_of[i])];
      if (node.feature >= 0)
        node_of[i] = x(i, static_cast<std::size_t>(node.feature)) < node.threshold ? node.left : node.right;
    }
    frontier = std::move(next);
  }

  // Leaf values: mean residual of the rows that land there.
  std::vector<double> sum(tree.nodes.size(), 0.0);
  std::vector<std::size_t> count(tree.nodes.size(), 0);
  for (std::size_t i = 0; i < x.rows; ++i) {
    sum[static_cast<std::size_t>(node_of[i])] += residual[i];
    ++count[static_cast<std::size_t>(node_of[i])];
  }
  for (std::size_t n = 0; n < tree.nodes.size(); ++n)
    if (tree.nodes[n].feature < 0 && count[n] > 0) tree.nodes[n].value = sum[n] / static_cast<double>(count[n]);
  return tree;
}

}  // namespace detail

/// Squared-error gradient boosting. Throws DegenerateTarget when every
/// target is equal. Training loss must not increase from stage to stage; a
/// violation is a logic error.
inline BoostedResidualModel fit_boosted_residual(const Matrix& x, std::span<const double> y, int num_trees,
                                                 int max_depth, double learning_rate, double residual_quantile,
                                                 std::stop_token stop = {}) {
  if (x.rows != y.size()) throw PreconditionError("feature and target row counts differ");
  if (x.rows == 0) throw PreconditionError("boosting needs at least one row");
  if (std::all_of(y.begin(), y.end(), [&](double v) { return v == y.front(); }))
    throw DegenerateTarget("all targets are equal");

  BoostedResidualModel model;
  model.learning_rate = learning_rate;
  model.base_prediction = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());

  std::vector<std::vector<std::size_t>> sorted(x.cols, std::vector<std::size_t>(x.rows));
  for (std::size_t f = 0; f < x.cols; ++f) {
    std::iota(sorted[f].begin(), sorted[f].end(), std::size_t{0});
    std::stable_sort(sorted[f].begin(), sorted[f].end(), [&](std::size_t a, std::size_t b) { return x(a, f) < x(b, f); });
  }

  std::vector<double> pred(x.rows, model.base_prediction);
  std::vector<double> residual(x.rows);
  std::vector<std::int32_t> node_of(x.rows, 0);
  const auto mse = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < x.rows; ++i) s += (y[i] - pred[i]) * (y[i] - pred[i]);
    return s / static_cast<double>(x.rows);
  };
  double loss = mse();

  for (int stage = 0; stage < num_trees; ++stage) {
    if (stop.stop_requested()) throw Cancelled("boosting cancelled");
    for (std::size_t i = 0; i < x.rows; ++i) residual[i] = y[i] - pred[i];
    auto tree = detail::grow_regression_tree(x, residual, sorted, max_depth, node_of);
    for (std::size_t i = 0; i < x.rows; ++i)
      pred[i] += learning_rate * tree.nodes[static_cast<std::size_t>(node_of[i])].value;
    const double next = mse();
    if (next > loss * (1.0 + 1e-9) + 1e-15)
      throw std::logic_error("boosting training loss increased at stage " + std::to_string(stage));
    loss = next;
    model.train_loss.push_back(loss);
    model.stages.push_back(std::move(tree));
  }

  std::vector<double> abs_residual(x.rows);
  for (std::size_t i = 0; i < x.rows; ++i) abs_residual[i] = std::abs(y[i] - pred[i]);
  model.residual_cutoff = upper_quantile_cut(abs_residual, residual_quantile);
  return model;
}

inline nlohmann::json to_json(const BoostedResidualModel& m) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& t : m.stages) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const auto& n : t.nodes) nodes.push_back({n.feature, n.threshold, n.left, n.right, n.value});
    stages.push_back(std::move(nodes));
  }
  return {{"format", "perfscreen.gbt"},
          {"version", BoostedResidualModel::kFormatVersion},
          {"learning_rate", m.learning_rate},
          {"base_prediction", m.base_prediction},
          {"residual_cutoff", m.residual_cutoff},
          {"stages", std::move(stages)}};
}

inline BoostedResidualModel boosted_residual_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "perfscreen.gbt" || j.value("version", 0) != BoostedResidualModel::kFormatVersion)
    throw PreconditionError("unsupported boosted model format");
  BoostedResidualModel m;
  m.learning_rate = j.at("learning_rate").get<double>();
  m.base_prediction = j.at("base_prediction").get<double>();
  m.residual_cutoff = j.at("residual_cutoff").get<double>();
  for (const auto& tj : j.at("stages")) {
    RegressionTree t;
    for (const auto& n : tj)
      t.nodes.push_back({n[0].get<std::int32_t>(), n[1].get<double>(), n[2].get<std::int32_t>(),
                         n[3].get<std::int32_t>(), n[4].get<double>()});
    m.stages.push_back(std::move(t));
  }
  return m;
}

}  // namespace perfscreen::ml
