#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace aligntree {

using RowMatrixD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ForestParams {
  std::uint32_t n_estimators = 50;
  std::uint32_t max_depth = 6;
  std::uint32_t min_samples_split = 5;
  bool bootstrap = true;
  bool all_features = false;  // consider every feature at each node instead of ceil(sqrt(p))
};

struct TreeNode {
  // Internal nodes: feature >= 0, go left when x[feature] <= threshold.
  std::int32_t feature = -1;
  double threshold = 0.0;
  std::int32_t left = -1;
  std::int32_t right = -1;
  // Training counts reaching the node (leaves use them for the probability).
  std::uint32_t negatives = 0;
  std::uint32_t positives = 0;
  double impurity_decrease = 0.0;  // n * gini - n_l * gini_l - n_r * gini_r

  bool is_leaf() const noexcept { return feature < 0; }
  bool operator==(const TreeNode&) const = default;
};

struct DecisionTree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root

  double predict_proba(std::span<const double> x) const;
  std::uint32_t depth() const;
  bool operator==(const DecisionTree&) const = default;
};

struct ForestModel {
  ForestParams params;
  std::uint32_t n_features = 0;
  std::vector<DecisionTree> trees;

  // Mean leaf positive fraction over trees. Throws ShapeError.
  double predict_proba(std::span<const double> x) const;

  // Throws InvalidBundle when the trees violate the structural invariants.
  void validate() const;
};

// Trees are independent given seed + tree index, so the result does not
// depend on the thread count.
ForestModel train_forest(const RowMatrixD& F, std::span<const std::uint8_t> y, const ForestParams& params,
                         std::uint64_t seed, unsigned threads = 0);

struct FeatureImportance {
  std::uint32_t feature = 0;
  double importance = 0.0;
};

// Impurity decrease summed over every tree, normalized to sum to 1, sorted
// descending (ties by feature index).
std::vector<FeatureImportance> feature_importance(const ForestModel& forest);

}  // namespace aligntree
