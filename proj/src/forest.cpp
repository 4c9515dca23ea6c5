#include "aligntree/forest.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "aligntree/error.hpp"
#include "aligntree/parallel.hpp"

namespace aligntree {
namespace {

struct Split {
  std::int32_t feature = -1;
  double threshold = 0.0;
  double score = -1.0;  // sum over children of (neg^2 + pos^2) / n_child; higher is purer
};

constexpr double kTieTolerance = 1e-12;

class TreeBuilder {
 public:
  TreeBuilder(const RowMatrixD& F, std::span<const std::uint8_t> y, const ForestParams& params, std::mt19937_64& rng)
      : F_(F), y_(y), params_(params), rng_(rng) {
    const auto p = static_cast<std::uint32_t>(F.cols());
    mtry_ = params.all_features ? p : static_cast<std::uint32_t>(std::ceil(std::sqrt(static_cast<double>(p))));
    feature_order_.resize(p);
    std::iota(feature_order_.begin(), feature_order_.end(), 0u);
  }

  DecisionTree build(std::vector<std::uint32_t> samples) {
    DecisionTree tree;
    grow(tree, std::move(samples), 0);
    return tree;
  }

 private:
  std::int32_t grow(DecisionTree& tree, std::vector<std::uint32_t> samples, std::uint32_t depth) {
    const auto index = static_cast<std::int32_t>(tree.nodes.size());
    tree.nodes.emplace_back();
    TreeNode node;
    for (auto s : samples) (y_[s] ? node.positives : node.negatives)++;
    const std::uint32_t n = node.positives + node.negatives;

    const bool pure = node.positives == 0 || node.negatives == 0;
    if (pure || depth >= params_.max_depth || n < params_.min_samples_split) {
      tree.nodes[static_cast<std::size_t>(index)] = node;
      return index;
    }
    const Split split = best_split(samples, node);
    if (split.feature < 0) {
      tree.nodes[static_cast<std::size_t>(index)] = node;
      return index;
    }
    node.feature = split.feature;
    node.threshold = split.threshold;
    const double n_d = n;
    const double parent = (static_cast<double>(node.negatives) * node.negatives +
                           static_cast<double>(node.positives) * node.positives) / n_d;
    node.impurity_decrease = std::max(0.0, split.score - parent);

    std::vector<std::uint32_t> left, right;
    for (auto s : samples) (F_(s, split.feature) <= split.threshold ? left : right).push_back(s);
    samples.clear();
    samples.shrink_to_fit();
    node.left = grow(tree, std::move(left), depth + 1);
    node.right = grow(tree, std::move(right), depth + 1);
    tree.nodes[static_cast<std::size_t>(index)] = node;
    return index;
  }

  Split best_split(const std::vector<std::uint32_t>& samples, const TreeNode& node) {
    Split best;
    if (!params_.all_features) std::shuffle(feature_order_.begin(), feature_order_.end(), rng_);
    std::uint32_t visited = 0;
    std::vector<std::pair<double, std::uint8_t>> column(samples.size());
    for (auto f : feature_order_) {
      if (visited >= mtry_) break;
      for (std::size_t k = 0; k < samples.size(); ++k) column[k] = {F_(samples[k], f), y_[samples[k]]};
      std::sort(column.begin(), column.end());
      if (column.front().first == column.back().first) continue;  // constant here, draw another
      ++visited;

      double lneg = 0, lpos = 0;
      const double tneg = node.negatives, tpos = node.positives;
      for (std::size_t k = 0; k + 1 < column.size(); ++k) {
        (column[k].second ? lpos : lneg) += 1;
        if (column[k].first == column[k + 1].first) continue;
        const double nl = lneg + lpos, nr = (tneg - lneg) + (tpos - lpos);
        const double score = (lneg * lneg + lpos * lpos) / nl +
                             ((tneg - lneg) * (tneg - lneg) + (tpos - lpos) * (tpos - lpos)) / nr;
        double threshold = 0.5 * (column[k].first + column[k + 1].first);
        if (threshold >= column[k + 1].first) threshold = column[k].first;
        if (better(score, static_cast<std::int32_t>(f), threshold, best)) best = {static_cast<std::int32_t>(f), threshold, score};
      }
    }
    return best;
  }

  static bool better(double score, std::int32_t feature, double threshold, const Split& best) {
    if (best.feature < 0) return true;
    const double tol = kTieTolerance * std::max(1.0, std::abs(best.score));
    if (score > best.score + tol) return true;
    if (score < best.score - tol) return false;
    if (feature != best.feature) return feature < best.feature;
    return threshold < best.threshold;
  }

  const RowMatrixD& F_;
  std::span<const std::uint8_t> y_;
  const ForestParams& params_;
  std::mt19937_64& rng_;
  std::uint32_t mtry_ = 1;
  std::vector<std::uint32_t> feature_order_;
};

}  // namespace

double DecisionTree::predict_proba(std::span<const double> x) const {
  std::size_t i = 0;
  while (!nodes[i].is_leaf())
    i = static_cast<std::size_t>(x[static_cast<std::size_t>(nodes[i].feature)] <= nodes[i].threshold ? nodes[i].left
                                                                                                       : nodes[i].right);
  const auto& leaf = nodes[i];
  return static_cast<double>(leaf.positives) / static_cast<double>(leaf.positives + leaf.negatives);
}

std::uint32_t DecisionTree::depth() const {
  std::uint32_t deepest = 0;
  std::vector<std::pair<std::size_t, std::uint32_t>> stack{{0, 0}};
  while (!stack.empty()) {
    const auto [i, d] = stack.back();
    stack.pop_back();
    deepest = std::max(deepest, d);
    if (!nodes[i].is_leaf()) {
      stack.emplace_back(static_cast<std::size_t>(nodes[i].left), d + 1);
      stack.emplace_back(static_cast<std::size_t>(nodes[i].right), d + 1);
    }
  }
  return deepest;
}

double ForestModel::predict_proba(std::span<const double> x) const {
  if (x.size() != n_features)
    fail(ErrorCode::ShapeError, "forest expects " + std::to_string(n_features) + " features, got " + std::to_string(x.size()));
  if (trees.empty()) fail(ErrorCode::InvalidBundle, "forest has no trees");
  double sum = 0.0;
  for (const auto& t : trees) sum += t.predict_proba(x);
  return sum / static_cast<double>(trees.size());
}

void ForestModel::validate() const {
  if (n_features < 1) fail(ErrorCode::InvalidBundle, "forest feature count must be >= 1");
  if (trees.size() != params.n_estimators)
    fail(ErrorCode::InvalidBundle, "forest has " + std::to_string(trees.size()) + " trees, n_estimators is " +
                                       std::to_string(params.n_estimators));
  for (std::size_t t = 0; t < trees.size(); ++t) {
    const auto& nodes = trees[t].nodes;
    const auto where = "tree " + std::to_string(t) + ": ";
    if (nodes.empty()) fail(ErrorCode::InvalidBundle, where + "no nodes");
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      const auto& n = nodes[i];
      if (n.positives + n.negatives == 0) fail(ErrorCode::InvalidBundle, where + "empty node");
      if (n.is_leaf()) continue;
      if (static_cast<std::uint32_t>(n.feature) >= n_features) fail(ErrorCode::InvalidBundle, where + "feature index out of range");
      // Children are emitted after their parent, which also rules out cycles.
      if (n.left <= static_cast<std::int32_t>(i) || n.right <= static_cast<std::int32_t>(i) ||
          static_cast<std::size_t>(n.left) >= nodes.size() || static_cast<std::size_t>(n.right) >= nodes.size())
        fail(ErrorCode::InvalidBundle, where + "bad child index");
      if (!std::isfinite(n.threshold)) fail(ErrorCode::InvalidBundle, where + "non-finite threshold");
    }
    if (trees[t].depth() > params.max_depth) fail(ErrorCode::InvalidBundle, where + "deeper than max_depth");
  }
}

ForestModel train_forest(const RowMatrixD& F, std::span<const std::uint8_t> y, const ForestParams& params,
                         std::uint64_t seed, unsigned threads) {
  const auto n = static_cast<std::size_t>(F.rows());
  if (n == 0) fail(ErrorCode::EmptyTraining, "forest training set is empty");
  if (y.size() != n) fail(ErrorCode::ShapeError, "label count differs from row count");
  if (F.cols() < 1) fail(ErrorCode::ShapeError, "forest needs at least one feature");
  if (params.n_estimators < 1) fail(ErrorCode::RangeError, "n_estimators must be >= 1");
  for (Eigen::Index r = 0; r < F.rows(); ++r)
    for (Eigen::Index c = 0; c < F.cols(); ++c)
      if (!std::isfinite(F(r, c))) fail(ErrorCode::ShapeError, "non-finite forest feature");

  ForestModel model;
  model.params = params;
  model.n_features = static_cast<std::uint32_t>(F.cols());
  model.trees.resize(params.n_estimators);
  parallel_for(params.n_estimators, [&](std::size_t t) {
    std::mt19937_64 rng(seed + t);
    std::vector<std::uint32_t> samples(n);
    if (params.bootstrap) {
      std::uniform_int_distribution<std::uint32_t> pick(0, static_cast<std::uint32_t>(n - 1));
      for (auto& s : samples) s = pick(rng);
    } else {
      std::iota(samples.begin(), samples.end(), 0u);
    }
    TreeBuilder builder(F, y, params, rng);
    model.trees[t] = builder.build(std::move(samples));
  }, threads);
  return model;
}

std::vector<FeatureImportance> feature_importance(const ForestModel& forest) {
  std::vector<FeatureImportance> out(forest.n_features);
  for (std::uint32_t f = 0; f < forest.n_features; ++f) out[f].feature = f;
  double total = 0.0;
  for (const auto& t : forest.trees)
    for (const auto& n : t.nodes)
      if (!n.is_leaf()) {
        out[static_cast<std::size_t>(n.feature)].importance += n.impurity_decrease;
        total += n.impurity_decrease;
      }
  if (total > 0)
    for (auto& fi : out) fi.importance /= total;
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.importance > b.importance; });
  return out;
}

}  // namespace aligntree
