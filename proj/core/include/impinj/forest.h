#pragma once

#include <optional>
#include <string>
#include <vector>

#include "impinj/common.h"

namespace impinj {

struct ForestConfig {
  int n_trees = 300;
  int max_depth = 32;
  int min_samples_leaf = 1;
  // Features sampled per split; unset means ceil(sqrt(d)).
  std::optional<int> max_features;
  bool bootstrap = true;
  int threads = 1;
  std::uint64_t seed = 0;
};

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  // Class-count histogram (bootstrap multiplicities included); leaves only.
  std::vector<double> histogram;

  bool is_leaf() const { return feature < 0; }
};

struct DecisionTree {
  std::vector<TreeNode> nodes;
  int depth = 0;

  // Class-count histogram of the leaf reached by `x`.
  const std::vector<double>& leaf_for(std::span<const double> x) const;
};

struct ForestModel {
  std::vector<DecisionTree> trees;
  int feature_count = 0;
  int class_count = 0;
  // Out-of-bag accuracy on the training data; NaN when not computable.
  double oob_accuracy = 0.0;
};

// Labels are 0-based class indices in [0, class_count).
ForestModel train_forest(const Matrix& x, std::span<const int> y, int class_count, const ForestConfig& cfg);

// Rows are class distributions: the mean of the trees' normalized leaf
// histograms.
Matrix predict_proba(const ForestModel& model, const Matrix& x);

std::string forest_to_json(const ForestModel& model);
ForestModel forest_from_json(const std::string& text);

}  // namespace impinj
