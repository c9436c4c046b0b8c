#include <gtest/gtest.h>

#include <limits>

#include "fixtures.h"
#include "impinj/forest.h"
#include "impinj/synthetic.h"

namespace impinj {
namespace {

std::vector<int> zero_based(const std::vector<ClassId>& labels) {
  std::vector<int> y;
  for (ClassId c : labels) y.push_back(c - 1);
  return y;
}

// Brute-force Gini: weighted child impurity of splitting on binary feature f.
double split_gini(const Matrix& x, const std::vector<int>& y, int f, int classes) {
  std::vector<double> l(static_cast<std::size_t>(classes)), r(static_cast<std::size_t>(classes));
  double nl = 0, nr = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    if (x(i, f) > 0.5) {
      r[static_cast<std::size_t>(y[static_cast<std::size_t>(i)])] += 1;
      nr += 1;
    } else {
      l[static_cast<std::size_t>(y[static_cast<std::size_t>(i)])] += 1;
      nl += 1;
    }
  }
  if (nl == 0 || nr == 0) return std::numeric_limits<double>::infinity();
  auto gini = [](const std::vector<double>& h, double n) {
    double s = 1;
    for (double v : h) s -= (v / n) * (v / n);
    return s;
  };
  const double n = nl + nr;
  return nl / n * gini(l, nl) + nr / n * gini(r, nr);
}

TEST(Forest, StumpPicksLowestGiniSplit) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Matrix x = testing::random_binary(30, 8, 0.5, rng);
    std::vector<int> y(30);
    std::uniform_int_distribution<int> cls(0, 2);
    for (int i = 0; i < 30; ++i) y[static_cast<std::size_t>(i)] = (x(i, 3) > 0.5 && cls(rng) > 0) ? 2 : cls(rng);
    ForestConfig cfg;
    cfg.n_trees = 1;
    cfg.max_depth = 1;
    cfg.bootstrap = false;
    cfg.max_features = 8;
    cfg.seed = seed;
    const ForestModel m = train_forest(x, y, 3, cfg);
    const auto& root = m.trees[0].nodes[0];
    if (root.is_leaf()) continue;
    double best = std::numeric_limits<double>::infinity();
    for (int f = 0; f < 8; ++f) best = std::min(best, split_gini(x, y, f, 3));
    EXPECT_NEAR(split_gini(x, y, root.feature, 3), best, 1e-12) << seed;
    // Leaf probabilities equal class fractions on each side.
    const Matrix p = predict_proba(m, x);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      double same = 0;
      double hits = 0;
      for (Eigen::Index j = 0; j < x.rows(); ++j) {
        if ((x(j, root.feature) > 0.5) != (x(i, root.feature) > 0.5)) continue;
        same += 1;
        hits += y[static_cast<std::size_t>(j)] == 2;
      }
      EXPECT_NEAR(p(i, 2), hits / same, 1e-12);
    }
  }
}

TEST(Forest, FitsSeparableDataAndRoundTrips) {
  SyntheticSpec spec;
  spec.seed = 9;
  const LabeledDataset ds = make_synthetic_dataset(spec);
  const auto y = zero_based(ds.labels);
  ForestConfig cfg;
  cfg.n_trees = 25;
  cfg.seed = 3;
  const ForestModel m = train_forest(ds.features, y, 6, cfg);
  const Matrix p = predict_proba(m, ds.features);
  int correct = 0;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    EXPECT_NEAR(p.row(i).sum(), 1.0, 1e-12);
    correct += argmax_row(p, i) == y[static_cast<std::size_t>(i)];
  }
  EXPECT_GE(correct, 57);
  EXPECT_GT(m.oob_accuracy, 0.6);
  EXPECT_LE(m.oob_accuracy, 1.0);

  const ForestModel back = forest_from_json(forest_to_json(m));
  EXPECT_EQ(predict_proba(back, ds.features), p);
  EXPECT_DOUBLE_EQ(back.oob_accuracy, m.oob_accuracy);
}

TEST(Forest, DeterministicAndThreadInvariant) {
  SyntheticSpec spec;
  spec.seed = 10;
  const LabeledDataset ds = make_synthetic_dataset(spec);
  const auto y = zero_based(ds.labels);
  ForestConfig cfg;
  cfg.n_trees = 12;
  cfg.seed = 4;
  const std::string a = forest_to_json(train_forest(ds.features, y, 6, cfg));
  const std::string b = forest_to_json(train_forest(ds.features, y, 6, cfg));
  cfg.threads = 3;
  const std::string c = forest_to_json(train_forest(ds.features, y, 6, cfg));
  EXPECT_EQ(a, b);
  EXPECT_EQ(a, c);
}

TEST(Forest, MaxDepthAndErrors) {
  Rng rng(1);
  const Matrix x = testing::random_binary(40, 6, 0.5, rng);
  std::vector<int> y(40);
  for (int i = 0; i < 40; ++i) y[static_cast<std::size_t>(i)] = i % 3;
  ForestConfig cfg;
  cfg.n_trees = 5;
  cfg.max_depth = 2;
  const ForestModel m = train_forest(x, y, 3, cfg);
  for (const auto& t : m.trees) EXPECT_LE(t.depth, 2);
  EXPECT_THROW(predict_proba(m, Matrix::Zero(2, 5)), ShapeError);
  y[0] = 3;
  EXPECT_THROW(train_forest(x, y, 3, cfg), DataError);
  y[0] = 0;
  cfg.n_trees = 0;
  EXPECT_THROW(train_forest(x, y, 3, cfg), ConfigError);
}

TEST(Forest, ContinuousFeaturesUseMidpointThresholds) {
  Matrix x(6, 1);
  x << 0.1, 0.2, 0.3, 0.7, 0.8, 0.9;
  const std::vector<int> y{0, 0, 0, 1, 1, 1};
  ForestConfig cfg;
  cfg.n_trees = 1;
  cfg.bootstrap = false;
  const ForestModel m = train_forest(x, y, 2, cfg);
  EXPECT_EQ(m.trees[0].nodes[0].feature, 0);
  EXPECT_NEAR(m.trees[0].nodes[0].threshold, 0.5, 1e-12);
}

}  // namespace
}  // namespace impinj
