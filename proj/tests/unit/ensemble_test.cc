#include <gtest/gtest.h>

#include <numeric>

#include "fixtures.h"
#include "impinj/ensemble.h"
#include "impinj/synthetic.h"

namespace impinj {
namespace {

TEST(SimplexGrid, CountOrderAndSums) {
  const auto g = simplex_grid(4, 0.05);
  ASSERT_EQ(g.size(), 1771u);
  EXPECT_EQ(g.front(), (std::vector<double>{0, 0, 0, 1}));
  EXPECT_EQ(g.back(), (std::vector<double>{1, 0, 0, 0}));
  for (std::size_t i = 0; i < g.size(); ++i) {
    EXPECT_NEAR(std::accumulate(g[i].begin(), g[i].end(), 0.0), 1.0, 1e-12);
    if (i > 0) EXPECT_TRUE(g[i - 1] < g[i]);
  }
  EXPECT_EQ(simplex_grid(3, 0.5).size(), 6u);
  EXPECT_EQ(simplex_grid(4, 0.25).size(), 35u);
  EXPECT_THROW(simplex_grid(4, 0.3), ConfigError);
  EXPECT_THROW(simplex_grid(0, 0.5), ConfigError);
}

int first_argmax(const std::vector<double>& v) {
  int best = 0;
  for (int j = 1; j < static_cast<int>(v.size()); ++j) {
    if (v[static_cast<std::size_t>(j)] > v[static_cast<std::size_t>(best)]) best = j;
  }
  return best;
}

TEST(OptimizeWeights, MatchesBruteForceOracle) {
  Rng rng(4);
  const int n = 30;
  const int classes = 3;
  for (int trial = 0; trial < 3; ++trial) {
    std::vector<Matrix> probs;
    for (int m = 0; m < 4; ++m) {
      Matrix p = testing::random_matrix(n, classes, rng, 0.01, 1.0);
      for (Eigen::Index i = 0; i < n; ++i) p.row(i) /= p.row(i).sum();
      probs.push_back(p);
    }
    std::vector<int> y(n);
    for (int& v : y) v = std::uniform_int_distribution<int>(0, classes - 1)(rng);
    const WeightSearchResult got = optimize_weights(probs, y, classes, 0.1);
    // Plain nested loops over integer grid counts in lexicographic order.
    double best = -1.0;
    std::vector<double> best_w;
    for (int a = 0; a <= 10; ++a) {
      for (int b = 0; a + b <= 10; ++b) {
        for (int c = 0; a + b + c <= 10; ++c) {
          const int d = 10 - a - b - c;
          const double w[4] = {a / 10.0, b / 10.0, c / 10.0, d / 10.0};
          std::vector<int> pred;
          for (int i = 0; i < n; ++i) {
            std::vector<double> q(classes, 0.0);
            for (int m = 0; m < 4; ++m) {
              for (int k = 0; k < classes; ++k) q[static_cast<std::size_t>(k)] += w[m] * probs[static_cast<std::size_t>(m)](i, k);
            }
            pred.push_back(first_argmax(q));
          }
          const double f1 = oracle::macro_f1(pred, y, classes);
          if (f1 > best) {
            best = f1;
            best_w.assign(w, w + 4);
          }
        }
      }
    }
    EXPECT_EQ(got.evaluated, 286u);
    EXPECT_NEAR(got.macro_f1, best, 1e-12);
    ASSERT_EQ(got.weights.size(), 4u);
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(got.weights[static_cast<std::size_t>(i)], best_w[static_cast<std::size_t>(i)], 1e-12);
  }
}

TEST(OptimizeWeights, TiesKeepLexicographicallySmallest) {
  const Matrix p = (Matrix(2, 2) << 0.9, 0.1, 0.2, 0.8).finished();
  const std::vector<Matrix> probs{p, p, p, p};
  const std::vector<int> y{0, 1};
  const auto r = optimize_weights(probs, y, 2, 0.25);
  EXPECT_EQ(r.weights, (std::vector<double>{0, 0, 0, 1}));
  EXPECT_DOUBLE_EQ(r.macro_f1, 1.0);
}

TEST(CombineMembers, WeightedSum) {
  const Matrix a = (Matrix(1, 2) << 1, 0).finished();
  const Matrix b = (Matrix(1, 2) << 0, 1).finished();
  const std::vector<Matrix> probs{a, b};
  const std::vector<double> w{0.25, 0.75};
  EXPECT_EQ(combine_members(probs, w), (Matrix(1, 2) << 0.25, 0.75).finished());
  const std::vector<double> short_w{1.0};
  EXPECT_THROW(combine_members(probs, short_w), ShapeError);
}

TEST(TargetsCsv, RoundTrip) {
  const std::vector<TargetEntry> t{{4, 2, 0.75}, {9, 5, 1.0 / 3.0}};
  const std::string text = targets_to_csv(t);
  EXPECT_EQ(text.substr(0, text.find('\n')), "sample_id,c_star,confidence");
  const auto back = targets_from_csv(text);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].c_star, 5);
  EXPECT_EQ(back[1].confidence, 1.0 / 3.0);
  EXPECT_THROW(targets_from_csv("id\n"), DataError);
  EXPECT_THROW(targets_from_csv("sample_id,c_star,confidence\n1;2\n"), DataError);
}

EnsembleConfig small_config() {
  EnsembleConfig cfg;
  cfg.forest.n_trees = 8;
  cfg.forest.max_depth = 6;
  cfg.logistic.max_iters = 150;
  cfg.encoder.hidden1 = 16;
  cfg.encoder.hidden2 = 12;
  cfg.encoder.embedding_dim = 6;
  cfg.encoder.epochs = 4;
  cfg.encoder.batch_size = 16;
  cfg.grid_step = 0.25;
  return cfg;
}

TEST(BuildEnsemble, FitsSavesAndGuidesTargets) {
  SyntheticSpec spec;
  spec.class_sizes = {12, 12, 12, 12, 12, 12};
  spec.features = 48;
  spec.seed = 21;
  const LabeledDataset train = make_synthetic_dataset(spec);
  spec.class_sizes = {5, 5, 5, 5, 5, 5};
  spec.seed = 22;
  const LabeledDataset val = make_synthetic_dataset(spec);

  EnsembleBuildReport report;
  EnsembleModel a = build_ensemble(train, val, {6, 1, 2, 3, 4, 5, 3}, small_config(), 7, &report);
  EXPECT_EQ(a.class_set, (std::vector<ClassId>{1, 2, 3, 4, 5, 6}));
  EXPECT_NEAR(a.weights[0] + a.weights[1] + a.weights[2] + a.weights[3], 1.0, 1e-12);
  EXPECT_GT(report.val_macro_f1, 0.8);
  const Matrix q = ensemble_predict(a, val.features);
  EXPECT_LT((q.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-9);
  const auto labels = predict_labels(a, q);
  int correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += labels[i] == val.labels[i];
  EXPECT_GE(correct, 24);
  EXPECT_EQ(a.local_index(6), 5);
  EXPECT_THROW(a.local_index(7), DataError);

  testing::TempDir dir("ensemble");
  save_ensemble(dir.path(), a);
  EnsembleModel back = load_ensemble(dir.path());
  EXPECT_EQ(ensemble_predict(back, val.features), q);
  EXPECT_EQ(back.weights, a.weights);

  const std::vector<int> ids(val.size(), 0);
  EXPECT_THROW(assign_targets(a, val.features, ids), ConfigError);
  EnsembleModel b = build_ensemble(train, val, {1, 2, 3, 4, 5}, small_config(), 8);
  const auto malware_rows = val.indices_of_class(kMalwareClass);
  const Matrix xm = gather(val.features, malware_rows);
  const auto targets = assign_targets(b, xm, malware_rows);
  ASSERT_EQ(targets.size(), malware_rows.size());
  const Matrix qb = ensemble_predict(b, xm);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    EXPECT_GE(targets[i].c_star, 1);
    EXPECT_LE(targets[i].c_star, 5);
    EXPECT_EQ(targets[i].sample_id, malware_rows[i]);
    EXPECT_DOUBLE_EQ(targets[i].confidence, qb.row(static_cast<Eigen::Index>(i)).maxCoeff());
  }
  EXPECT_THROW(build_ensemble(train, val, {3}, small_config(), 1), ConfigError);
}

}  // namespace
}  // namespace impinj
