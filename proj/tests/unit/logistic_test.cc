#include <gtest/gtest.h>

#include <cmath>

#include "fixtures.h"
#include "impinj/logistic.h"
#include "impinj/synthetic.h"

namespace impinj {
namespace {

TEST(Logistic, ObjectiveMatchesScalarOracle) {
  Rng rng(2);
  LinearModel m;
  m.weight = testing::random_matrix(3, 4, rng);
  m.bias = testing::random_matrix(1, 3, rng);
  m.l2 = 0.1;
  const Matrix x = testing::random_matrix(5, 4, rng);
  const std::vector<int> y{0, 1, 2, 1, 0};
  oracle::Rows logits;
  for (Eigen::Index i = 0; i < 5; ++i) {
    oracle::Vec row;
    for (Eigen::Index c = 0; c < 3; ++c) {
      double z = m.bias(0, c);
      for (Eigen::Index j = 0; j < 4; ++j) z += x(i, j) * m.weight(c, j);
      row.push_back(z);
    }
    logits.push_back(row);
  }
  const double expect = oracle::cross_entropy(logits, y) + 0.5 * 0.1 * m.weight.squaredNorm();
  EXPECT_NEAR(logistic_objective(m, x, y), expect, 1e-12);
  const Matrix p = predict_proba(m, x);
  for (Eigen::Index i = 0; i < 5; ++i) {
    const auto ref = oracle::softmax(logits[static_cast<std::size_t>(i)]);
    for (Eigen::Index c = 0; c < 3; ++c) EXPECT_NEAR(p(i, c), ref[static_cast<std::size_t>(c)], 1e-12);
  }
}

TEST(Logistic, TrainingLowersObjectiveAndFits) {
  SyntheticSpec spec;
  spec.seed = 12;
  const LabeledDataset ds = make_synthetic_dataset(spec);
  std::vector<int> y;
  for (ClassId c : ds.labels) y.push_back(c - 1);
  LogisticConfig cfg;
  cfg.max_iters = 300;
  const LinearModel m = train_logistic(ds.features, y, 6, cfg);
  EXPECT_LT(m.final_loss, std::log(6.0));
  EXPECT_NEAR(m.final_loss, logistic_objective(m, ds.features, y), 1e-12);
  const Matrix p = predict_proba(m, ds.features);
  int correct = 0;
  for (Eigen::Index i = 0; i < p.rows(); ++i) correct += argmax_row(p, i) == y[static_cast<std::size_t>(i)];
  EXPECT_GE(correct, 57);
}

TEST(Logistic, DeterministicRoundTripAndErrors) {
  testing::TempDir dir("logistic");
  Rng rng(3);
  const Matrix x = testing::random_binary(30, 10, 0.4, rng);
  std::vector<int> y(30);
  for (int i = 0; i < 30; ++i) y[static_cast<std::size_t>(i)] = x(i, 0) > 0.5 ? 1 : 0;
  LogisticConfig cfg;
  cfg.max_iters = 50;
  const LinearModel a = train_logistic(x, y, 2, cfg);
  const LinearModel b = train_logistic(x, y, 2, cfg);
  EXPECT_EQ(a.weight, b.weight);
  save_linear(dir.path() / "lr.bin", a);
  const LinearModel c = load_linear(dir.path() / "lr.bin");
  EXPECT_EQ(c.weight, a.weight);
  EXPECT_EQ(c.bias, a.bias);
  EXPECT_DOUBLE_EQ(c.l2, a.l2);
  y[0] = 5;
  EXPECT_THROW(train_logistic(x, y, 2, cfg), DataError);
}

}  // namespace
}  // namespace impinj
