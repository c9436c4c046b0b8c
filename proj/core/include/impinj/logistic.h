#pragma once

#include <filesystem>

#include "impinj/common.h"

namespace impinj {

struct LogisticConfig {
  // Penalty 0.5 * l2 * ||W||^2 (bias unpenalized).
  double l2 = 1e-4;
  double lr = 0.05;
  int max_iters = 2000;
  double tol = 1e-7;
};

// Multinomial softmax regression.
struct LinearModel {
  Matrix weight;  // class_count x d_in
  Matrix bias;    // 1 x class_count
  double l2 = 0.0;
  int iterations = 0;
  double final_loss = 0.0;

  Eigen::Index class_count() const { return weight.rows(); }
  Eigen::Index feature_count() const { return weight.cols(); }
};

// Full-batch Adam on cross-entropy + L2; stops when the loss changes by less
// than `tol` or after `max_iters`. Labels are 0-based.
LinearModel train_logistic(const Matrix& x, std::span<const int> y, int class_count, const LogisticConfig& cfg);

Matrix predict_logits(const LinearModel& model, const Matrix& x);
Matrix predict_proba(const LinearModel& model, const Matrix& x);

// Mean cross-entropy + penalty of `model` on (x, y).
double logistic_objective(const LinearModel& model, const Matrix& x, std::span<const int> y);

void save_linear(const std::filesystem::path& path, const LinearModel& model);
LinearModel load_linear(const std::filesystem::path& path);

}  // namespace impinj
