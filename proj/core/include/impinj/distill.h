#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "impinj/layers.h"

namespace impinj {

inline constexpr double kProbabilityFloor = 1e-12;

struct DistillConfig {
  double temperature = 5.0;
  double alpha = 0.9;
  int epochs = 700;
  int batch_size = 128;
  double lr = 1e-3;
  double dropout = 0.1;
  int hidden1 = 2048;
  int hidden2 = 1024;
  int hidden3 = 512;
  std::uint64_t seed = 0;
};

// q^(1/T) renormalized per row, after flooring entries at kProbabilityFloor.
// `floored` receives the number of entries raised to the floor.
Matrix soften_teacher(const Matrix& q, double temperature, long* floored = nullptr);

// softmax(logits / T) per row.
Matrix soften_student(const Matrix& logits, double temperature);

// alpha * T^2 * KL(q_soft || p_soft) + (1 - alpha) * CE(logits, y), each
// term averaged over rows. `teacher_q` is the unsoftened teacher output.
nn::Var distill_loss(nn::Var logits, const Matrix& teacher_q, std::span<const int> labels, const DistillConfig& cfg);

// FC(h1)+BN+ReLU+Drop -> FC(h2)+BN+ReLU+Drop -> FC(h3)+BN+ReLU+Drop -> FC(C).
// Outputs raw logits.
struct ProxyModel {
  nn::Linear fc1;
  nn::BatchNorm1d bn1;
  nn::Linear fc2;
  nn::BatchNorm1d bn2;
  nn::Linear fc3;
  nn::BatchNorm1d bn3;
  nn::Linear head;
  double dropout = 0.1;

  ProxyModel() = default;
  ProxyModel(Eigen::Index input_dim, int class_count, const DistillConfig& cfg, Rng& rng);

  Eigen::Index input_dim() const { return fc1.in_features(); }
  int class_count() const { return static_cast<int>(head.out_features()); }

  nn::Var forward(nn::Tape& tape, nn::Var x, nn::Mode mode, Rng* rng);
  nn::Var forward(nn::Tape& tape, const SparseMatrix& x, nn::Mode mode, Rng* rng);

  // Evaluation-mode logits.
  Matrix logits(const Matrix& x);

  // Marks every parameter non-trainable.
  void freeze();
  bool frozen() const { return !fc1.weight.trainable; }

  std::vector<nn::Parameter*> parameters();
  std::vector<nn::TensorRef> tensors();

 private:
  nn::Var body(nn::Tape& tape, nn::Var first, nn::Mode mode, Rng* rng);
};

struct ProxyTrainResult {
  ProxyModel model;
  std::vector<double> epoch_loss;
  long floored = 0;
};

// Trains on (x, teacher_q, y) with mini-batches and returns the frozen proxy.
// Labels are 0-based columns of teacher_q.
ProxyTrainResult train_proxy(const Matrix& x, const Matrix& teacher_q, std::span<const int> labels,
                             const DistillConfig& cfg);

void save_proxy(const std::filesystem::path& path, ProxyModel& model);
// Loaded proxies come back frozen.
ProxyModel load_proxy(const std::filesystem::path& path);

}  // namespace impinj
