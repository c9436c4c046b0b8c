#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "impinj/layers.h"

namespace impinj {

struct EncoderConfig {
  int hidden1 = 1024;
  int hidden2 = 512;
  int embedding_dim = 128;
  double dropout = 0.3;
  double arc_scale = 30.0;
  double arc_margin = 0.30;
  double temperature = 0.1;
  double supcon_weight = 0.1;
  int epochs = 200;
  int batch_size = 128;
  double lr = 1e-3;
  int patience = 20;
  std::uint64_t seed = 0;
};

// FC(h1)+BN+ReLU+Drop -> FC(h2)+BN+ReLU+Drop -> residual block
// [FC(h2)+BN+ReLU+Drop -> FC(h2)+BN, add input, ReLU] -> FC(embedding) -> L2.
struct EncoderModel {
  nn::Linear fc1;
  nn::BatchNorm1d bn1;
  nn::Linear fc2;
  nn::BatchNorm1d bn2;
  nn::Linear res1;
  nn::BatchNorm1d res_bn1;
  nn::Linear res2;
  nn::BatchNorm1d res_bn2;
  nn::Linear out;
  double dropout = 0.3;

  EncoderModel() = default;
  EncoderModel(Eigen::Index input_dim, const EncoderConfig& cfg, Rng& rng);

  Eigen::Index input_dim() const { return fc1.in_features(); }
  Eigen::Index embedding_dim() const { return out.out_features(); }

  nn::Var forward(nn::Tape& tape, nn::Var x, nn::Mode mode, Rng* rng);
  nn::Var forward(nn::Tape& tape, const SparseMatrix& x, nn::Mode mode, Rng* rng);

  std::vector<nn::Parameter*> parameters();
  std::vector<nn::TensorRef> tensors();

 private:
  nn::Var trunk(nn::Tape& tape, nn::Var first, nn::Mode mode, Rng* rng);
};

// Class centres; rows are kept unit-norm.
struct ArcFaceHead {
  nn::Parameter weight;  // C x embedding_dim
  double scale = 30.0;
  double margin = 0.30;

  ArcFaceHead() = default;
  ArcFaceHead(int class_count, Eigen::Index embedding_dim, double s, double m, Rng& rng);

  void renormalize();
};

// s * cos(theta + m * [c == y]) with cos(theta) = h . W_c. Without labels
// the margin is omitted. cos(theta) is clamped to +-(1 - 1e-7).
nn::Var arcface_logits(nn::Var h, nn::Var centres, std::optional<std::span<const int>> labels, double s, double m);
nn::Var arcface_logits(nn::Tape& tape, nn::Var h, ArcFaceHead& head, std::optional<std::span<const int>> labels);

// Supervised contrastive loss over rows of unit-norm h at temperature tau,
// averaged over all anchors; anchors without a positive contribute 0.
nn::Var supcon_loss(nn::Var h, std::span<const int> labels, double tau);

// CE(arcface) + supcon_weight * SupCon on one batch.
nn::Var encoder_loss(nn::Tape& tape, EncoderModel& enc, ArcFaceHead& head, nn::Var x, std::span<const int> labels,
                     const EncoderConfig& cfg, nn::Mode mode, Rng* rng);

struct EncoderTrainResult {
  EncoderModel model;
  int best_epoch = 0;
  int epochs_run = 0;
  double best_val_f1 = 0.0;
  std::vector<double> epoch_loss;
};

// Labels are 0-based. Early-stops on the validation macro-F1 of a
// nearest-centroid probe over training embeddings and returns the best
// encoder; the head is discarded.
EncoderTrainResult train_encoder(const Matrix& x_train, std::span<const int> y_train, const Matrix& x_val,
                                 std::span<const int> y_val, int class_count, const EncoderConfig& cfg);

// Evaluation-mode embeddings, one unit-norm row per input row.
Matrix embed(EncoderModel& model, const Matrix& x);

// Euclidean nearest-centroid classifier; ties go to the lowest class.
std::vector<int> nearest_centroid_predict(const Matrix& train, std::span<const int> train_labels, int class_count,
                                          const Matrix& query);

void save_encoder(const std::filesystem::path& path, EncoderModel& model);
EncoderModel load_encoder(const std::filesystem::path& path);

// Rows: sample_id, 128 coordinates, label.
std::string embeddings_to_csv(const Matrix& embeddings, std::span<const int> sample_ids, std::span<const int> labels);

}  // namespace impinj
