#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "impinj/distill.h"
#include "impinj/layers.h"

namespace impinj {

struct CvaeConfig {
  double lambda_r = 1.0;
  double beta = 1e-2;
  double lambda_s = 1e-2;
  double lambda_c = 1.0;
  int latent_dim = 32;
  int class_embed_dim = 16;
  double lr = 1e-3;
  int epochs = 300;
  int patience = 15;
  int batch_size = 32;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double clip_norm = 5.0;
  double leaky_slope = 0.2;
  int enc_hidden1 = 1024;
  int enc_hidden2 = 512;
  int dec_hidden1 = 1024;
  int dec_hidden2 = 1024;
  int dec_hidden3 = 2048;
  std::uint64_t seed = 0;
};

std::string cvae_config_to_json(const CvaeConfig& cfg);
CvaeConfig cvae_config_from_json(const std::string& text);

struct CvaeModel {
  // Row c - 1 embeds target class c.
  nn::Parameter class_embed;
  nn::Linear enc1;
  nn::Linear enc2;
  nn::Linear enc3;
  nn::Linear dec1;
  nn::Linear dec2;
  nn::Linear dec3;
  nn::Linear dec4;
  double leaky_slope = 0.2;

  CvaeModel() = default;
  CvaeModel(Eigen::Index feature_count, int target_classes, const CvaeConfig& cfg, Rng& rng);

  Eigen::Index feature_count() const { return dec4.out_features(); }
  Eigen::Index latent_dim() const { return enc3.out_features() / 2; }
  int target_classes() const { return static_cast<int>(class_embed.value.rows()); }

  std::vector<nn::Parameter*> parameters();
  std::vector<nn::TensorRef> tensors();
};

struct Encoded {
  nn::Var mu;
  nn::Var logvar;
};

struct Decoded {
  nn::Var scores;   // s in [0, 1]
  nn::Var relaxed;  // x + (1 - x) * s
};

// Targets are dataset class ids 1..target_classes.
Encoded encode(nn::Tape& tape, CvaeModel& model, nn::Var x, std::span<const ClassId> targets);

// mu + exp(logvar / 2) * eps; with eps == nullptr returns mu itself.
nn::Var reparameterize(nn::Var mu, nn::Var logvar, const Matrix* eps);

Decoded decode_additive(nn::Tape& tape, CvaeModel& model, nn::Var x, nn::Var z, std::span<const ClassId> targets);

// Batch mean of the per-row BCE(x_tilde, x_ref) over positions where x == 0.
// `all_present` is set when some row has no absent position (it adds 0).
nn::Var loss_reconstruction(nn::Var x_tilde, const Matrix& x, const Matrix& x_ref, bool* all_present = nullptr);

// Batch mean of -1/2 * sum(1 + logvar - mu^2 - exp(logvar)).
nn::Var loss_kl(nn::Var mu, nn::Var logvar);

// Batch mean of sum(x_tilde - x).
nn::Var loss_sparsity(nn::Var x_tilde, const Matrix& x);

// CE of the frozen proxy on the binarized x_tilde against proxy columns.
nn::Var loss_classification(nn::Var x_tilde, std::span<const int> proxy_labels, ProxyModel& proxy);

struct CvaeLosses {
  nn::Var reconstruction;
  nn::Var kl;
  nn::Var sparsity;
  nn::Var classification;
  nn::Var total;
};

// Runs one training-mode pass. `eps` may be null (z = mu).
CvaeLosses cvae_losses(nn::Tape& tape, CvaeModel& model, ProxyModel& proxy, const Matrix& x, const Matrix& x_ref,
                       std::span<const ClassId> targets, std::span<const int> proxy_labels, const Matrix* eps,
                       const CvaeConfig& cfg);

// Inference scores s with z = mu.
Matrix cvae_scores(CvaeModel& model, const Matrix& x, std::span<const ClassId> targets);

struct ObjectiveReport {
  // Higher is better.
  double value = 0.0;
  // Named components (e.g. per-k rates) kept for the trial log.
  std::vector<std::pair<std::string, double>> details;
};

// Evaluated on held-out malware during training and tuning.
using CvaeObjective = std::function<ObjectiveReport(CvaeModel&)>;

struct CvaeTrainingSet {
  const Matrix* malware = nullptr;           // rows to perturb
  std::span<const ClassId> targets;          // c* per malware row
  const Matrix* references = nullptr;        // candidate x_ref rows
  std::span<const ClassId> reference_labels; // dataset class of each reference row
  // Maps a dataset class id to the proxy output column.
  std::function<int(ClassId)> proxy_column;
};

struct CvaeTrainResult {
  CvaeModel model;
  int best_epoch = 0;
  int epochs_run = 0;
  double best_objective = 0.0;
  std::vector<std::pair<std::string, double>> best_details;
  std::vector<double> epoch_loss;
  std::vector<double> epoch_objective;
};

// Mini-batch Adam over the CVAE parameters with the proxy frozen; early-stops
// on `early_stop` (patience cfg.patience) and returns the best model. Without
// an objective every epoch runs and the last model is returned.
CvaeTrainResult train_cvae(const CvaeTrainingSet& data, ProxyModel& proxy, const CvaeConfig& cfg,
                           const CvaeObjective& early_stop);

struct SearchSpace {
  double lambda_r_min = 0.1, lambda_r_max = 10.0;
  double beta_min = 1e-4, beta_max = 1.0;
  double lambda_s_min = 1e-4, lambda_s_max = 0.1;
  double lambda_c_min = 0.1, lambda_c_max = 10.0;
  std::vector<int> latent_dims{16, 32, 64};
  std::vector<int> class_embed_dims{8, 16, 32};
  double lr_min = 1e-4, lr_max = 3e-3;
};

struct TuneConfig {
  int trials = 30;
  std::uint64_t seed = 0;
  // Epoch cap per trial; early stopping on the tuning objective still applies.
  int trial_epochs = 300;
  SearchSpace space;
  CvaeConfig base;
};

// Trial i draws from its own stream, so a longer search extends a shorter one.
CvaeConfig sample_trial_config(const TuneConfig& cfg, int trial);

struct TrialRecord {
  int trial = 0;
  CvaeConfig config;
  double objective = 0.0;
  std::vector<std::pair<std::string, double>> details;
  int epochs_run = 0;
};

struct TuneResult {
  CvaeConfig best;
  int best_trial = 0;
  double best_objective = 0.0;
  std::vector<TrialRecord> trials;
};

// Random search: each trial trains with early stopping on `early_stop` and
// its returned model is scored by `score`.
TuneResult tune_hyperparameters(const CvaeTrainingSet& data, ProxyModel& proxy, const TuneConfig& cfg,
                                const CvaeObjective& early_stop, const CvaeObjective& score);

std::string trial_to_json_line(const TrialRecord& rec);

void save_cvae(const std::filesystem::path& path, CvaeModel& model);
CvaeModel load_cvae(const std::filesystem::path& path);

}  // namespace impinj
