#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "impinj/data.h"
#include "impinj/encoder.h"
#include "impinj/forest.h"
#include "impinj/logistic.h"

namespace impinj {

inline constexpr int kMemberCount = 4;
inline constexpr std::array<const char*, kMemberCount> kMemberNames{"rf_raw", "lr_raw", "rf_emb", "lr_emb"};

struct EnsembleConfig {
  ForestConfig forest;
  LogisticConfig logistic;
  EncoderConfig encoder;
  double grid_step = 0.05;
};

struct EnsembleModel {
  // Ascending dataset class ids; column c of every distribution is class_set[c].
  std::vector<ClassId> class_set;
  ForestModel rf_raw;
  LinearModel lr_raw;
  EncoderModel encoder;
  ForestModel rf_emb;
  LinearModel lr_emb;
  std::array<double, kMemberCount> weights{1.0, 0.0, 0.0, 0.0};
  std::uint64_t seed = 0;

  int class_count() const { return static_cast<int>(class_set.size()); }
  int local_index(ClassId c) const;
};

using MemberProbs = std::array<Matrix, kMemberCount>;

MemberProbs member_predictions(EnsembleModel& model, const Matrix& x);

// sum_i w_i * probs_i.
Matrix combine_members(std::span<const Matrix> probs, std::span<const double> weights);

Matrix ensemble_predict(EnsembleModel& model, const Matrix& x);

// Argmax of each row mapped back to dataset class ids.
std::vector<ClassId> predict_labels(const EnsembleModel& model, const Matrix& probs);

// Every point of the simplex {w : w_i = n_i * step, sum n_i = 1/step},
// in lexicographically ascending order.
std::vector<std::vector<double>> simplex_grid(int members, double step);

struct WeightSearchResult {
  std::vector<double> weights;
  double macro_f1 = 0.0;
  std::size_t evaluated = 0;
};

// Exhaustive grid search for the validation macro-F1 maximizer; only a strict
// improvement replaces the incumbent, so ties keep the lexicographically
// smallest point. Labels are 0-based.
WeightSearchResult optimize_weights(std::span<const Matrix> member_probs, std::span<const int> labels, int class_count,
                                    double step = 0.05);

struct EnsembleBuildReport {
  std::array<double, kMemberCount> val_accuracy{};
  double val_macro_f1 = 0.0;
  int encoder_epochs = 0;
  double encoder_val_f1 = 0.0;
};

// Trains the four members on the class_set samples of `train`, then fits the
// soft-vote weights on those of `val`.
EnsembleModel build_ensemble(const LabeledDataset& train, const LabeledDataset& val, std::vector<ClassId> class_set,
                             const EnsembleConfig& cfg, std::uint64_t seed, EnsembleBuildReport* report = nullptr);

struct TargetEntry {
  int sample_id = 0;
  ClassId c_star = 0;
  double confidence = 0.0;
};

std::vector<TargetEntry> assign_targets(EnsembleModel& ensemble_b, const Matrix& x, std::span<const int> sample_ids);

std::string targets_to_csv(std::span<const TargetEntry> targets);
std::vector<TargetEntry> targets_from_csv(const std::string& text);

// Writes member artifacts plus manifest.json into `dir`.
void save_ensemble(const std::filesystem::path& dir, EnsembleModel& model);
EnsembleModel load_ensemble(const std::filesystem::path& dir);

}  // namespace impinj
