#pragma once

#include <span>
#include <string>
#include <vector>

#include "impinj/cvae.h"
#include "impinj/ensemble.h"
#include "impinj/metrics.h"

namespace impinj {

enum class AttackMethod { kCvae, kMostPopular, kRandom };

std::string method_name(AttackMethod m);
AttackMethod parse_method(const std::string& name);

struct AdversarialSample {
  int sample_id = 0;
  AttackMethod method = AttackMethod::kCvae;
  int k = 0;
  ClassId target = 0;
  // Distinct indices of originally absent features, in selection order.
  std::vector<int> added;
  ClassId before_label = 0;
  ClassId after_label = 0;
  std::vector<double> before_probs;
  std::vector<double> after_probs;
};

// The k absent positions (x == 0) with the highest score, ties to the lowest
// index. Throws DataError when k exceeds the number of absent features.
std::vector<int> top_k_absent(std::span<const double> scores, std::span<const double> x, int k);

// k absent positions drawn uniformly without replacement.
std::vector<int> random_absent(std::span<const double> x, int k, std::uint64_t seed);

AdversarialSample attack_cvae(CvaeModel& model, std::span<const double> x, ClassId target, int k);
AdversarialSample attack_most_popular(std::span<const long> class_frequency, std::span<const double> x,
                                      ClassId target, int k);
AdversarialSample attack_random(std::span<const double> x, ClassId target, int k, std::uint64_t seed);

// Copy of `x` with bit j of row i set for every j in samples[i].added.
Matrix apply_additions(const Matrix& x, std::span<const AdversarialSample> samples);

struct AttackInputs {
  const Matrix* malware = nullptr;
  std::span<const int> sample_ids;
  std::span<const ClassId> targets;
  // CVAE scores per malware row (z = mu), computed once for all k.
  const Matrix* cvae_scores = nullptr;
  // Training-set feature frequencies indexed by class id (entry 0 unused).
  const std::vector<std::vector<long>>* class_frequencies = nullptr;
  std::uint64_t random_seed = 0;
};

// Generates one sample per malware row; labels are left unset.
std::vector<AdversarialSample> generate_attacks(AttackMethod method, int k, const AttackInputs& inputs);

// Fills before/after labels and probabilities from ensemble A. `before` holds
// the ensemble distributions of the unmodified rows.
void label_attacks(EnsembleModel& ensemble_a, const Matrix& before, const Matrix& original,
                   std::vector<AdversarialSample>& samples);

EvasionCounts evasion_counts(std::span<const AdversarialSample> samples);

std::string attacks_to_jsonl(std::span<const AdversarialSample> samples);
std::vector<AdversarialSample> attacks_from_jsonl(const std::string& text);

struct ObjectiveWeights {
  double tsr = 0.5;
  double uer = 0.3;
  double cts = 0.2;
};

// Mean over ks of tsr*TSR + uer*UER + cts*CTS (undefined CTS counts as 0) for
// CVAE injection against ensemble A.
ObjectiveReport evasion_objective(EnsembleModel& ensemble_a, CvaeModel& model, const Matrix& malware,
                                  std::span<const ClassId> targets, std::span<const int> ks,
                                  const ObjectiveWeights& weights = {});

}  // namespace impinj
