#include "impinj/attack.h"

#include <algorithm>
#include <numeric>

#include "json.hpp"

namespace impinj {

std::string method_name(AttackMethod m) {
  switch (m) {
    case AttackMethod::kCvae:
      return "cvae";
    case AttackMethod::kMostPopular:
      return "most_popular";
    case AttackMethod::kRandom:
      return "random";
  }
  return "unknown";
}

AttackMethod parse_method(const std::string& name) {
  if (name == "cvae") return AttackMethod::kCvae;
  if (name == "most_popular" || name == "mostpopular") return AttackMethod::kMostPopular;
  if (name == "random") return AttackMethod::kRandom;
  throw ConfigError("unknown attack method '" + name + "'");
}

namespace {

std::vector<int> absent_indices(std::span<const double> x, int k) {
  std::vector<int> absent;
  for (std::size_t j = 0; j < x.size(); ++j) {
    if (x[j] == 0.0) absent.push_back(static_cast<int>(j));
  }
  if (k < 0 || static_cast<std::size_t>(k) > absent.size()) {
    throw DataError("k = " + std::to_string(k) + " exceeds the " + std::to_string(absent.size()) + " absent features");
  }
  return absent;
}

AdversarialSample make_sample(AttackMethod method, ClassId target, int k, std::vector<int> added) {
  AdversarialSample s;
  s.method = method;
  s.target = target;
  s.k = k;
  s.added = std::move(added);
  return s;
}

std::span<const double> row_span(const Matrix& m, Eigen::Index r) {
  return {m.data() + r * m.cols(), static_cast<std::size_t>(m.cols())};
}

std::vector<double> row_vec(const Matrix& m, Eigen::Index r) {
  auto s = row_span(m, r);
  return {s.begin(), s.end()};
}

}  // namespace

std::vector<int> top_k_absent(std::span<const double> scores, std::span<const double> x, int k) {
  if (scores.size() != x.size()) throw ShapeError("top_k_absent: score width mismatch");
  std::vector<int> absent = absent_indices(x, k);
  auto better = [&scores](int a, int b) {
    const double sa = scores[static_cast<std::size_t>(a)];
    const double sb = scores[static_cast<std::size_t>(b)];
    return sa > sb || (sa == sb && a < b);
  };
  std::partial_sort(absent.begin(), absent.begin() + k, absent.end(), better);
  absent.resize(static_cast<std::size_t>(k));
  return absent;
}

std::vector<int> random_absent(std::span<const double> x, int k, std::uint64_t seed) {
  std::vector<int> absent = absent_indices(x, k);
  Rng rng(seed);
  for (int i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(i), absent.size() - 1);
    std::swap(absent[static_cast<std::size_t>(i)], absent[pick(rng)]);
  }
  absent.resize(static_cast<std::size_t>(k));
  return absent;
}

AdversarialSample attack_cvae(CvaeModel& model, std::span<const double> x, ClassId target, int k) {
  Matrix row(1, static_cast<Eigen::Index>(x.size()));
  std::copy(x.begin(), x.end(), row.data());
  const ClassId t[1] = {target};
  const Matrix s = cvae_scores(model, row, t);
  return make_sample(AttackMethod::kCvae, target, k, top_k_absent(row_span(s, 0), x, k));
}

AdversarialSample attack_most_popular(std::span<const long> class_frequency, std::span<const double> x,
                                      ClassId target, int k) {
  if (class_frequency.size() != x.size()) throw ShapeError("attack_most_popular: frequency width mismatch");
  std::vector<double> scores(class_frequency.begin(), class_frequency.end());
  return make_sample(AttackMethod::kMostPopular, target, k, top_k_absent(scores, x, k));
}

AdversarialSample attack_random(std::span<const double> x, ClassId target, int k, std::uint64_t seed) {
  return make_sample(AttackMethod::kRandom, target, k, random_absent(x, k, seed));
}

Matrix apply_additions(const Matrix& x, std::span<const AdversarialSample> samples) {
  if (static_cast<std::size_t>(x.rows()) != samples.size()) throw ShapeError("apply_additions: row count mismatch");
  Matrix out = x;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    for (int j : samples[i].added) out(static_cast<Eigen::Index>(i), j) = 1.0;
  }
  return out;
}

std::vector<AdversarialSample> generate_attacks(AttackMethod method, int k, const AttackInputs& in) {
  if (in.malware == nullptr) throw ConfigError("generate_attacks: no malware rows");
  const Matrix& x = *in.malware;
  if (in.targets.size() != static_cast<std::size_t>(x.rows()) || in.sample_ids.size() != in.targets.size()) {
    throw ShapeError("generate_attacks: ids/targets do not match malware rows");
  }
  std::vector<AdversarialSample> out;
  out.reserve(in.targets.size());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const auto row = row_span(x, i);
    const ClassId target = in.targets[static_cast<std::size_t>(i)];
    const int id = in.sample_ids[static_cast<std::size_t>(i)];
    AdversarialSample s;
    switch (method) {
      case AttackMethod::kCvae:
        if (in.cvae_scores == nullptr) throw ConfigError("generate_attacks: CVAE scores missing");
        s = make_sample(method, target, k, top_k_absent(row_span(*in.cvae_scores, i), row, k));
        break;
      case AttackMethod::kMostPopular: {
        if (in.class_frequencies == nullptr) throw ConfigError("generate_attacks: class frequencies missing");
        const auto& freq = in.class_frequencies->at(static_cast<std::size_t>(target));
        if (freq.empty()) throw DataError("no training frequencies for class " + std::to_string(target));
        s = attack_most_popular(freq, row, target, k);
        break;
      }
      case AttackMethod::kRandom:
        s = attack_random(row, target, k,
                          derive_seed(in.random_seed, "sample" + std::to_string(id) + "/k" + std::to_string(k)));
        break;
    }
    s.sample_id = id;
    out.push_back(std::move(s));
  }
  return out;
}

void label_attacks(EnsembleModel& ensemble_a, const Matrix& before, const Matrix& original,
                   std::vector<AdversarialSample>& samples) {
  if (before.rows() != original.rows()) throw ShapeError("label_attacks: row count mismatch");
  const Matrix perturbed = apply_additions(original, samples);
  const Matrix after = ensemble_predict(ensemble_a, perturbed);
  const auto before_labels = predict_labels(ensemble_a, before);
  const auto after_labels = predict_labels(ensemble_a, after);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    samples[i].before_label = before_labels[i];
    samples[i].after_label = after_labels[i];
    samples[i].before_probs = row_vec(before, r);
    samples[i].after_probs = row_vec(after, r);
  }
}

EvasionCounts evasion_counts(std::span<const AdversarialSample> samples) {
  EvasionCounts c;
  c.m_malware = static_cast<long>(samples.size());
  for (const AdversarialSample& s : samples) {
    if (s.after_label != kMalwareClass) {
      ++c.m_evaded;
      if (s.after_label == s.target) ++c.m_target;
    }
  }
  return c;
}

std::string attacks_to_jsonl(std::span<const AdversarialSample> samples) {
  std::string out;
  for (const AdversarialSample& s : samples) {
    nlohmann::json j{{"sample_id", s.sample_id},       {"method", method_name(s.method)},
                     {"k", s.k},                       {"target", s.target},
                     {"added_indices", s.added},       {"before_label", s.before_label},
                     {"after_label", s.after_label},   {"before_probs", s.before_probs},
                     {"after_probs", s.after_probs}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::vector<AdversarialSample> attacks_from_jsonl(const std::string& text) {
  std::vector<AdversarialSample> out;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(start, end - start);
    start = end + 1;
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    AdversarialSample s;
    s.sample_id = j.at("sample_id").get<int>();
    s.method = parse_method(j.at("method").get<std::string>());
    s.k = j.at("k").get<int>();
    s.target = j.at("target").get<ClassId>();
    s.added = j.at("added_indices").get<std::vector<int>>();
    s.before_label = j.at("before_label").get<ClassId>();
    s.after_label = j.at("after_label").get<ClassId>();
    s.before_probs = j.at("before_probs").get<std::vector<double>>();
    s.after_probs = j.at("after_probs").get<std::vector<double>>();
    out.push_back(std::move(s));
  }
  return out;
}

ObjectiveReport evasion_objective(EnsembleModel& ensemble_a, CvaeModel& model, const Matrix& malware,
                                  std::span<const ClassId> targets, std::span<const int> ks,
                                  const ObjectiveWeights& weights) {
  ObjectiveReport rep;
  if (malware.rows() == 0 || ks.empty()) return rep;
  const Matrix scores = cvae_scores(model, malware, targets);
  const Matrix before = ensemble_predict(ensemble_a, malware);
  std::vector<int> ids(static_cast<std::size_t>(malware.rows()));
  std::iota(ids.begin(), ids.end(), 0);
  AttackInputs in;
  in.malware = &malware;
  in.sample_ids = ids;
  in.targets = targets;
  in.cvae_scores = &scores;
  double total = 0.0;
  for (int k : ks) {
    auto samples = generate_attacks(AttackMethod::kCvae, k, in);
    label_attacks(ensemble_a, before, malware, samples);
    const EvasionRates r = evasion_metrics(evasion_counts(samples));
    total += weights.tsr * r.tsr + weights.uer * r.uer + weights.cts * r.cts.value_or(0.0);
    const std::string suffix = "_k" + std::to_string(k);
    rep.details.emplace_back("uer" + suffix, r.uer);
    rep.details.emplace_back("tsr" + suffix, r.tsr);
    rep.details.emplace_back("cts" + suffix, r.cts.value_or(0.0));
  }
  rep.value = total / static_cast<double>(ks.size());
  return rep;
}

}  // namespace impinj
