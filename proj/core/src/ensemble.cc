#include "impinj/ensemble.h"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "impinj/metrics.h"
#include "json.hpp"

namespace impinj {

int EnsembleModel::local_index(ClassId c) const {
  auto it = std::find(class_set.begin(), class_set.end(), c);
  if (it == class_set.end()) throw DataError("class " + std::to_string(c) + " is not in the ensemble class set");
  return static_cast<int>(it - class_set.begin());
}

MemberProbs member_predictions(EnsembleModel& model, const Matrix& x) {
  MemberProbs out;
  out[0] = predict_proba(model.rf_raw, x);
  out[1] = predict_proba(model.lr_raw, x);
  const Matrix emb = embed(model.encoder, x);
  out[2] = predict_proba(model.rf_emb, emb);
  out[3] = predict_proba(model.lr_emb, emb);
  return out;
}

Matrix combine_members(std::span<const Matrix> probs, std::span<const double> weights) {
  if (probs.empty() || probs.size() != weights.size()) throw ShapeError("combine_members: member/weight count mismatch");
  Matrix q = Matrix::Zero(probs[0].rows(), probs[0].cols());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i].rows() != q.rows() || probs[i].cols() != q.cols()) throw ShapeError("combine_members: shape mismatch");
    if (weights[i] != 0.0) q += weights[i] * probs[i];
  }
  return q;
}

Matrix ensemble_predict(EnsembleModel& model, const Matrix& x) {
  const MemberProbs probs = member_predictions(model, x);
  return combine_members(probs, model.weights);
}

std::vector<ClassId> predict_labels(const EnsembleModel& model, const Matrix& probs) {
  std::vector<ClassId> out(static_cast<std::size_t>(probs.rows()));
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    out[static_cast<std::size_t>(i)] = model.class_set.at(static_cast<std::size_t>(argmax_row(probs, i)));
  }
  return out;
}

namespace {

void grid_rec(int member, int remaining, int members, int total, std::vector<int>& cur,
              std::vector<std::vector<double>>& out) {
  if (member == members - 1) {
    cur[static_cast<std::size_t>(member)] = remaining;
    std::vector<double> w(static_cast<std::size_t>(members));
    for (int i = 0; i < members; ++i) w[static_cast<std::size_t>(i)] = static_cast<double>(cur[static_cast<std::size_t>(i)]) / total;
    out.push_back(std::move(w));
    return;
  }
  for (int n = 0; n <= remaining; ++n) {
    cur[static_cast<std::size_t>(member)] = n;
    grid_rec(member + 1, remaining - n, members, total, cur, out);
  }
}

std::vector<int> local_labels(const EnsembleModel& model, std::span<const ClassId> labels) {
  std::vector<int> out;
  out.reserve(labels.size());
  for (ClassId c : labels) out.push_back(model.local_index(c));
  return out;
}

LabeledDataset restrict_classes(const LabeledDataset& ds, const std::vector<ClassId>& class_set) {
  std::vector<int> rows;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (std::find(class_set.begin(), class_set.end(), ds.labels[i]) != class_set.end()) rows.push_back(static_cast<int>(i));
  }
  return subset(ds, rows);
}

double accuracy_of(const Matrix& probs, std::span<const int> labels) {
  long ok = 0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) ok += argmax_row(probs, i) == labels[static_cast<std::size_t>(i)];
  return probs.rows() > 0 ? static_cast<double>(ok) / static_cast<double>(probs.rows()) : 0.0;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw Error("cannot read " + p.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw Error("cannot write " + p.string());
  os << text;
}

}  // namespace

std::vector<std::vector<double>> simplex_grid(int members, double step) {
  if (members < 1 || step <= 0.0 || step > 1.0) throw ConfigError("simplex_grid: invalid members or step");
  const int total = static_cast<int>(std::lround(1.0 / step));
  if (std::abs(total * step - 1.0) > 1e-9) throw ConfigError("simplex_grid: 1/step must be an integer");
  std::vector<std::vector<double>> out;
  std::vector<int> cur(static_cast<std::size_t>(members), 0);
  grid_rec(0, total, members, total, cur, out);
  return out;
}

WeightSearchResult optimize_weights(std::span<const Matrix> member_probs, std::span<const int> labels, int class_count,
                                    double step) {
  if (member_probs.empty()) throw ShapeError("optimize_weights: no members");
  WeightSearchResult best;
  best.macro_f1 = -1.0;
  std::vector<int> pred(labels.size());
  for (const auto& w : simplex_grid(static_cast<int>(member_probs.size()), step)) {
    const Matrix q = combine_members(member_probs, w);
    for (Eigen::Index i = 0; i < q.rows(); ++i) pred[static_cast<std::size_t>(i)] = argmax_row(q, i);
    const double f1 = macro_f1(pred, labels, class_count);
    ++best.evaluated;
    if (f1 > best.macro_f1) {
      best.macro_f1 = f1;
      best.weights = w;
    }
  }
  return best;
}

EnsembleModel build_ensemble(const LabeledDataset& train_all, const LabeledDataset& val_all,
                             std::vector<ClassId> class_set, const EnsembleConfig& cfg, std::uint64_t seed,
                             EnsembleBuildReport* report) {
  std::sort(class_set.begin(), class_set.end());
  class_set.erase(std::unique(class_set.begin(), class_set.end()), class_set.end());
  if (class_set.size() < 2) throw ConfigError("ensemble class set needs at least 2 classes");
  EnsembleModel model;
  model.class_set = class_set;
  model.seed = seed;
  const LabeledDataset train = restrict_classes(train_all, class_set);
  const LabeledDataset val = restrict_classes(val_all, class_set);
  if (train.size() == 0 || val.size() == 0) throw DataError("ensemble: empty training or validation data for class set");
  const std::vector<int> y_train = local_labels(model, train.labels);
  const std::vector<int> y_val = local_labels(model, val.labels);
  const int cc = model.class_count();

  ForestConfig forest_cfg = cfg.forest;
  forest_cfg.seed = derive_seed(seed, "rf_raw");
  model.rf_raw = train_forest(train.features, y_train, cc, forest_cfg);
  model.lr_raw = train_logistic(train.features, y_train, cc, cfg.logistic);

  EncoderConfig enc_cfg = cfg.encoder;
  enc_cfg.seed = derive_seed(seed, "encoder");
  EncoderTrainResult enc = train_encoder(train.features, y_train, val.features, y_val, cc, enc_cfg);
  model.encoder = std::move(enc.model);
  const Matrix emb_train = embed(model.encoder, train.features);
  forest_cfg.seed = derive_seed(seed, "rf_emb");
  model.rf_emb = train_forest(emb_train, y_train, cc, forest_cfg);
  model.lr_emb = train_logistic(emb_train, y_train, cc, cfg.logistic);

  const MemberProbs val_probs = member_predictions(model, val.features);
  const WeightSearchResult search = optimize_weights(val_probs, y_val, cc, cfg.grid_step);
  std::copy(search.weights.begin(), search.weights.end(), model.weights.begin());
  if (report != nullptr) {
    for (int i = 0; i < kMemberCount; ++i) report->val_accuracy[static_cast<std::size_t>(i)] = accuracy_of(val_probs[static_cast<std::size_t>(i)], y_val);
    report->val_macro_f1 = search.macro_f1;
    report->encoder_epochs = enc.epochs_run;
    report->encoder_val_f1 = enc.best_val_f1;
  }
  return model;
}

std::vector<TargetEntry> assign_targets(EnsembleModel& ensemble_b, const Matrix& x, std::span<const int> sample_ids) {
  if (static_cast<std::size_t>(x.rows()) != sample_ids.size()) throw ShapeError("assign_targets: id count mismatch");
  if (std::find(ensemble_b.class_set.begin(), ensemble_b.class_set.end(), kMalwareClass) != ensemble_b.class_set.end()) {
    throw ConfigError("assign_targets: guide ensemble must not include the malware class");
  }
  std::vector<TargetEntry> out;
  if (x.rows() == 0) return out;
  const Matrix q = ensemble_predict(ensemble_b, x);
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    const int c = argmax_row(q, i);
    out.push_back({sample_ids[static_cast<std::size_t>(i)], ensemble_b.class_set[static_cast<std::size_t>(c)], q(i, c)});
  }
  return out;
}

std::string targets_to_csv(std::span<const TargetEntry> targets) {
  std::string out = "sample_id,c_star,confidence\n";
  char buf[64];
  for (const TargetEntry& t : targets) {
    auto res = std::to_chars(buf, buf + sizeof(buf), t.confidence);
    out += std::to_string(t.sample_id) + ',' + std::to_string(t.c_star) + ',' + std::string(buf, res.ptr) + '\n';
  }
  return out;
}

std::vector<TargetEntry> targets_from_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "sample_id,c_star,confidence") throw DataError("targets CSV: unexpected header");
  std::vector<TargetEntry> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    TargetEntry t;
    const auto a = line.find(',');
    const auto b = line.find(',', a + 1);
    if (a == std::string::npos || b == std::string::npos) throw DataError("targets CSV: malformed row '" + line + "'");
    const char* s = line.data();
    auto r1 = std::from_chars(s, s + a, t.sample_id);
    auto r2 = std::from_chars(s + a + 1, s + b, t.c_star);
    auto r3 = std::from_chars(s + b + 1, s + line.size(), t.confidence);
    if (r1.ec != std::errc() || r2.ec != std::errc() || r3.ec != std::errc()) {
      throw DataError("targets CSV: malformed row '" + line + "'");
    }
    out.push_back(t);
  }
  return out;
}

void save_ensemble(const std::filesystem::path& dir, EnsembleModel& model) {
  std::filesystem::create_directories(dir);
  write_file(dir / "rf_raw.json", forest_to_json(model.rf_raw));
  write_file(dir / "rf_emb.json", forest_to_json(model.rf_emb));
  save_linear(dir / "lr_raw.bin", model.lr_raw);
  save_linear(dir / "lr_emb.bin", model.lr_emb);
  save_encoder(dir / "encoder.bin", model.encoder);
  nlohmann::json j;
  j["members"] = {{"rf_raw", "rf_raw.json"}, {"lr_raw", "lr_raw.bin"}, {"rf_emb", "rf_emb.json"},
                  {"lr_emb", "lr_emb.bin"}, {"encoder", "encoder.bin"}};
  j["weights"] = model.weights;
  j["class_set"] = model.class_set;
  j["seed"] = model.seed;
  write_file(dir / "manifest.json", j.dump(2) + "\n");
}

EnsembleModel load_ensemble(const std::filesystem::path& dir) {
  const auto j = nlohmann::json::parse(read_file(dir / "manifest.json"));
  EnsembleModel model;
  model.class_set = j.at("class_set").get<std::vector<ClassId>>();
  model.weights = j.at("weights").get<std::array<double, kMemberCount>>();
  model.seed = j.at("seed").get<std::uint64_t>();
  const auto& m = j.at("members");
  model.rf_raw = forest_from_json(read_file(dir / m.at("rf_raw").get<std::string>()));
  model.rf_emb = forest_from_json(read_file(dir / m.at("rf_emb").get<std::string>()));
  model.lr_raw = load_linear(dir / m.at("lr_raw").get<std::string>());
  model.lr_emb = load_linear(dir / m.at("lr_emb").get<std::string>());
  model.encoder = load_encoder(dir / m.at("encoder").get<std::string>());
  return model;
}

}  // namespace impinj
