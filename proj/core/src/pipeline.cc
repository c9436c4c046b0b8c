#include "impinj/pipeline.h"

#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "impinj/hashing.h"
#include "impinj/param_io.h"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace impinj {

std::string stage_name(Stage s) {
  switch (s) {
    case Stage::kSplit: return "split";
    case Stage::kEnsembleA: return "ensemble_a";
    case Stage::kEnsembleB: return "ensemble_b";
    case Stage::kTargets: return "targets";
    case Stage::kDistill: return "distill";
    case Stage::kTuneCvae: return "tune_cvae";
    case Stage::kTrainCvae: return "train_cvae";
    case Stage::kAttack: return "attack";
    case Stage::kEvaluate: return "evaluate";
  }
  return "unknown";
}

std::string stage_subcommand(Stage s) {
  switch (s) {
    case Stage::kSplit: return "split";
    case Stage::kEnsembleA:
    case Stage::kEnsembleB: return "train-ensemble";
    case Stage::kTargets: return "assign-targets";
    case Stage::kDistill: return "distill";
    case Stage::kTuneCvae: return "tune-cvae";
    case Stage::kTrainCvae: return "train-cvae";
    case Stage::kAttack: return "attack";
    case Stage::kEvaluate: return "evaluate";
  }
  return "run";
}

StageError::StageError(Stage stage, const std::string& what)
    : Error("stage " + stage_name(stage) + ": " + what), stage_(stage) {}

std::string format_log(const std::string& event, const std::vector<std::pair<std::string, std::string>>& fields) {
  std::string line = "event=" + event;
  for (const auto& [k, v] : fields) {
    line += ' ';
    line += k;
    line += '=';
    if (v.find_first_of(" \t\"=") != std::string::npos) {
      line += '"';
      for (char c : v) {
        if (c == '"' || c == '\\') line += '\\';
        line += c;
      }
      line += '"';
    } else {
      line += v;
    }
  }
  return line;
}

namespace {

constexpr const char* kManifest = "stage.json";

std::string read_text(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw Error("cannot read " + p.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw Error("cannot write " + p.string());
  os << text;
  if (!os) throw Error("write failed for " + p.string());
}

std::vector<Stage> upstream_of(Stage s) {
  switch (s) {
    case Stage::kSplit: return {};
    case Stage::kEnsembleA:
    case Stage::kEnsembleB: return {Stage::kSplit};
    case Stage::kTargets: return {Stage::kSplit, Stage::kEnsembleB};
    case Stage::kDistill: return {Stage::kSplit, Stage::kEnsembleA};
    case Stage::kTuneCvae: return {Stage::kSplit, Stage::kEnsembleA, Stage::kTargets, Stage::kDistill};
    case Stage::kTrainCvae: return {Stage::kSplit, Stage::kEnsembleA, Stage::kTargets, Stage::kDistill, Stage::kTuneCvae};
    case Stage::kAttack: return {Stage::kSplit, Stage::kEnsembleA, Stage::kTargets, Stage::kTrainCvae};
    case Stage::kEvaluate: return {Stage::kEnsembleA, Stage::kAttack};
  }
  return {};
}

json forest_json(const ForestConfig& f) {
  return {{"n_trees", f.n_trees},
          {"max_depth", f.max_depth},
          {"min_samples_leaf", f.min_samples_leaf},
          {"max_features", f.max_features ? json(*f.max_features) : json(nullptr)},
          {"bootstrap", f.bootstrap}};
}

json encoder_json(const EncoderConfig& e) {
  return {{"hidden1", e.hidden1},         {"hidden2", e.hidden2},       {"embedding_dim", e.embedding_dim},
          {"dropout", e.dropout},         {"arc_scale", e.arc_scale},   {"arc_margin", e.arc_margin},
          {"temperature", e.temperature}, {"supcon_weight", e.supcon_weight},
          {"epochs", e.epochs},           {"batch_size", e.batch_size}, {"lr", e.lr},
          {"patience", e.patience}};
}

json distill_json(const DistillConfig& d) {
  return {{"temperature", d.temperature}, {"alpha", d.alpha},     {"epochs", d.epochs},
          {"batch_size", d.batch_size},   {"lr", d.lr},           {"dropout", d.dropout},
          {"hidden1", d.hidden1},         {"hidden2", d.hidden2}, {"hidden3", d.hidden3}};
}

json space_json(const SearchSpace& s) {
  return {{"lambda_r", {s.lambda_r_min, s.lambda_r_max}}, {"beta", {s.beta_min, s.beta_max}},
          {"lambda_s", {s.lambda_s_min, s.lambda_s_max}}, {"lambda_c", {s.lambda_c_min, s.lambda_c_max}},
          {"latent_dims", s.latent_dims},                 {"class_embed_dims", s.class_embed_dims},
          {"lr", {s.lr_min, s.lr_max}}};
}

std::vector<ClassId> dataset_classes(const LabeledDataset& ds) {
  std::vector<ClassId> c(ds.labels.begin(), ds.labels.end());
  std::sort(c.begin(), c.end());
  c.erase(std::unique(c.begin(), c.end()), c.end());
  return c;
}

std::vector<int> local_labels(const EnsembleModel& m, std::span<const ClassId> labels) {
  std::vector<int> out;
  for (ClassId c : labels) out.push_back(m.local_index(c));
  return out;
}

std::vector<int> rows_with_label(const LabeledDataset& ds, std::span<const int> rows, ClassId c) {
  std::vector<int> out;
  for (int r : rows) {
    if (ds.labels[static_cast<std::size_t>(r)] == c) out.push_back(r);
  }
  return out;
}

json classification_json(const ClassificationReport& r, const std::vector<ClassId>& classes) {
  json per = json::object();
  for (std::size_t c = 0; c < classes.size(); ++c) {
    const double v = r.per_class_recall[c];
    per[std::to_string(classes[c])] = std::isnan(v) ? json(nullptr) : json(v);
  }
  return {{"accuracy", r.accuracy},
          {"macro_f1", r.macro_f1},
          {"macro_recall", r.macro_recall},
          {"per_class_recall", per},
          {"excluded_absent", r.excluded_absent}};
}

struct MalwareSet {
  std::vector<int> ids;
  Matrix x;
  std::vector<ClassId> targets;
};

MalwareSet malware_rows(const LabeledDataset& ds, std::span<const int> rows, const std::map<int, TargetEntry>& targets,
                        Stage stage) {
  MalwareSet m;
  m.ids = rows_with_label(ds, rows, kMalwareClass);
  m.x = gather(ds.features, m.ids);
  for (int id : m.ids) {
    auto it = targets.find(id);
    if (it == targets.end()) {
      throw MissingArtifactError(stage, "no target class for sample " + std::to_string(id) + "; run `assign-targets`");
    }
    m.targets.push_back(it->second.c_star);
  }
  return m;
}

}  // namespace

Pipeline::Pipeline(RunConfig cfg, LogSink log) : cfg_(std::move(cfg)), log_(std::move(log)) {
  if (!log_) log_ = [](const std::string&) {};
}

fs::path Pipeline::seed_dir(std::uint64_t seed) const { return cfg_.out_dir / ("seed_" + std::to_string(seed)); }

fs::path Pipeline::stage_dir(std::uint64_t seed, Stage stage) const { return seed_dir(seed) / stage_name(stage); }

std::uint64_t Pipeline::stage_seed(std::uint64_t seed, Stage stage) { return derive_seed(seed, stage_name(stage)); }

const LabeledDataset& Pipeline::dataset() {
  if (!dataset_) {
    if (cfg_.dataset.empty()) throw ConfigError("no dataset path configured");
    dataset_ = load_dataset(cfg_.dataset, parse_dataset_format(cfg_.dataset_format));
    log_(format_log("dataset_loaded", {{"path", cfg_.dataset.string()},
                                       {"samples", std::to_string(dataset_->size())},
                                       {"features", std::to_string(dataset_->feature_count())},
                                       {"classes", std::to_string(dataset_->class_count)}}));
  }
  return *dataset_;
}

const std::string& Pipeline::dataset_hash() {
  if (dataset_hash_.empty()) {
    if (cfg_.dataset.empty()) throw ConfigError("no dataset path configured");
    if (!fs::exists(cfg_.dataset)) throw DataError("dataset not found: " + cfg_.dataset.string());
    dataset_hash_ = sha256_file(cfg_.dataset);
  }
  return dataset_hash_;
}

std::string Pipeline::stage_key(Stage stage, std::uint64_t seed) {
  if (auto it = keys_.find({stage, seed}); it != keys_.end()) return it->second;
  json j;
  j["stage"] = stage_name(stage);
  j["seed"] = seed;
  json c;
  switch (stage) {
    case Stage::kSplit:
      c = {{"dataset", dataset_hash()},
           {"format", cfg_.dataset_format},
           {"fractions", cfg_.fractions.as_array()}};
      break;
    case Stage::kEnsembleA:
    case Stage::kEnsembleB:
      c = {{"forest", forest_json(cfg_.ensemble.forest)},
           {"logistic",
            {{"l2", cfg_.ensemble.logistic.l2},
             {"lr", cfg_.ensemble.logistic.lr},
             {"max_iters", cfg_.ensemble.logistic.max_iters},
             {"tol", cfg_.ensemble.logistic.tol}}},
           {"encoder", encoder_json(cfg_.ensemble.encoder)},
           {"grid_step", cfg_.ensemble.grid_step}};
      break;
    case Stage::kTargets:
      break;
    case Stage::kDistill:
      c = distill_json(cfg_.distill);
      break;
    case Stage::kTuneCvae:
      c = {{"enabled", cfg_.tune},
           {"trials", cfg_.tuning.trials},
           {"trial_epochs", cfg_.tuning.trial_epochs},
           {"space", space_json(cfg_.tuning.space)},
           {"base", json::parse(cvae_config_to_json(cfg_.cvae))},
           {"objective_ks", cfg_.objective_ks},
           {"objective_weights", {cfg_.objective_weights.tsr, cfg_.objective_weights.uer, cfg_.objective_weights.cts}}};
      break;
    case Stage::kTrainCvae:
      c = {{"cvae", json::parse(cvae_config_to_json(cfg_.cvae))}, {"objective_ks", cfg_.objective_ks}};
      break;
    case Stage::kAttack:
      c = {{"k_grid", cfg_.k_grid}};
      break;
    case Stage::kEvaluate:
      break;
  }
  j["config"] = c;
  json up = json::object();
  for (Stage u : upstream_of(stage)) up[stage_name(u)] = stage_key(u, seed);
  j["upstream"] = up;
  return keys_[{stage, seed}] = sha256_hex(j.dump());
}

bool Pipeline::is_current(Stage stage, std::uint64_t seed) {
  if (verified_.count({stage, seed})) return true;
  const fs::path dir = stage_dir(seed, stage);
  const fs::path manifest = dir / kManifest;
  if (!fs::exists(manifest)) return false;
  json j;
  try {
    j = json::parse(read_text(manifest));
  } catch (const std::exception&) {
    return false;
  }
  if (j.value("key", std::string()) != stage_key(stage, seed)) return false;
  for (const auto& [name, hash] : j.at("files").items()) {
    const fs::path p = dir / name;
    if (!fs::exists(p) || sha256_file(p) != hash.get<std::string>()) return false;
  }
  verified_.insert({stage, seed});
  return true;
}

void Pipeline::write_manifest(Stage stage, std::uint64_t seed, const fs::path& dir, const std::string& key) {
  std::vector<std::string> names;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string rel = fs::relative(entry.path(), dir).generic_string();
    if (rel != kManifest) names.push_back(rel);
  }
  std::sort(names.begin(), names.end());
  json files = json::object();
  for (const auto& n : names) files[n] = sha256_file(dir / n);
  json j{{"stage", stage_name(stage)}, {"seed", seed}, {"key", key}, {"files", files}};
  write_text(dir / kManifest, j.dump(2) + "\n");
}

void Pipeline::invalidate_downstream(Stage stage, std::uint64_t seed) {
  verified_.erase({stage, seed});
  for (Stage s : kAllStages) {
    const auto up = upstream_of(s);
    if (verified_.count({s, seed}) && std::find(up.begin(), up.end(), stage) != up.end()) invalidate_downstream(s, seed);
  }
}

void Pipeline::ensure_upstream(Stage stage, std::uint64_t seed, bool build_upstream) {
  for (Stage u : upstream_of(stage)) {
    if (build_upstream) {
      run_stage(u, seed, true);
    } else if (!is_current(u, seed)) {
      throw MissingArtifactError(stage, "upstream artifact " + (stage_dir(seed, u) / kManifest).string() +
                                            " is missing or stale; run `" + stage_subcommand(u) + "` first");
    }
  }
}

StageOutcome Pipeline::run_stage(Stage stage, std::uint64_t seed, bool build_upstream) {
  ensure_upstream(stage, seed, build_upstream);
  StageOutcome out{stage, false, stage_key(stage, seed), stage_dir(seed, stage)};
  const std::string seed_str = std::to_string(seed);
  const bool seen = verified_.count({stage, seed}) > 0;
  if (is_current(stage, seed)) {
    out.cache_hit = true;
    if (!seen) log_(format_log("stage", {{"stage", stage_name(stage)}, {"seed", seed_str}, {"status", "cache_hit"}}));
    return out;
  }
  log_(format_log("stage", {{"stage", stage_name(stage)}, {"seed", seed_str}, {"status", "start"}}));
  invalidate_downstream(stage, seed);
  fs::remove_all(out.dir);
  fs::create_directories(out.dir);
  try {
    execute(stage, seed, out.dir);
  } catch (const StageError&) {
    throw;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
  write_manifest(stage, seed, out.dir, out.key);
  verified_.insert({stage, seed});
  log_(format_log("stage", {{"stage", stage_name(stage)}, {"seed", seed_str}, {"status", "done"}}));
  return out;
}

void Pipeline::execute(Stage stage, std::uint64_t seed, const fs::path& dir) {
  const LabeledDataset& ds = dataset();
  const std::uint64_t sseed = stage_seed(seed, stage);
  auto split = [&] { return split_from_json(read_text(stage_dir(seed, Stage::kSplit) / "split.json")); };
  auto ensemble_a = [&] { return load_ensemble(stage_dir(seed, Stage::kEnsembleA) / "model"); };
  auto targets = [&] {
    std::map<int, TargetEntry> m;
    for (const auto& t : targets_from_csv(read_text(stage_dir(seed, Stage::kTargets) / "targets.csv"))) {
      m[t.sample_id] = t;
    }
    return m;
  };
  auto log_kv = [&](const std::string& event, std::vector<std::pair<std::string, std::string>> fields) {
    fields.insert(fields.begin(), {"seed", std::to_string(seed)});
    log_(format_log(event, fields));
  };

  switch (stage) {
    case Stage::kSplit: {
      const SplitManifest m = stratified_split(ds, cfg_.fractions, sseed);
      write_text(dir / "split.json", split_to_json(m));
      log_kv("split", {{"train", std::to_string(m.train.size())},
                       {"val_tune", std::to_string(m.val_tune.size())},
                       {"val_es", std::to_string(m.val_es.size())},
                       {"test", std::to_string(m.test.size())}});
      break;
    }
    case Stage::kEnsembleA:
    case Stage::kEnsembleB: {
      const SplitManifest m = split();
      std::vector<ClassId> classes = dataset_classes(ds);
      if (stage == Stage::kEnsembleB) {
        classes.erase(std::remove(classes.begin(), classes.end(), kMalwareClass), classes.end());
      }
      EnsembleBuildReport build;
      EnsembleModel model =
          build_ensemble(subset(ds, m.train), subset(ds, m.val_tune), classes, cfg_.ensemble, sseed, &build);
      save_ensemble(dir / "model", model);

      std::vector<int> test_rows;
      for (int r : m.test) {
        if (std::find(classes.begin(), classes.end(), ds.labels[static_cast<std::size_t>(r)]) != classes.end()) {
          test_rows.push_back(r);
        }
      }
      const LabeledDataset test = subset(ds, test_rows);
      const LabeledDataset train = subset(ds, m.train);
      const std::vector<int> y_test = local_labels(model, test.labels);
      const MemberProbs probs = member_predictions(model, test.features);
      json members = json::object();
      for (int i = 0; i < kMemberCount; ++i) {
        std::vector<int> pred(static_cast<std::size_t>(test.size()));
        for (Eigen::Index r = 0; r < probs[static_cast<std::size_t>(i)].rows(); ++r) {
          pred[static_cast<std::size_t>(r)] = argmax_row(probs[static_cast<std::size_t>(i)], r);
        }
        members[kMemberNames[static_cast<std::size_t>(i)]] =
            classification_json(classification_metrics(pred, y_test, model.class_count()), classes);
      }
      const Matrix q = combine_members(probs, model.weights);
      std::vector<int> pred(static_cast<std::size_t>(test.size()));
      for (Eigen::Index r = 0; r < q.rows(); ++r) pred[static_cast<std::size_t>(r)] = argmax_row(q, r);
      const ClassificationReport ens = classification_metrics(pred, y_test, model.class_count());

      // Nearest-centroid probes in raw and embedding space.
      std::vector<ClassId> train_labels;
      std::vector<int> train_rows;
      for (std::size_t i = 0; i < train.size(); ++i) {
        if (std::find(classes.begin(), classes.end(), train.labels[i]) != classes.end()) {
          train_rows.push_back(static_cast<int>(i));
          train_labels.push_back(train.labels[i]);
        }
      }
      const Matrix train_x = gather(train.features, train_rows);
      const std::vector<int> y_train = local_labels(model, train_labels);
      auto nc_accuracy = [&](const Matrix& tr, const Matrix& te) {
        const auto p = nearest_centroid_predict(tr, y_train, model.class_count(), te);
        long ok = 0;
        for (std::size_t i = 0; i < p.size(); ++i) ok += p[i] == y_test[i];
        return p.empty() ? 0.0 : static_cast<double>(ok) / static_cast<double>(p.size());
      };
      const double nc_raw = nc_accuracy(train_x, test.features);
      const double nc_emb = nc_accuracy(embed(model.encoder, train_x), embed(model.encoder, test.features));

      json report{{"class_set", classes},
                  {"weights", model.weights},
                  {"val_macro_f1", build.val_macro_f1},
                  {"val_member_accuracy", build.val_accuracy},
                  {"encoder_epochs", build.encoder_epochs},
                  {"encoder_val_f1", build.encoder_val_f1},
                  {"test_members", members},
                  {"test_ensemble", classification_json(ens, classes)},
                  {"test_nearest_centroid", {{"raw", nc_raw}, {"embedding", nc_emb}}}};
      if (std::find(classes.begin(), classes.end(), kMalwareClass) != classes.end()) {
        report["test_recall6"] = ens.per_class_recall[static_cast<std::size_t>(model.local_index(kMalwareClass))];
      }
      write_text(dir / "report.json", report.dump(2) + "\n");
      log_kv("ensemble", {{"stage", stage_name(stage)},
                          {"test_accuracy", std::to_string(ens.accuracy)},
                          {"val_macro_f1", std::to_string(build.val_macro_f1)}});
      break;
    }
    case Stage::kTargets: {
      EnsembleModel b = load_ensemble(stage_dir(seed, Stage::kEnsembleB) / "model");
      std::vector<int> all(ds.size());
      std::iota(all.begin(), all.end(), 0);
      const std::vector<int> ids = rows_with_label(ds, all, kMalwareClass);
      if (ids.empty()) throw DataError("dataset has no malware samples (class " + std::to_string(kMalwareClass) + ")");
      const auto t = assign_targets(b, gather(ds.features, ids), ids);
      write_text(dir / "targets.csv", targets_to_csv(t));
      std::map<ClassId, int> hist;
      for (const auto& e : t) ++hist[e.c_star];
      std::vector<std::pair<std::string, std::string>> fields;
      for (const auto& [c, n] : hist) fields.emplace_back("class" + std::to_string(c), std::to_string(n));
      log_kv("targets", fields);
      break;
    }
    case Stage::kDistill: {
      const SplitManifest m = split();
      EnsembleModel a = ensemble_a();
      const LabeledDataset train = subset(ds, m.train);
      const Matrix q = ensemble_predict(a, train.features);
      nn::save_matrix(dir / "teacher_q.bin", "teacher_q", q);
      DistillConfig dc = cfg_.distill;
      dc.seed = sseed;
      ProxyTrainResult res = train_proxy(train.features, q, local_labels(a, train.labels), dc);
      save_proxy(dir / "proxy.bin", res.model);
      if (res.floored > 0) log_kv("teacher_floor", {{"entries", std::to_string(res.floored)}});

      const LabeledDataset test = subset(ds, m.test);
      const std::vector<int> y_test = local_labels(a, test.labels);
      const Matrix logits = res.model.logits(test.features);
      const Matrix qt = ensemble_predict(a, test.features);
      long ok = 0;
      long agree = 0;
      long ens_ok = 0;
      for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const int p = argmax_row(logits, r);
        const int e = argmax_row(qt, r);
        ok += p == y_test[static_cast<std::size_t>(r)];
        ens_ok += e == y_test[static_cast<std::size_t>(r)];
        agree += p == e;
      }
      const double n = std::max<double>(1.0, static_cast<double>(logits.rows()));
      json report{{"proxy_test_accuracy", static_cast<double>(ok) / n},
                  {"ensemble_test_accuracy", static_cast<double>(ens_ok) / n},
                  {"agreement", static_cast<double>(agree) / n},
                  {"floored_entries", res.floored},
                  {"epoch_loss", res.epoch_loss}};
      write_text(dir / "report.json", report.dump(2) + "\n");
      log_kv("distill", {{"proxy_test_accuracy", std::to_string(static_cast<double>(ok) / n)},
                         {"agreement", std::to_string(static_cast<double>(agree) / n)}});
      break;
    }
    case Stage::kTuneCvae:
    case Stage::kTrainCvae: {
      const SplitManifest m = split();
      EnsembleModel a = ensemble_a();
      ProxyModel proxy = load_proxy(stage_dir(seed, Stage::kDistill) / "proxy.bin");
      const auto tmap = targets();
      const MalwareSet train_mal = malware_rows(ds, m.train, tmap, stage);
      const MalwareSet tune_mal = malware_rows(ds, m.val_tune, tmap, stage);
      const MalwareSet es_mal = malware_rows(ds, m.val_es, tmap, stage);
      if (train_mal.ids.empty()) throw DataError("no malware samples in the training split");
      const LabeledDataset train = subset(ds, m.train);
      CvaeTrainingSet data;
      data.malware = &train_mal.x;
      data.targets = train_mal.targets;
      data.references = &train.features;
      data.reference_labels = train.labels;
      data.proxy_column = [&a](ClassId c) { return a.local_index(c); };
      const std::vector<int> ks = cfg_.objective_ks;
      const ObjectiveWeights w = cfg_.objective_weights;
      auto objective_on = [&a, &ks, w](const MalwareSet& set) -> CvaeObjective {
        if (set.ids.empty()) return {};
        return [&a, &ks, w, &set](CvaeModel& model) { return evasion_objective(a, model, set.x, set.targets, ks, w); };
      };
      if (stage == Stage::kTuneCvae) {
        if (!cfg_.tune) {
          write_text(dir / "best_config.json", cvae_config_to_json(cfg_.cvae) + "\n");
          write_text(dir / "trials.jsonl", "");
          log_kv("tune", {{"status", "disabled"}});
          break;
        }
        TuneConfig tc = cfg_.tuning;
        tc.seed = sseed;
        tc.base = cfg_.cvae;
        CvaeObjective score = objective_on(tune_mal);
        if (!score) score = objective_on(es_mal);
        if (!score) throw DataError("no held-out malware samples to score tuning trials");
        const TuneResult res = tune_hyperparameters(data, proxy, tc, objective_on(es_mal), score);
        std::string lines;
        for (const auto& t : res.trials) lines += trial_to_json_line(t);
        write_text(dir / "trials.jsonl", lines);
        write_text(dir / "best_config.json", cvae_config_to_json(res.best) + "\n");
        log_kv("tune", {{"trials", std::to_string(res.trials.size())},
                        {"best_trial", std::to_string(res.best_trial)},
                        {"best_objective", std::to_string(res.best_objective)}});
      } else {
        CvaeConfig cc = cvae_config_from_json(read_text(stage_dir(seed, Stage::kTuneCvae) / "best_config.json"));
        cc.epochs = cfg_.cvae.epochs;
        cc.patience = cfg_.cvae.patience;
        cc.seed = sseed;
        CvaeTrainResult res = train_cvae(data, proxy, cc, objective_on(es_mal));
        save_cvae(dir / "cvae.bin", res.model);
        json details = json::object();
        for (const auto& [k, v] : res.best_details) details[k] = v;
        json hist{{"config", json::parse(cvae_config_to_json(cc))},
                  {"epochs_run", res.epochs_run},
                  {"best_epoch", res.best_epoch},
                  {"best_objective", res.best_objective},
                  {"best_details", details},
                  {"epoch_loss", res.epoch_loss},
                  {"epoch_objective", res.epoch_objective}};
        write_text(dir / "history.json", hist.dump(2) + "\n");
        log_kv("train_cvae", {{"epochs_run", std::to_string(res.epochs_run)},
                              {"best_epoch", std::to_string(res.best_epoch)},
                              {"best_objective", std::to_string(res.best_objective)}});
      }
      break;
    }
    case Stage::kAttack: {
      const SplitManifest m = split();
      EnsembleModel a = ensemble_a();
      CvaeModel cvae = load_cvae(stage_dir(seed, Stage::kTrainCvae) / "cvae.bin");
      const MalwareSet test_mal = malware_rows(ds, m.test, targets(), stage);
      if (test_mal.ids.empty()) throw DataError("no malware samples in the test split");
      const LabeledDataset train = subset(ds, m.train);
      std::vector<std::vector<long>> freq(static_cast<std::size_t>(kMalwareClass));
      for (ClassId c = 1; c < kMalwareClass; ++c) {
        if (!train.indices_of_class(c).empty()) freq[static_cast<std::size_t>(c)] = class_frequency(train, c);
      }
      const Matrix scores = cvae_scores(cvae, test_mal.x, test_mal.targets);
      const Matrix before = ensemble_predict(a, test_mal.x);
      AttackInputs in;
      in.malware = &test_mal.x;
      in.sample_ids = test_mal.ids;
      in.targets = test_mal.targets;
      in.cvae_scores = &scores;
      in.class_frequencies = &freq;
      in.random_seed = sseed;
      for (AttackMethod method : {AttackMethod::kCvae, AttackMethod::kMostPopular, AttackMethod::kRandom}) {
        for (int k : cfg_.k_grid) {
          auto samples = generate_attacks(method, k, in);
          label_attacks(a, before, test_mal.x, samples);
          write_text(dir / (method_name(method) + "_k" + std::to_string(k) + ".jsonl"), attacks_to_jsonl(samples));
          const EvasionRates r = evasion_metrics(evasion_counts(samples));
          log_kv("attack", {{"method", method_name(method)},
                            {"k", std::to_string(k)},
                            {"uer", std::to_string(r.uer)},
                            {"tsr", std::to_string(r.tsr)}});
        }
      }
      break;
    }
    case Stage::kEvaluate: {
      const json a_report = json::parse(read_text(stage_dir(seed, Stage::kEnsembleA) / "report.json"));
      std::vector<MetricRecord> records;
      bool baseline_done = false;
      for (AttackMethod method : {AttackMethod::kCvae, AttackMethod::kMostPopular, AttackMethod::kRandom}) {
        for (int k : cfg_.k_grid) {
          const fs::path p = stage_dir(seed, Stage::kAttack) / (method_name(method) + "_k" + std::to_string(k) + ".jsonl");
          if (!fs::exists(p)) throw MissingArtifactError(stage, "missing " + p.string() + "; run `attack` first");
          const auto samples = attacks_from_jsonl(read_text(p));
          if (!baseline_done) {
            EvasionCounts base;
            base.m_malware = static_cast<long>(samples.size());
            for (const auto& s : samples) {
              if (s.before_label != kMalwareClass) {
                ++base.m_evaded;
                if (s.before_label == s.target) ++base.m_target;
              }
            }
            MetricRecord r = make_record("none", 0, seed, base);
            const json& ens = a_report.at("test_ensemble");
            r.accuracy = ens.at("accuracy").get<double>();
            r.macro_f1 = ens.at("macro_f1").get<double>();
            r.macro_recall = ens.at("macro_recall").get<double>();
            if (a_report.contains("test_recall6") &&
                std::abs(a_report.at("test_recall6").get<double>() - r.recall6) > 1e-12) {
              throw StageError(stage, "baseline Recall6 disagrees with the ensemble report");
            }
            records.push_back(r);
            baseline_done = true;
          }
          records.push_back(make_record(method_name(method), k, seed, evasion_counts(samples)));
        }
      }
      write_text(dir / "records.csv", records_to_csv(records));
      break;
    }
  }
}

int Pipeline::run_all() {
  validate(cfg_);
  int failures = 0;
  for (std::uint64_t seed : cfg_.seeds) {
    fs::remove(seed_dir(seed) / "failure.json");
    try {
      for (Stage s : kAllStages) run_stage(s, seed, true);
    } catch (const StageError& e) {
      ++failures;
      json f{{"seed", seed}, {"stage", stage_name(e.stage())}, {"error", e.what()}};
      write_text(seed_dir(seed) / "failure.json", f.dump(2) + "\n");
      log_(format_log("stage_failed", {{"seed", std::to_string(seed)}, {"stage", stage_name(e.stage())}, {"error", e.what()}}));
    }
  }
  if (failures < static_cast<int>(cfg_.seeds.size())) report();
  return failures;
}

ReportPaths Pipeline::report() {
  std::vector<MetricRecord> all;
  for (std::uint64_t seed : cfg_.seeds) {
    const fs::path p = stage_dir(seed, Stage::kEvaluate) / "records.csv";
    if (!fs::exists(p)) {
      log_(format_log("report_skip", {{"seed", std::to_string(seed)}, {"reason", "no records; run `evaluate`"}}));
      continue;
    }
    auto recs = records_from_csv(read_text(p));
    all.insert(all.end(), recs.begin(), recs.end());
  }
  if (all.empty()) throw MissingArtifactError(Stage::kEvaluate, "no per-seed records found; run `evaluate` first");
  const auto cells = aggregate_runs(all);
  ReportPaths out{cfg_.out_dir / "report" / "records.csv", cfg_.out_dir / "report" / "aggregate.csv",
                  cfg_.out_dir / "report" / "plot_data.csv"};
  write_text(out.records, records_to_csv(all));
  write_text(out.aggregate, aggregate_to_csv(cells));
  write_text(out.plot_data, plot_data_to_csv(cells));
  log_(format_log("report", {{"records", std::to_string(all.size())}, {"cells", std::to_string(cells.size())},
                             {"dir", (cfg_.out_dir / "report").string()}}));
  return out;
}

fs::path Pipeline::export_embeddings(std::uint64_t seed, bool build_upstream) {
  if (build_upstream) {
    run_stage(Stage::kEnsembleA, seed, true);
  } else if (!is_current(Stage::kEnsembleA, seed)) {
    throw MissingArtifactError(Stage::kEnsembleA, "ensemble A is missing or stale; run `train-ensemble` first");
  }
  const LabeledDataset& ds = dataset();
  EnsembleModel a = load_ensemble(stage_dir(seed, Stage::kEnsembleA) / "model");
  std::vector<int> ids(ds.size());
  std::iota(ids.begin(), ids.end(), 0);
  const fs::path out = seed_dir(seed) / "embeddings" / "embeddings.csv";
  write_text(out, embeddings_to_csv(embed(a.encoder, ds.features), ids, ds.labels));
  log_(format_log("export_embeddings", {{"seed", std::to_string(seed)}, {"path", out.string()}}));
  return out;
}

}  // namespace impinj
