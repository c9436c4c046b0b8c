#include "impinj/cvae.h"

#include <cmath>
#include <numeric>

#include "impinj/data.h"
#include "impinj/optim.h"
#include "impinj/param_io.h"
#include "json.hpp"

namespace impinj {

using nn::Mode;
using nn::Tape;
using nn::Var;

namespace {

constexpr int kScoreChunk = 256;

std::vector<int> embed_rows(const CvaeModel& model, std::span<const ClassId> targets) {
  std::vector<int> rows;
  rows.reserve(targets.size());
  for (ClassId c : targets) {
    if (c < 1 || c > model.target_classes()) throw DataError("cvae: unknown target class " + std::to_string(c));
    rows.push_back(c - 1);
  }
  return rows;
}

template <typename F>
Var guarded(const char* term, F&& fn) {
  try {
    return fn();
  } catch (const NumericError& e) {
    throw NumericError(std::string("cvae diverged in ") + term + " loss: " + e.what());
  }
}

}  // namespace

std::string cvae_config_to_json(const CvaeConfig& c) {
  nlohmann::json j{{"lambda_r", c.lambda_r},       {"beta", c.beta},
                   {"lambda_s", c.lambda_s},       {"lambda_c", c.lambda_c},
                   {"latent_dim", c.latent_dim},   {"class_embed_dim", c.class_embed_dim},
                   {"lr", c.lr},                   {"epochs", c.epochs},
                   {"patience", c.patience},       {"batch_size", c.batch_size},
                   {"beta1", c.beta1},             {"beta2", c.beta2},
                   {"clip_norm", c.clip_norm},     {"leaky_slope", c.leaky_slope},
                   {"enc_hidden1", c.enc_hidden1}, {"enc_hidden2", c.enc_hidden2},
                   {"dec_hidden1", c.dec_hidden1}, {"dec_hidden2", c.dec_hidden2},
                   {"dec_hidden3", c.dec_hidden3}, {"seed", c.seed}};
  return j.dump();
}

CvaeConfig cvae_config_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  CvaeConfig c;
  auto get = [&j](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("lambda_r", c.lambda_r);
  get("beta", c.beta);
  get("lambda_s", c.lambda_s);
  get("lambda_c", c.lambda_c);
  get("latent_dim", c.latent_dim);
  get("class_embed_dim", c.class_embed_dim);
  get("lr", c.lr);
  get("epochs", c.epochs);
  get("patience", c.patience);
  get("batch_size", c.batch_size);
  get("beta1", c.beta1);
  get("beta2", c.beta2);
  get("clip_norm", c.clip_norm);
  get("leaky_slope", c.leaky_slope);
  get("enc_hidden1", c.enc_hidden1);
  get("enc_hidden2", c.enc_hidden2);
  get("dec_hidden1", c.dec_hidden1);
  get("dec_hidden2", c.dec_hidden2);
  get("dec_hidden3", c.dec_hidden3);
  get("seed", c.seed);
  for (double w : {c.lambda_r, c.beta, c.lambda_s, c.lambda_c}) {
    if (w < 0.0) throw ConfigError("cvae loss weights must be nonnegative");
  }
  return c;
}

CvaeModel::CvaeModel(Eigen::Index n, int target_classes, const CvaeConfig& cfg, Rng& rng)
    : class_embed("class_embed", nn::uniform_matrix(target_classes, cfg.class_embed_dim, 0.05, rng)),
      enc1("enc1", n + cfg.class_embed_dim, cfg.enc_hidden1, nn::Init::kHeUniform, rng),
      enc2("enc2", cfg.enc_hidden1, cfg.enc_hidden2, nn::Init::kHeUniform, rng),
      enc3("enc3", cfg.enc_hidden2, 2 * cfg.latent_dim, nn::Init::kXavierUniform, rng),
      dec1("dec1", n + cfg.latent_dim + cfg.class_embed_dim, cfg.dec_hidden1, nn::Init::kHeUniform, rng),
      dec2("dec2", cfg.dec_hidden1, cfg.dec_hidden2, nn::Init::kHeUniform, rng),
      dec3("dec3", cfg.dec_hidden2, cfg.dec_hidden3, nn::Init::kHeUniform, rng),
      dec4("dec4", cfg.dec_hidden3, n, nn::Init::kXavierUniform, rng),
      leaky_slope(cfg.leaky_slope) {}

std::vector<nn::Parameter*> CvaeModel::parameters() {
  std::vector<nn::Parameter*> p{&class_embed};
  for (nn::Linear* l : {&enc1, &enc2, &enc3, &dec1, &dec2, &dec3, &dec4}) l->collect(p);
  return p;
}

std::vector<nn::TensorRef> CvaeModel::tensors() {
  std::vector<nn::TensorRef> t{{class_embed.name, &class_embed.value}};
  for (nn::Linear* l : {&enc1, &enc2, &enc3, &dec1, &dec2, &dec3, &dec4}) l->tensors(t);
  return t;
}

Encoded encode(Tape& tape, CvaeModel& model, Var x, std::span<const ClassId> targets) {
  if (x.cols() != model.feature_count()) throw ShapeError("cvae encode: input width mismatch");
  if (static_cast<std::size_t>(x.rows()) != targets.size()) throw ShapeError("cvae encode: target count mismatch");
  const std::vector<int> rows = embed_rows(model, targets);
  Var e = nn::gather_rows(tape.param(model.class_embed), rows);
  Var h = nn::leaky_relu(model.enc1.forward(tape, nn::concat_cols({x, e})), model.leaky_slope);
  h = nn::leaky_relu(model.enc2.forward(tape, h), model.leaky_slope);
  Var out = model.enc3.forward(tape, h);
  const Eigen::Index d = model.latent_dim();
  return {nn::slice_cols(out, 0, d), nn::slice_cols(out, d, d)};
}

Var reparameterize(Var mu, Var logvar, const Matrix* eps) {
  if (eps == nullptr) return mu;
  if (eps->rows() != mu.rows() || eps->cols() != mu.cols()) throw ShapeError("reparameterize: noise shape mismatch");
  Var sigma = nn::exp(nn::scale(logvar, 0.5));
  return nn::add(mu, nn::mul(sigma, mu.tape->constant(*eps)));
}

Decoded decode_additive(Tape& tape, CvaeModel& model, Var x, Var z, std::span<const ClassId> targets) {
  if (x.cols() != model.feature_count()) throw ShapeError("cvae decode: input width mismatch");
  const std::vector<int> rows = embed_rows(model, targets);
  Var e = nn::gather_rows(tape.param(model.class_embed), rows);
  Var h = nn::leaky_relu(model.dec1.forward(tape, nn::concat_cols({x, z, e})), model.leaky_slope);
  h = nn::leaky_relu(model.dec2.forward(tape, h), model.leaky_slope);
  h = nn::leaky_relu(model.dec3.forward(tape, h), model.leaky_slope);
  Var s = nn::sigmoid(model.dec4.forward(tape, h));
  const Matrix absent = (1.0 - x.value().array()).matrix();
  Var relaxed = nn::add(x, nn::mul(tape.constant(absent), s));
  return {s, relaxed};
}

Var loss_reconstruction(Var x_tilde, const Matrix& x, const Matrix& x_ref, bool* all_present) {
  const Matrix mask = (x.array() == 0.0).cast<double>();
  if (all_present != nullptr) *all_present = (mask.rowwise().sum().array() == 0.0).any();
  return nn::masked_bce(x_tilde, x_ref, mask);
}

Var loss_kl(Var mu, Var logvar) {
  const double n = static_cast<double>(mu.rows());
  Var inner = nn::sub(nn::sub(nn::add_scalar(logvar, 1.0), nn::pow(mu, 2.0)), nn::exp(logvar));
  return nn::scale(nn::sum(inner), -0.5 / n);
}

Var loss_sparsity(Var x_tilde, const Matrix& x) {
  const double n = static_cast<double>(x.rows());
  return nn::scale(nn::add_scalar(nn::sum(x_tilde), -x.sum()), 1.0 / n);
}

Var loss_classification(Var x_tilde, std::span<const int> proxy_labels, ProxyModel& proxy) {
  if (!proxy.frozen()) throw ConfigError("loss_classification: proxy must be frozen");
  Tape& tape = *x_tilde.tape;
  Var binary = nn::straight_through_binarize(x_tilde, 0.5);
  return nn::cross_entropy(proxy.forward(tape, binary, Mode::kEval, nullptr), proxy_labels);
}

CvaeLosses cvae_losses(Tape& tape, CvaeModel& model, ProxyModel& proxy, const Matrix& x, const Matrix& x_ref,
                       std::span<const ClassId> targets, std::span<const int> proxy_labels, const Matrix* eps,
                       const CvaeConfig& cfg) {
  Var xv = tape.constant(x);
  Encoded enc = [&] {
    try {
      return encode(tape, model, xv, targets);
    } catch (const NumericError& e) {
      throw NumericError(std::string("cvae diverged in encoder: ") + e.what());
    }
  }();
  CvaeLosses out;
  Var z = guarded("kl", [&] { return reparameterize(enc.mu, enc.logvar, eps); });
  Decoded dec = [&] {
    try {
      return decode_additive(tape, model, xv, z, targets);
    } catch (const NumericError& e) {
      throw NumericError(std::string("cvae diverged in decoder: ") + e.what());
    }
  }();
  out.reconstruction = guarded("reconstruction", [&] { return loss_reconstruction(dec.relaxed, x, x_ref); });
  out.kl = guarded("kl", [&] { return loss_kl(enc.mu, enc.logvar); });
  out.sparsity = guarded("sparsity", [&] { return loss_sparsity(dec.relaxed, x); });
  out.classification = guarded("classification", [&] { return loss_classification(dec.relaxed, proxy_labels, proxy); });
  out.total = guarded("total", [&] {
    Var t = nn::scale(out.reconstruction, cfg.lambda_r);
    t = nn::add(t, nn::scale(out.kl, cfg.beta));
    t = nn::add(t, nn::scale(out.sparsity, cfg.lambda_s));
    return nn::add(t, nn::scale(out.classification, cfg.lambda_c));
  });
  return out;
}

Matrix cvae_scores(CvaeModel& model, const Matrix& x, std::span<const ClassId> targets) {
  if (static_cast<std::size_t>(x.rows()) != targets.size()) throw ShapeError("cvae_scores: target count mismatch");
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index start = 0; start < x.rows(); start += kScoreChunk) {
    const Eigen::Index len = std::min<Eigen::Index>(kScoreChunk, x.rows() - start);
    Tape tape(false);
    Var xv = tape.constant(x.middleRows(start, len));
    auto t = targets.subspan(static_cast<std::size_t>(start), static_cast<std::size_t>(len));
    Encoded enc = encode(tape, model, xv, t);
    out.middleRows(start, len) = decode_additive(tape, model, xv, enc.mu, t).scores.value();
  }
  return out;
}

CvaeTrainResult train_cvae(const CvaeTrainingSet& data, ProxyModel& proxy, const CvaeConfig& cfg,
                           const CvaeObjective& early_stop) {
  if (data.malware == nullptr || data.references == nullptr || !data.proxy_column) {
    throw ConfigError("train_cvae: incomplete training set");
  }
  const Matrix& xm = *data.malware;
  if (xm.rows() == 0 || static_cast<std::size_t>(xm.rows()) != data.targets.size()) {
    throw DataError("train_cvae: empty malware set or target count mismatch");
  }
  if (!proxy.frozen()) throw ConfigError("train_cvae: proxy must be frozen");
  const int target_classes = kMalwareClass - 1;
  std::vector<std::vector<int>> pool(static_cast<std::size_t>(target_classes + 1));
  for (std::size_t i = 0; i < data.reference_labels.size(); ++i) {
    const ClassId c = data.reference_labels[i];
    if (c >= 1 && c <= target_classes) pool[static_cast<std::size_t>(c)].push_back(static_cast<int>(i));
  }
  for (ClassId c : data.targets) {
    if (c < 1 || c > target_classes) throw DataError("train_cvae: target class " + std::to_string(c) + " out of range");
    if (pool[static_cast<std::size_t>(c)].empty()) {
      throw DataError("train_cvae: no reference samples for target class " + std::to_string(c));
    }
  }

  Rng init_rng(derive_seed(cfg.seed, "cvae/init"));
  Rng shuffle_rng(derive_seed(cfg.seed, "cvae/shuffle"));
  Rng ref_rng(derive_seed(cfg.seed, "cvae/reference"));
  Rng noise_rng(derive_seed(cfg.seed, "cvae/noise"));
  std::normal_distribution<double> normal(0.0, 1.0);

  CvaeTrainResult result;
  result.model = CvaeModel(xm.cols(), target_classes, cfg, init_rng);
  CvaeModel& model = result.model;
  nn::AdamConfig adam_cfg{cfg.lr, cfg.beta1, cfg.beta2, 1e-8, cfg.clip_norm};
  nn::Adam adam(model.parameters(), adam_cfg);

  CvaeModel best = model;
  double best_obj = -std::numeric_limits<double>::infinity();
  int wait = 0;
  std::vector<int> order(static_cast<std::size_t>(xm.rows()));
  std::iota(order.begin(), order.end(), 0);
  const auto batch = static_cast<std::size_t>(std::max(1, cfg.batch_size));

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t len = std::min(order.size() - start, batch);
      std::span<const int> idx(order.data() + start, len);
      const Matrix xb = gather(xm, idx);
      Matrix ref(static_cast<Eigen::Index>(len), xm.cols());
      std::vector<ClassId> tb(len);
      std::vector<int> yb(len);
      for (std::size_t i = 0; i < len; ++i) {
        tb[i] = data.targets[static_cast<std::size_t>(idx[i])];
        yb[i] = data.proxy_column(tb[i]);
        const auto& candidates = pool[static_cast<std::size_t>(tb[i])];
        std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
        ref.row(static_cast<Eigen::Index>(i)) = data.references->row(candidates[pick(ref_rng)]);
      }
      Matrix eps(static_cast<Eigen::Index>(len), model.latent_dim());
      for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = normal(noise_rng);
      Tape tape;
      CvaeLosses losses = cvae_losses(tape, model, proxy, xb, ref, tb, yb, &eps, cfg);
      adam.zero_grad();
      tape.backward(losses.total);
      if (!std::isfinite(nn::global_grad_norm(model.parameters()))) {
        throw NumericError("cvae diverged: non-finite gradient at epoch " + std::to_string(epoch + 1));
      }
      adam.step();
      loss_sum += losses.total.scalar() * static_cast<double>(len);
    }
    result.epoch_loss.push_back(loss_sum / static_cast<double>(order.size()));
    result.epochs_run = epoch + 1;
    if (!early_stop) continue;
    const ObjectiveReport rep = early_stop(model);
    result.epoch_objective.push_back(rep.value);
    if (rep.value > best_obj) {
      best_obj = rep.value;
      best = model;
      result.best_epoch = epoch + 1;
      result.best_details = rep.details;
      wait = 0;
    } else if (++wait >= cfg.patience) {
      break;
    }
  }
  if (early_stop && result.best_epoch > 0) {
    result.model = std::move(best);
    result.best_objective = best_obj;
  } else {
    result.best_epoch = result.epochs_run;
  }
  return result;
}

CvaeConfig sample_trial_config(const TuneConfig& cfg, int trial) {
  Rng rng(derive_seed(cfg.seed, "trial" + std::to_string(trial) + "/config"));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto log_uniform = [&](double lo, double hi) { return std::exp(std::log(lo) + unit(rng) * (std::log(hi) - std::log(lo))); };
  auto choice = [&](const std::vector<int>& v) {
    std::uniform_int_distribution<std::size_t> pick(0, v.size() - 1);
    return v[pick(rng)];
  };
  const SearchSpace& s = cfg.space;
  CvaeConfig c = cfg.base;
  c.lambda_r = log_uniform(s.lambda_r_min, s.lambda_r_max);
  c.beta = log_uniform(s.beta_min, s.beta_max);
  c.lambda_s = log_uniform(s.lambda_s_min, s.lambda_s_max);
  c.lambda_c = log_uniform(s.lambda_c_min, s.lambda_c_max);
  c.latent_dim = choice(s.latent_dims);
  c.class_embed_dim = choice(s.class_embed_dims);
  c.lr = log_uniform(s.lr_min, s.lr_max);
  c.epochs = std::min(c.epochs, cfg.trial_epochs);
  c.seed = derive_seed(cfg.seed, "trial" + std::to_string(trial) + "/train");
  return c;
}

TuneResult tune_hyperparameters(const CvaeTrainingSet& data, ProxyModel& proxy, const TuneConfig& cfg,
                                const CvaeObjective& early_stop, const CvaeObjective& score) {
  if (cfg.trials < 1) throw ConfigError("tune_hyperparameters: budget must be at least 1 trial");
  if (!score) throw ConfigError("tune_hyperparameters: missing scoring objective");
  TuneResult result;
  result.best_objective = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < cfg.trials; ++i) {
    TrialRecord rec;
    rec.trial = i;
    rec.config = sample_trial_config(cfg, i);
    CvaeTrainResult trained = train_cvae(data, proxy, rec.config, early_stop);
    const ObjectiveReport rep = score(trained.model);
    rec.objective = rep.value;
    rec.details = rep.details;
    rec.epochs_run = trained.epochs_run;
    if (rec.objective > result.best_objective) {
      result.best_objective = rec.objective;
      result.best = rec.config;
      result.best_trial = i;
    }
    result.trials.push_back(std::move(rec));
  }
  return result;
}

std::string trial_to_json_line(const TrialRecord& rec) {
  nlohmann::json j;
  j["trial"] = rec.trial;
  j["config"] = nlohmann::json::parse(cvae_config_to_json(rec.config));
  j["objective"] = rec.objective;
  j["epochs_run"] = rec.epochs_run;
  nlohmann::json metrics = nlohmann::json::object();
  for (const auto& [name, value] : rec.details) metrics[name] = value;
  j["metrics"] = metrics;
  return j.dump() + "\n";
}

void save_cvae(const std::filesystem::path& path, CvaeModel& model) {
  auto tensors = model.tensors();
  Matrix meta(1, 1);
  meta(0, 0) = model.leaky_slope;
  tensors.push_back({"meta", &meta});
  nn::save_tensors(path, "cvae", tensors);
}

CvaeModel load_cvae(const std::filesystem::path& path) {
  const auto header = nn::read_container_header(path);
  if (header.module != "cvae") throw DataError("not a cvae container: " + path.string());
  CvaeConfig cfg;
  Eigen::Index n = 0;
  int classes = 0;
  for (const auto& t : header.tensors) {
    if (t.name == "class_embed") {
      classes = static_cast<int>(t.rows);
      cfg.class_embed_dim = static_cast<int>(t.cols);
    } else if (t.name == "enc1.weight") {
      cfg.enc_hidden1 = static_cast<int>(t.cols);
    } else if (t.name == "enc2.weight") {
      cfg.enc_hidden2 = static_cast<int>(t.cols);
    } else if (t.name == "enc3.weight") {
      cfg.latent_dim = static_cast<int>(t.cols / 2);
    } else if (t.name == "dec1.weight") {
      cfg.dec_hidden1 = static_cast<int>(t.cols);
    } else if (t.name == "dec2.weight") {
      cfg.dec_hidden2 = static_cast<int>(t.cols);
    } else if (t.name == "dec3.weight") {
      cfg.dec_hidden3 = static_cast<int>(t.cols);
    } else if (t.name == "dec4.weight") {
      n = static_cast<Eigen::Index>(t.cols);
    }
  }
  Rng rng(0);
  CvaeModel model(n, classes, cfg, rng);
  auto tensors = model.tensors();
  Matrix meta;
  tensors.push_back({"meta", &meta});
  nn::load_tensors(path, "cvae", tensors);
  model.leaky_slope = meta(0, 0);
  return model;
}

}  // namespace impinj
