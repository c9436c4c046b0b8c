#include "impinj/encoder.h"

#include <charconv>
#include <cmath>
#include <numeric>

#include "impinj/data.h"
#include "impinj/metrics.h"
#include "impinj/optim.h"
#include "impinj/param_io.h"

namespace impinj {

using nn::Mode;
using nn::Tape;
using nn::Var;

namespace {

constexpr double kCosClamp = 1.0 - 1e-7;
constexpr int kEmbedChunk = 512;

}  // namespace

EncoderModel::EncoderModel(Eigen::Index input_dim, const EncoderConfig& cfg, Rng& rng)
    : fc1("fc1", input_dim, cfg.hidden1, nn::Init::kHeUniform, rng),
      bn1("bn1", cfg.hidden1),
      fc2("fc2", cfg.hidden1, cfg.hidden2, nn::Init::kHeUniform, rng),
      bn2("bn2", cfg.hidden2),
      res1("res1", cfg.hidden2, cfg.hidden2, nn::Init::kHeUniform, rng),
      res_bn1("res_bn1", cfg.hidden2),
      res2("res2", cfg.hidden2, cfg.hidden2, nn::Init::kHeUniform, rng),
      res_bn2("res_bn2", cfg.hidden2),
      out("out", cfg.hidden2, cfg.embedding_dim, nn::Init::kXavierUniform, rng),
      dropout(cfg.dropout) {}

Var EncoderModel::trunk(Tape& tape, Var first, Mode mode, Rng* rng) {
  const bool train = mode == Mode::kTrain;
  Var h = nn::dropout(nn::relu(bn1.forward(tape, first, mode)), dropout, train, rng);
  h = nn::dropout(nn::relu(bn2.forward(tape, fc2.forward(tape, h), mode)), dropout, train, rng);
  Var r = nn::dropout(nn::relu(res_bn1.forward(tape, res1.forward(tape, h), mode)), dropout, train, rng);
  r = res_bn2.forward(tape, res2.forward(tape, r), mode);
  h = nn::relu(nn::add(r, h));
  return nn::l2_normalize_rows(out.forward(tape, h));
}

Var EncoderModel::forward(Tape& tape, Var x, Mode mode, Rng* rng) {
  if (x.cols() != input_dim()) throw ShapeError("encoder: input width mismatch");
  return trunk(tape, fc1.forward(tape, x), mode, rng);
}

Var EncoderModel::forward(Tape& tape, const SparseMatrix& x, Mode mode, Rng* rng) {
  if (x.cols() != input_dim()) throw ShapeError("encoder: input width mismatch");
  return trunk(tape, fc1.forward(tape, x), mode, rng);
}

std::vector<nn::Parameter*> EncoderModel::parameters() {
  std::vector<nn::Parameter*> p;
  fc1.collect(p);
  bn1.collect(p);
  fc2.collect(p);
  bn2.collect(p);
  res1.collect(p);
  res_bn1.collect(p);
  res2.collect(p);
  res_bn2.collect(p);
  out.collect(p);
  return p;
}

std::vector<nn::TensorRef> EncoderModel::tensors() {
  std::vector<nn::TensorRef> t;
  fc1.tensors(t);
  bn1.tensors(t);
  fc2.tensors(t);
  bn2.tensors(t);
  res1.tensors(t);
  res_bn1.tensors(t);
  res2.tensors(t);
  res_bn2.tensors(t);
  out.tensors(t);
  return t;
}

ArcFaceHead::ArcFaceHead(int class_count, Eigen::Index embedding_dim, double s, double m, Rng& rng)
    : weight("arcface.weight", nn::uniform_matrix(class_count, embedding_dim, 0.05, rng)), scale(s), margin(m) {
  renormalize();
}

void ArcFaceHead::renormalize() {
  for (Eigen::Index r = 0; r < weight.value.rows(); ++r) {
    const double norm = weight.value.row(r).norm();
    if (norm > 0.0) weight.value.row(r) /= norm;
  }
}

Var arcface_logits(Var h, Var centres, std::optional<std::span<const int>> labels, double s, double m) {
  const Matrix& hv = h.value();
  for (Eigen::Index r = 0; r < hv.rows(); ++r) {
    if (std::abs(hv.row(r).norm() - 1.0) > 1e-6) throw Error("arcface_logits: embeddings must be unit-norm");
  }
  Var cosv = nn::matmul(h, nn::transpose(centres));
  const Matrix& c = cosv.value();
  Matrix out = s * c;
  Matrix dcos = Matrix::Constant(c.rows(), c.cols(), s);
  if (labels) {
    if (static_cast<Eigen::Index>(labels->size()) != c.rows()) throw ShapeError("arcface_logits: label count mismatch");
    for (Eigen::Index i = 0; i < c.rows(); ++i) {
      const int y = (*labels)[static_cast<std::size_t>(i)];
      if (y < 0 || y >= c.cols()) throw ShapeError("arcface_logits: label out of range");
      const double raw = c(i, y);
      const double cl = std::clamp(raw, -kCosClamp, kCosClamp);
      const double theta = std::acos(cl);
      out(i, y) = s * std::cos(theta + m);
      dcos(i, y) = raw == cl ? s * std::sin(theta + m) / std::sin(theta) : 0.0;
    }
  }
  Tape& t = *h.tape;
  return t.record("arcface_margin", std::move(out), {cosv}, [cosv, dcos](Tape& tp, const Matrix& g) {
    tp.accumulate(cosv, g.cwiseProduct(dcos));
  });
}

Var arcface_logits(Tape& tape, Var h, ArcFaceHead& head, std::optional<std::span<const int>> labels) {
  Var centres = nn::l2_normalize_rows(tape.param(head.weight));
  return arcface_logits(h, centres, labels, head.scale, head.margin);
}

Var supcon_loss(Var h, std::span<const int> labels, double tau) {
  const Matrix& hv = h.value();
  const Eigen::Index n = hv.rows();
  if (static_cast<Eigen::Index>(labels.size()) != n) throw ShapeError("supcon_loss: label count mismatch");
  const Matrix sim = (hv * hv.transpose()) / tau;
  Matrix gsim = Matrix::Zero(n, n);
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    int positives = 0;
    for (Eigen::Index a = 0; a < n; ++a) {
      if (a != i && labels[static_cast<std::size_t>(a)] == labels[static_cast<std::size_t>(i)]) ++positives;
    }
    if (positives == 0) continue;
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index a = 0; a < n; ++a) {
      if (a != i) mx = std::max(mx, sim(i, a));
    }
    double z = 0.0;
    for (Eigen::Index a = 0; a < n; ++a) {
      if (a != i) z += std::exp(sim(i, a) - mx);
    }
    const double lse = mx + std::log(z);
    double li = 0.0;
    for (Eigen::Index a = 0; a < n; ++a) {
      if (a == i) continue;
      const bool pos = labels[static_cast<std::size_t>(a)] == labels[static_cast<std::size_t>(i)];
      if (pos) li -= (sim(i, a) - lse) / positives;
      gsim(i, a) = std::exp(sim(i, a) - lse) - (pos ? 1.0 / positives : 0.0);
    }
    total += li;
  }
  const double nn_count = static_cast<double>(n);
  Matrix out(1, 1);
  out(0, 0) = n > 0 ? total / nn_count : 0.0;
  Tape& t = *h.tape;
  return t.record("supcon", std::move(out), {h}, [h, gsim, tau, nn_count](Tape& tp, const Matrix& g) {
    const Matrix sym = gsim + gsim.transpose();
    tp.accumulate(h, (sym * tp.value(h)) * (g(0, 0) / (nn_count * tau)));
  });
}

Var encoder_loss(Tape& tape, EncoderModel& enc, ArcFaceHead& head, Var x, std::span<const int> labels,
                 const EncoderConfig& cfg, Mode mode, Rng* rng) {
  Var h = enc.forward(tape, x, mode, rng);
  Var ce = nn::cross_entropy(arcface_logits(tape, h, head, labels), labels);
  return nn::add(ce, nn::scale(supcon_loss(h, labels, cfg.temperature), cfg.supcon_weight));
}

Matrix embed(EncoderModel& model, const Matrix& x) {
  if (x.cols() != model.input_dim()) throw ShapeError("embed: input width mismatch");
  Matrix out(x.rows(), model.embedding_dim());
  const bool sparse = mostly_zero(x);
  for (Eigen::Index start = 0; start < x.rows(); start += kEmbedChunk) {
    const Eigen::Index len = std::min<Eigen::Index>(kEmbedChunk, x.rows() - start);
    Tape tape(false);
    const Matrix chunk = x.middleRows(start, len);
    if (sparse) {
      const SparseMatrix xs = to_sparse(chunk);
      out.middleRows(start, len) = model.forward(tape, xs, Mode::kEval, nullptr).value();
    } else {
      out.middleRows(start, len) = model.forward(tape, tape.constant(chunk), Mode::kEval, nullptr).value();
    }
  }
  return out;
}

std::vector<int> nearest_centroid_predict(const Matrix& train, std::span<const int> train_labels, int class_count,
                                          const Matrix& query) {
  if (train.cols() != query.cols()) throw ShapeError("nearest_centroid: width mismatch");
  Matrix centroids = Matrix::Zero(class_count, train.cols());
  std::vector<int> counts(static_cast<std::size_t>(class_count), 0);
  for (std::size_t i = 0; i < train_labels.size(); ++i) {
    centroids.row(train_labels[i]) += train.row(static_cast<Eigen::Index>(i));
    ++counts[static_cast<std::size_t>(train_labels[i])];
  }
  for (int c = 0; c < class_count; ++c) {
    if (counts[static_cast<std::size_t>(c)] > 0) centroids.row(c) /= counts[static_cast<std::size_t>(c)];
  }
  std::vector<int> pred(static_cast<std::size_t>(query.rows()), 0);
  for (Eigen::Index i = 0; i < query.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (int c = 0; c < class_count; ++c) {
      if (counts[static_cast<std::size_t>(c)] == 0) continue;
      const double d = (query.row(i) - centroids.row(c)).squaredNorm();
      if (d < best) {
        best = d;
        pred[static_cast<std::size_t>(i)] = c;
      }
    }
  }
  return pred;
}

EncoderTrainResult train_encoder(const Matrix& x_train, std::span<const int> y_train, const Matrix& x_val,
                                 std::span<const int> y_val, int class_count, const EncoderConfig& cfg) {
  if (x_train.rows() == 0 || static_cast<std::size_t>(x_train.rows()) != y_train.size()) {
    throw DataError("train_encoder: empty input or label count mismatch");
  }
  {
    std::vector<int> seen(y_train.begin(), y_train.end());
    std::sort(seen.begin(), seen.end());
    if (std::unique(seen.begin(), seen.end()) - seen.begin() < 2) throw DataError("train_encoder: needs at least 2 classes");
  }
  Rng init_rng(derive_seed(cfg.seed, "encoder/init"));
  Rng shuffle_rng(derive_seed(cfg.seed, "encoder/shuffle"));
  Rng dropout_rng(derive_seed(cfg.seed, "encoder/dropout"));

  EncoderTrainResult result;
  result.model = EncoderModel(x_train.cols(), cfg, init_rng);
  EncoderModel& model = result.model;
  ArcFaceHead head(class_count, cfg.embedding_dim, cfg.arc_scale, cfg.arc_margin, init_rng);
  std::vector<nn::Parameter*> params = model.parameters();
  params.push_back(&head.weight);
  nn::AdamConfig adam_cfg;
  adam_cfg.lr = cfg.lr;
  nn::Adam adam(params, adam_cfg);

  const bool sparse = mostly_zero(x_train);
  const bool validate = x_val.rows() > 0;
  EncoderModel best = model;
  double best_f1 = -1.0;
  int wait = 0;
  std::vector<int> order(static_cast<std::size_t>(x_train.rows()));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    long seen = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t len = std::min(order.size() - start, static_cast<std::size_t>(cfg.batch_size));
      if (len < 2) continue;
      std::span<const int> idx(order.data() + start, len);
      const Matrix xb = gather(x_train, idx);
      std::vector<int> yb(len);
      for (std::size_t i = 0; i < len; ++i) yb[i] = y_train[static_cast<std::size_t>(idx[i])];
      Tape tape;
      const SparseMatrix xs = sparse ? to_sparse(xb) : SparseMatrix();
      Var h = sparse ? model.forward(tape, xs, Mode::kTrain, &dropout_rng)
                     : model.forward(tape, tape.constant(xb), Mode::kTrain, &dropout_rng);
      Var ce = nn::cross_entropy(arcface_logits(tape, h, head, std::span<const int>(yb)), yb);
      Var loss = nn::add(ce, nn::scale(supcon_loss(h, yb, cfg.temperature), cfg.supcon_weight));
      adam.zero_grad();
      tape.backward(loss);
      adam.step();
      head.renormalize();
      loss_sum += loss.scalar() * static_cast<double>(len);
      seen += static_cast<long>(len);
    }
    result.epoch_loss.push_back(seen > 0 ? loss_sum / static_cast<double>(seen) : 0.0);
    result.epochs_run = epoch + 1;
    if (!validate) continue;
    const Matrix emb_train = embed(model, x_train);
    const Matrix emb_val = embed(model, x_val);
    const auto pred = nearest_centroid_predict(emb_train, y_train, class_count, emb_val);
    const double f1 = macro_f1(pred, y_val, class_count);
    if (f1 > best_f1) {
      best_f1 = f1;
      best = model;
      result.best_epoch = epoch + 1;
      wait = 0;
    } else if (++wait >= cfg.patience) {
      break;
    }
  }
  if (validate) {
    result.model = std::move(best);
    result.best_val_f1 = best_f1;
  } else {
    result.best_epoch = result.epochs_run;
  }
  return result;
}

void save_encoder(const std::filesystem::path& path, EncoderModel& model) {
  auto tensors = model.tensors();
  Matrix meta(1, 1);
  meta(0, 0) = model.dropout;
  tensors.push_back({"meta", &meta});
  nn::save_tensors(path, "encoder", tensors);
}

EncoderModel load_encoder(const std::filesystem::path& path) {
  const auto header = nn::read_container_header(path);
  if (header.module != "encoder" || header.tensors.size() < 2) throw DataError("not an encoder container: " + path.string());
  EncoderConfig cfg;
  Eigen::Index input = 0;
  for (const auto& t : header.tensors) {
    if (t.name == "fc1.weight") {
      input = static_cast<Eigen::Index>(t.rows);
      cfg.hidden1 = static_cast<int>(t.cols);
    } else if (t.name == "fc2.weight") {
      cfg.hidden2 = static_cast<int>(t.cols);
    } else if (t.name == "out.weight") {
      cfg.embedding_dim = static_cast<int>(t.cols);
    }
  }
  Rng rng(0);
  EncoderModel model(input, cfg, rng);
  auto tensors = model.tensors();
  Matrix meta;
  tensors.push_back({"meta", &meta});
  nn::load_tensors(path, "encoder", tensors);
  model.dropout = meta(0, 0);
  return model;
}

std::string embeddings_to_csv(const Matrix& embeddings, std::span<const int> sample_ids, std::span<const int> labels) {
  std::string out = "sample_id";
  for (Eigen::Index j = 0; j < embeddings.cols(); ++j) out += ",e" + std::to_string(j);
  out += ",label\n";
  char buf[64];
  for (Eigen::Index i = 0; i < embeddings.rows(); ++i) {
    out += std::to_string(sample_ids[static_cast<std::size_t>(i)]);
    for (Eigen::Index j = 0; j < embeddings.cols(); ++j) {
      auto res = std::to_chars(buf, buf + sizeof(buf), embeddings(i, j));
      out += ',';
      out.append(buf, res.ptr);
    }
    out += ',' + std::to_string(labels[static_cast<std::size_t>(i)]) + '\n';
  }
  return out;
}

}  // namespace impinj
