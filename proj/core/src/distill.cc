#include "impinj/distill.h"

#include <cmath>
#include <numeric>

#include "impinj/data.h"
#include "impinj/optim.h"
#include "impinj/param_io.h"

namespace impinj {

using nn::Mode;
using nn::Tape;
using nn::Var;

Matrix soften_teacher(const Matrix& q, double temperature, long* floored) {
  if (temperature <= 0.0) throw ConfigError("soften_teacher: temperature must be positive");
  Matrix out(q.rows(), q.cols());
  long count = 0;
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    for (Eigen::Index c = 0; c < q.cols(); ++c) {
      double v = q(i, c);
      if (v < kProbabilityFloor) {
        v = kProbabilityFloor;
        ++count;
      }
      out(i, c) = std::pow(v, 1.0 / temperature);
    }
    out.row(i) /= out.row(i).sum();
  }
  if (floored != nullptr) *floored = count;
  return out;
}

Matrix soften_student(const Matrix& logits, double temperature) {
  if (temperature <= 0.0) throw ConfigError("soften_student: temperature must be positive");
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const RowVector z = logits.row(i) / temperature;
    const RowVector e = (z.array() - z.maxCoeff()).exp();
    out.row(i) = e / e.sum();
  }
  return out;
}

Var distill_loss(Var logits, const Matrix& teacher_q, std::span<const int> labels, const DistillConfig& cfg) {
  if (cfg.alpha < 0.0 || cfg.alpha > 1.0) throw ConfigError("distill_loss: alpha must lie in [0, 1]");
  if (teacher_q.rows() != logits.rows() || teacher_q.cols() != logits.cols()) {
    throw ShapeError("distill_loss: teacher shape mismatch");
  }
  Tape& tape = *logits.tape;
  const double t = cfg.temperature;
  const double n = static_cast<double>(logits.rows());
  const Matrix q_soft = soften_teacher(teacher_q, t);
  const double entropy_term = (q_soft.array() * q_soft.array().log()).sum() / n;
  Var logp = nn::log_softmax_rows(nn::scale(logits, 1.0 / t));
  Var cross = nn::scale(nn::sum(nn::mul(tape.constant(q_soft), logp)), -1.0 / n);
  Var kl = nn::add_scalar(cross, entropy_term);
  Var soft = nn::scale(kl, cfg.alpha * t * t);
  if (cfg.alpha == 1.0) return soft;
  return nn::add(soft, nn::scale(nn::cross_entropy(logits, labels), 1.0 - cfg.alpha));
}

ProxyModel::ProxyModel(Eigen::Index input_dim, int class_count, const DistillConfig& cfg, Rng& rng)
    : fc1("fc1", input_dim, cfg.hidden1, nn::Init::kHeUniform, rng),
      bn1("bn1", cfg.hidden1),
      fc2("fc2", cfg.hidden1, cfg.hidden2, nn::Init::kHeUniform, rng),
      bn2("bn2", cfg.hidden2),
      fc3("fc3", cfg.hidden2, cfg.hidden3, nn::Init::kHeUniform, rng),
      bn3("bn3", cfg.hidden3),
      head("head", cfg.hidden3, class_count, nn::Init::kXavierUniform, rng),
      dropout(cfg.dropout) {}

Var ProxyModel::body(Tape& tape, Var first, Mode mode, Rng* rng) {
  const bool train = mode == Mode::kTrain;
  Var h = nn::dropout(nn::relu(bn1.forward(tape, first, mode)), dropout, train, rng);
  h = nn::dropout(nn::relu(bn2.forward(tape, fc2.forward(tape, h), mode)), dropout, train, rng);
  h = nn::dropout(nn::relu(bn3.forward(tape, fc3.forward(tape, h), mode)), dropout, train, rng);
  return head.forward(tape, h);
}

Var ProxyModel::forward(Tape& tape, Var x, Mode mode, Rng* rng) {
  if (x.cols() != input_dim()) throw ShapeError("proxy: input width mismatch");
  return body(tape, fc1.forward(tape, x), mode, rng);
}

Var ProxyModel::forward(Tape& tape, const SparseMatrix& x, Mode mode, Rng* rng) {
  if (x.cols() != input_dim()) throw ShapeError("proxy: input width mismatch");
  return body(tape, fc1.forward(tape, x), mode, rng);
}

Matrix ProxyModel::logits(const Matrix& x) {
  Tape tape(false);
  if (mostly_zero(x)) {
    const SparseMatrix xs = to_sparse(x);
    return forward(tape, xs, Mode::kEval, nullptr).value();
  }
  return forward(tape, tape.constant(x), Mode::kEval, nullptr).value();
}

void ProxyModel::freeze() { nn::set_trainable(parameters(), false); }

std::vector<nn::Parameter*> ProxyModel::parameters() {
  std::vector<nn::Parameter*> p;
  fc1.collect(p);
  bn1.collect(p);
  fc2.collect(p);
  bn2.collect(p);
  fc3.collect(p);
  bn3.collect(p);
  head.collect(p);
  return p;
}

std::vector<nn::TensorRef> ProxyModel::tensors() {
  std::vector<nn::TensorRef> t;
  fc1.tensors(t);
  bn1.tensors(t);
  fc2.tensors(t);
  bn2.tensors(t);
  fc3.tensors(t);
  bn3.tensors(t);
  head.tensors(t);
  return t;
}

ProxyTrainResult train_proxy(const Matrix& x, const Matrix& teacher_q, std::span<const int> labels,
                             const DistillConfig& cfg) {
  if (x.rows() == 0 || teacher_q.rows() != x.rows() || static_cast<std::size_t>(x.rows()) != labels.size()) {
    throw DataError("train_proxy: empty input or row count mismatch");
  }
  Rng init_rng(derive_seed(cfg.seed, "proxy/init"));
  Rng shuffle_rng(derive_seed(cfg.seed, "proxy/shuffle"));
  Rng dropout_rng(derive_seed(cfg.seed, "proxy/dropout"));
  ProxyTrainResult result;
  result.model = ProxyModel(x.cols(), static_cast<int>(teacher_q.cols()), cfg, init_rng);
  ProxyModel& model = result.model;
  soften_teacher(teacher_q, cfg.temperature, &result.floored);

  nn::AdamConfig adam_cfg;
  adam_cfg.lr = cfg.lr;
  nn::Adam adam(model.parameters(), adam_cfg);
  const bool sparse = mostly_zero(x);
  std::vector<int> order(static_cast<std::size_t>(x.rows()));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    long seen = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t len = std::min(order.size() - start, static_cast<std::size_t>(cfg.batch_size));
      if (len < 2) continue;
      std::span<const int> idx(order.data() + start, len);
      const Matrix xb = gather(x, idx);
      const Matrix qb = gather(teacher_q, idx);
      std::vector<int> yb(len);
      for (std::size_t i = 0; i < len; ++i) yb[i] = labels[static_cast<std::size_t>(idx[i])];
      Tape tape;
      const SparseMatrix xs = sparse ? to_sparse(xb) : SparseMatrix();
      Var z = sparse ? model.forward(tape, xs, Mode::kTrain, &dropout_rng)
                     : model.forward(tape, tape.constant(xb), Mode::kTrain, &dropout_rng);
      Var loss = distill_loss(z, qb, yb, cfg);
      adam.zero_grad();
      tape.backward(loss);
      adam.step();
      loss_sum += loss.scalar() * static_cast<double>(len);
      seen += static_cast<long>(len);
    }
    result.epoch_loss.push_back(seen > 0 ? loss_sum / static_cast<double>(seen) : 0.0);
  }
  model.freeze();
  return result;
}

void save_proxy(const std::filesystem::path& path, ProxyModel& model) {
  auto tensors = model.tensors();
  Matrix meta(1, 1);
  meta(0, 0) = model.dropout;
  tensors.push_back({"meta", &meta});
  nn::save_tensors(path, "proxy", tensors);
}

ProxyModel load_proxy(const std::filesystem::path& path) {
  const auto header = nn::read_container_header(path);
  if (header.module != "proxy") throw DataError("not a proxy container: " + path.string());
  DistillConfig cfg;
  Eigen::Index input = 0;
  int classes = 0;
  for (const auto& t : header.tensors) {
    if (t.name == "fc1.weight") {
      input = static_cast<Eigen::Index>(t.rows);
      cfg.hidden1 = static_cast<int>(t.cols);
    } else if (t.name == "fc2.weight") {
      cfg.hidden2 = static_cast<int>(t.cols);
    } else if (t.name == "fc3.weight") {
      cfg.hidden3 = static_cast<int>(t.cols);
    } else if (t.name == "head.weight") {
      classes = static_cast<int>(t.cols);
    }
  }
  Rng rng(0);
  ProxyModel model(input, classes, cfg, rng);
  auto tensors = model.tensors();
  Matrix meta;
  tensors.push_back({"meta", &meta});
  nn::load_tensors(path, "proxy", tensors);
  model.dropout = meta(0, 0);
  model.freeze();
  return model;
}

}  // namespace impinj
