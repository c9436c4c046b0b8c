#include "impinj/logistic.h"

#include <cmath>

#include "impinj/data.h"
#include "impinj/optim.h"
#include "impinj/param_io.h"
#include "impinj/tape.h"

namespace impinj {

namespace {

Matrix softmax(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    p.row(r) = (logits.row(r).array() - m).exp();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

}  // namespace

LinearModel train_logistic(const Matrix& x, std::span<const int> y, int class_count, const LogisticConfig& cfg) {
  if (x.rows() == 0 || static_cast<std::size_t>(x.rows()) != y.size()) {
    throw DataError("train_logistic: empty input or label count mismatch");
  }
  for (int label : y) {
    if (label < 0 || label >= class_count) throw DataError("train_logistic: label out of range");
  }
  nn::Parameter weight("weight", Matrix::Zero(class_count, x.cols()));
  nn::Parameter bias("bias", Matrix::Zero(1, class_count));
  nn::AdamConfig adam_cfg;
  adam_cfg.lr = cfg.lr;
  nn::Adam adam({&weight, &bias}, adam_cfg);

  const bool sparse = mostly_zero(x);
  const SparseMatrix xs = sparse ? to_sparse(x) : SparseMatrix();

  double prev = std::numeric_limits<double>::infinity();
  LinearModel model;
  model.l2 = cfg.l2;
  for (int it = 0; it < cfg.max_iters; ++it) {
    nn::Tape tape;
    nn::Var w = tape.param(weight);
    nn::Var wt = nn::transpose(w);
    nn::Var z = sparse ? nn::sparse_matmul(xs, wt) : nn::matmul(tape.constant(x), wt);
    z = nn::add_bias(z, tape.param(bias));
    nn::Var loss = nn::cross_entropy(z, y);
    if (cfg.l2 > 0.0) loss = nn::add(loss, nn::scale(nn::sum(nn::pow(w, 2.0)), 0.5 * cfg.l2));
    const double value = loss.scalar();
    adam.zero_grad();
    tape.backward(loss);
    adam.step();
    model.iterations = it + 1;
    if (std::abs(prev - value) < cfg.tol) break;
    prev = value;
  }
  model.weight = std::move(weight.value);
  model.bias = std::move(bias.value);
  model.final_loss = logistic_objective(model, x, y);
  return model;
}

Matrix predict_logits(const LinearModel& model, const Matrix& x) {
  if (x.cols() != model.feature_count()) throw ShapeError("logistic predict: feature width mismatch");
  Matrix z = x * model.weight.transpose();
  z.rowwise() += model.bias.row(0);
  return z;
}

Matrix predict_proba(const LinearModel& model, const Matrix& x) { return softmax(predict_logits(model, x)); }

double logistic_objective(const LinearModel& model, const Matrix& x, std::span<const int> y) {
  const Matrix p = predict_proba(model, x);
  double ce = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) ce -= std::log(std::max(p(static_cast<Eigen::Index>(i), y[i]), 1e-300));
  ce /= static_cast<double>(y.size());
  return ce + 0.5 * model.l2 * model.weight.squaredNorm();
}

void save_linear(const std::filesystem::path& path, const LinearModel& model) {
  LinearModel copy = model;
  Matrix meta(1, 2);
  meta << model.l2, static_cast<double>(model.iterations);
  nn::save_tensors(path, "logistic", {{"weight", &copy.weight}, {"bias", &copy.bias}, {"meta", &meta}});
}

LinearModel load_linear(const std::filesystem::path& path) {
  LinearModel m;
  Matrix meta;
  nn::load_tensors(path, "logistic", {{"weight", &m.weight}, {"bias", &m.bias}, {"meta", &meta}});
  m.l2 = meta(0, 0);
  m.iterations = static_cast<int>(meta(0, 1));
  return m;
}

}  // namespace impinj
