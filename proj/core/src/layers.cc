#include "impinj/layers.h"

#include <cmath>

namespace impinj::nn {

Matrix uniform_matrix(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Linear::Linear(const std::string& name, Eigen::Index in, Eigen::Index out, Init init, Rng& rng) {
  const double bound = init == Init::kHeUniform
                           ? std::sqrt(6.0 / static_cast<double>(in))
                           : std::sqrt(6.0 / static_cast<double>(in + out));
  weight = Parameter(name + ".weight", uniform_matrix(in, out, bound, rng));
  bias = Parameter(name + ".bias", Matrix::Zero(1, out));
}

Var Linear::forward(Tape& tape, Var x) {
  return add_bias(matmul(x, tape.param(weight)), tape.param(bias));
}

Var Linear::forward(Tape& tape, const SparseMatrix& x) {
  return add_bias(sparse_matmul(x, tape.param(weight)), tape.param(bias));
}

void Linear::tensors(std::vector<TensorRef>& out) {
  out.push_back({weight.name, &weight.value});
  out.push_back({bias.name, &bias.value});
}

BatchNorm1d::BatchNorm1d(const std::string& name, Eigen::Index width)
    : gamma(name + ".gamma", Matrix::Ones(1, width)),
      beta(name + ".beta", Matrix::Zero(1, width)),
      name_prefix(name) {
  stats.running_mean = Matrix::Zero(1, width);
  stats.running_var = Matrix::Ones(1, width);
}

Var BatchNorm1d::forward(Tape& tape, Var x, Mode mode) {
  return batchnorm(x, tape.param(gamma), tape.param(beta), stats, mode == Mode::kTrain);
}

void BatchNorm1d::tensors(std::vector<TensorRef>& out) {
  out.push_back({gamma.name, &gamma.value});
  out.push_back({beta.name, &beta.value});
  out.push_back({name_prefix + ".running_mean", &stats.running_mean});
  out.push_back({name_prefix + ".running_var", &stats.running_var});
}

void set_trainable(std::vector<Parameter*> params, bool trainable) {
  for (Parameter* p : params) {
    p->trainable = trainable;
    if (!trainable) p->grad.resize(0, 0);
  }
}

}  // namespace impinj::nn
