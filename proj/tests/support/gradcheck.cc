#include "gradcheck.h"

#include <algorithm>

namespace impinj::testing {

double relative_error(const Matrix& analytic, const Matrix& numeric, double floor) {
  const double a = analytic.norm();
  const double n = numeric.norm();
  const double denom = std::max(a, n);
  if (denom < floor) return 0.0;
  return (analytic - numeric).norm() / denom;
}

double check_leaf_gradients(const LeafLoss& f, const std::vector<Matrix>& inputs, double h) {
  std::vector<Matrix> grads;
  {
    nn::Tape tape;
    std::vector<nn::Var> leaves;
    for (const auto& m : inputs) leaves.push_back(tape.leaf(m));
    tape.backward(f(tape, leaves));
    for (std::size_t i = 0; i < leaves.size(); ++i) {
      const Matrix& g = tape.grad(leaves[i]);
      grads.push_back(g.size() == 0 ? Matrix::Zero(inputs[i].rows(), inputs[i].cols()) : g);
    }
  }
  auto eval = [&](const std::vector<Matrix>& xs) {
    nn::Tape tape(false);
    std::vector<nn::Var> leaves;
    for (const auto& m : xs) leaves.push_back(tape.leaf(m));
    return f(tape, leaves).scalar();
  };
  double worst = 0.0;
  std::vector<Matrix> xs = inputs;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    Matrix numeric = Matrix::Zero(xs[i].rows(), xs[i].cols());
    for (Eigen::Index r = 0; r < xs[i].rows(); ++r) {
      for (Eigen::Index c = 0; c < xs[i].cols(); ++c) {
        const double keep = xs[i](r, c);
        xs[i](r, c) = keep + h;
        const double up = eval(xs);
        xs[i](r, c) = keep - h;
        const double down = eval(xs);
        xs[i](r, c) = keep;
        numeric(r, c) = (up - down) / (2 * h);
      }
    }
    worst = std::max(worst, relative_error(grads[i], numeric));
  }
  return worst;
}

double check_param_gradients(const ParamLoss& f, const std::vector<nn::Parameter*>& params, double h) {
  for (auto* p : params) p->zero_grad();
  {
    nn::Tape tape;
    tape.backward(f(tape));
  }
  auto eval = [&] {
    nn::Tape tape(false);
    return f(tape).scalar();
  };
  double worst = 0.0;
  for (auto* p : params) {
    const Matrix analytic = p->grad;
    Matrix numeric = Matrix::Zero(p->value.rows(), p->value.cols());
    for (Eigen::Index r = 0; r < p->value.rows(); ++r) {
      for (Eigen::Index c = 0; c < p->value.cols(); ++c) {
        const double keep = p->value(r, c);
        p->value(r, c) = keep + h;
        const double up = eval();
        p->value(r, c) = keep - h;
        const double down = eval();
        p->value(r, c) = keep;
        numeric(r, c) = (up - down) / (2 * h);
      }
    }
    worst = std::max(worst, relative_error(analytic, numeric));
  }
  return worst;
}

}  // namespace impinj::testing
