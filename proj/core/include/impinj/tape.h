#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "impinj/common.h"

namespace impinj::nn {

// A named trainable tensor. Gradients accumulate into `grad` during
// Tape::backward unless the parameter is frozen.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)) {}

  void zero_grad() {
    if (grad.rows() != value.rows() || grad.cols() != value.cols()) {
      grad = Matrix::Zero(value.rows(), value.cols());
    } else {
      grad.setZero();
    }
  }
};

class Tape;

// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
};

// Records primitive ops in execution order; backward replays them in exact
// reverse order. One tape per training step, confined to one thread.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Matrix& out_grad)>;

  // A tape built with grad_enabled = false records values only (inference).
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  // Leaf that tracks its own gradient; read it with grad() after backward.
  Var leaf(Matrix value);
  Var param(Parameter& p);

  const Matrix& value(Var v) const;
  // Gradient of a leaf or intermediate. Empty matrix when nothing flowed.
  const Matrix& grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  // Seeds d(loss)/d(loss) = 1 on a 1x1 value and propagates.
  void backward(Var loss);

  // Adds `g` to the gradient slot of `v` (no-op for constants).
  void accumulate(Var v, const Matrix& g);

  Var record(const char* op, Matrix value, std::initializer_list<Var> inputs,
             BackwardFn backward);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Parameter* param = nullptr;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
};

// ---- primitives ----------------------------------------------------------

Var matmul(Var a, Var b);
// Constant sparse left operand (binary feature batches). `x` must outlive
// the backward pass.
Var sparse_matmul(const SparseMatrix& x, Var w);
Var transpose(Var a);
Var add_bias(Var x, Var bias);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var add_scalar(Var a, double c);
Var pow(Var a, double exponent);
Var log(Var a);
Var exp(Var a);
Var relu(Var a);
Var leaky_relu(Var a, double slope);
Var sigmoid(Var a);
Var softmax_rows(Var a);
Var log_softmax_rows(Var a);
Var concat_cols(std::initializer_list<Var> parts);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
Var gather_rows(Var table, std::span<const int> rows);
Var sum(Var a);
Var mean(Var a);
// Per-row sums as a column vector.
Var row_sum(Var a);
Var l2_normalize_rows(Var a, double eps = 1e-12);

struct BatchNormStats {
  Matrix running_mean;
  Matrix running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};
// Training mode normalizes with batch statistics and updates `stats`;
// evaluation mode uses the running statistics.
Var batchnorm(Var x, Var gamma, Var beta, BatchNormStats& stats, bool training);

// Inverted dropout. Evaluation mode is the identity and consumes no RNG.
Var dropout(Var x, double rate, bool training, Rng* rng);

// Forward: 1 where x >= threshold, else 0. Backward: identity.
Var straight_through_binarize(Var x, double threshold = 0.5);

// Mean softmax cross-entropy over rows; labels are column indices.
Var cross_entropy(Var logits, std::span<const int> labels);

// Mean over rows of the binary cross-entropy restricted to mask==1 entries,
// each row normalized by its own mask count. Rows with an empty mask add 0.
Var masked_bce(Var pred, const Matrix& target, const Matrix& mask, double clamp = 1e-12);

}  // namespace impinj::nn
