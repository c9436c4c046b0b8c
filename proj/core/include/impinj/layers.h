#pragma once

#include <string>
#include <vector>

#include "impinj/tape.h"

namespace impinj::nn {

enum class Mode { kTrain, kEval };

enum class Init { kHeUniform, kXavierUniform };

// Serializable tensor slot: trainable parameters and non-trainable buffers
// (batchnorm running statistics) alike.
struct TensorRef {
  std::string name;
  Matrix* tensor;
};

// Fully connected layer computing x * W + b with W stored (in x out).
struct Linear {
  Parameter weight;
  Parameter bias;

  Linear() = default;
  Linear(const std::string& name, Eigen::Index in, Eigen::Index out, Init init, Rng& rng);

  Eigen::Index in_features() const { return weight.value.rows(); }
  Eigen::Index out_features() const { return weight.value.cols(); }

  Var forward(Tape& tape, Var x);
  Var forward(Tape& tape, const SparseMatrix& x);

  void collect(std::vector<Parameter*>& out) { out.push_back(&weight); out.push_back(&bias); }
  void tensors(std::vector<TensorRef>& out);
};

struct BatchNorm1d {
  Parameter gamma;
  Parameter beta;
  BatchNormStats stats;

  BatchNorm1d() = default;
  BatchNorm1d(const std::string& name, Eigen::Index width);

  Var forward(Tape& tape, Var x, Mode mode);

  void collect(std::vector<Parameter*>& out) { out.push_back(&gamma); out.push_back(&beta); }
  void tensors(std::vector<TensorRef>& out);
  std::string name_prefix;
};

Matrix uniform_matrix(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng);

void set_trainable(std::vector<Parameter*> params, bool trainable);

}  // namespace impinj::nn
