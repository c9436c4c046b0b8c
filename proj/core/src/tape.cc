#include "impinj/tape.h"

#include <algorithm>
#include <cmath>

namespace impinj::nn {

namespace {

void require_same_shape(const char* op, const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

Tape& tape_of(Var v) {
  if (v.tape == nullptr) throw Error("Var is not attached to a tape");
  return *v.tape;
}

Tape& tape_of(Var a, Var b) {
  if (a.tape != b.tape) throw Error("Vars belong to different tapes");
  return tape_of(a);
}

}  // namespace

const Matrix& Var::value() const { return tape_of(*this).value(*this); }

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr, false, {}});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::leaf(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr, grad_enabled_, {}});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::param(Parameter& p) {
  nodes_.push_back(Node{{}, {}, &p, p.trainable && grad_enabled_, {}});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

const Matrix& Tape::value(Var v) const {
  const Node& n = nodes_.at(static_cast<std::size_t>(v.id));
  return n.param != nullptr ? n.param->value : n.value;
}

const Matrix& Tape::grad(Var v) const {
  const Node& n = nodes_.at(static_cast<std::size_t>(v.id));
  return n.param != nullptr ? n.param->grad : n.grad;
}

void Tape::accumulate(Var v, const Matrix& g) {
  Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (!n.requires_grad) return;
  Matrix& slot = n.param != nullptr ? n.param->grad : n.grad;
  const Matrix& val = n.param != nullptr ? n.param->value : n.value;
  if (slot.rows() != val.rows() || slot.cols() != val.cols()) {
    slot = g;
  } else {
    slot += g;
  }
}

Var Tape::record(const char* op, Matrix value, std::initializer_list<Var> inputs,
                 BackwardFn backward) {
  if (!value.allFinite()) {
    throw NumericError(std::string(op) + ": non-finite output");
  }
  bool needs = false;
  for (Var in : inputs) needs = needs || nodes_[static_cast<std::size_t>(in.id)].requires_grad;
  nodes_.push_back(Node{std::move(value), {}, nullptr, needs, needs ? std::move(backward) : BackwardFn{}});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::backward(Var loss) {
  Node& root = nodes_.at(static_cast<std::size_t>(loss.id));
  if (value(loss).size() != 1) throw ShapeError("backward: loss must be 1x1");
  if (!root.requires_grad) return;
  if (root.param != nullptr) {
    accumulate(loss, Matrix::Ones(1, 1));
    return;
  }
  root.grad = Matrix::Ones(1, 1);
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.backward || n.grad.size() == 0) continue;
    n.backward(*this, n.grad);
  }
}

// ---- primitives ----------------------------------------------------------

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows()) throw ShapeError("matmul: inner dimensions differ");
  Matrix out = av * bv;
  return t.record("matmul", std::move(out), {a, b}, [a, b](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(a)) tp.accumulate(a, g * tp.value(b).transpose());
    if (tp.requires_grad(b)) tp.accumulate(b, tp.value(a).transpose() * g);
  });
}

Var sparse_matmul(const SparseMatrix& x, Var w) {
  Tape& t = tape_of(w);
  if (x.cols() != w.rows()) throw ShapeError("sparse_matmul: inner dimensions differ");
  Matrix out = x * w.value();
  const SparseMatrix* xp = &x;
  return t.record("sparse_matmul", std::move(out), {w}, [xp, w](Tape& tp, const Matrix& g) {
    Matrix gw = xp->transpose() * g;
    tp.accumulate(w, gw);
  });
}

Var transpose(Var a) {
  Tape& t = tape_of(a);
  Matrix out = a.value().transpose();
  return t.record("transpose", std::move(out), {a}, [a](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g.transpose());
  });
}

Var add_bias(Var x, Var bias) {
  Tape& t = tape_of(x, bias);
  const Matrix& xv = x.value();
  const Matrix& bv = bias.value();
  if (bv.rows() != 1 || bv.cols() != xv.cols()) throw ShapeError("add_bias: bias must be 1 x cols");
  Matrix out = xv.rowwise() + bv.row(0);
  return t.record("add_bias", std::move(out), {x, bias}, [x, bias](Tape& tp, const Matrix& g) {
    tp.accumulate(x, g);
    if (tp.requires_grad(bias)) tp.accumulate(bias, g.colwise().sum());
  });
}

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape("add", a.value(), b.value());
  Matrix out = a.value() + b.value();
  return t.record("add", std::move(out), {a, b}, [a, b](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape("sub", a.value(), b.value());
  Matrix out = a.value() - b.value();
  return t.record("sub", std::move(out), {a, b}, [a, b](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    if (tp.requires_grad(b)) tp.accumulate(b, -g);
  });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape("mul", a.value(), b.value());
  Matrix out = a.value().cwiseProduct(b.value());
  return t.record("mul", std::move(out), {a, b}, [a, b](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(a)) tp.accumulate(a, g.cwiseProduct(tp.value(b)));
    if (tp.requires_grad(b)) tp.accumulate(b, g.cwiseProduct(tp.value(a)));
  });
}

Var scale(Var a, double factor) {
  Tape& t = tape_of(a);
  Matrix out = a.value() * factor;
  return t.record("scale", std::move(out), {a}, [a, factor](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g * factor);
  });
}

Var add_scalar(Var a, double c) {
  Tape& t = tape_of(a);
  Matrix out = a.value().array() + c;
  return t.record("add_scalar", std::move(out), {a}, [a](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
  });
}

Var pow(Var a, double exponent) {
  Tape& t = tape_of(a);
  Matrix out = a.value().array().pow(exponent);
  return t.record("pow", std::move(out), {a}, [a, exponent](Tape& tp, const Matrix& g) {
    Matrix d = exponent * tp.value(a).array().pow(exponent - 1.0);
    tp.accumulate(a, g.cwiseProduct(d));
  });
}

Var log(Var a) {
  Tape& t = tape_of(a);
  Matrix out = a.value().array().log();
  return t.record("log", std::move(out), {a}, [a](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g.cwiseQuotient(tp.value(a)));
  });
}

Var exp(Var a) {
  Tape& t = tape_of(a);
  Matrix out = a.value().array().exp();
  Var self{&t, static_cast<int>(t.size())};
  return t.record("exp", std::move(out), {a}, [a, self](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g.cwiseProduct(tp.value(self)));
  });
}

Var relu(Var a) {
  Tape& t = tape_of(a);
  Matrix out = a.value().cwiseMax(0.0);
  return t.record("relu", std::move(out), {a}, [a](Tape& tp, const Matrix& g) {
    Matrix d = (tp.value(a).array() > 0.0).cast<double>();
    tp.accumulate(a, g.cwiseProduct(d));
  });
}

Var leaky_relu(Var a, double slope) {
  Tape& t = tape_of(a);
  const Matrix& av = a.value();
  Matrix out = (av.array() > 0.0).select(av, av * slope);
  return t.record("leaky_relu", std::move(out), {a}, [a, slope](Tape& tp, const Matrix& g) {
    Matrix d = (tp.value(a).array() > 0.0).select(Matrix::Ones(g.rows(), g.cols()),
                                                  Matrix::Constant(g.rows(), g.cols(), slope));
    tp.accumulate(a, g.cwiseProduct(d));
  });
}

Var sigmoid(Var a) {
  Tape& t = tape_of(a);
  Matrix out = a.value().unaryExpr([](double v) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
  Var self{&t, static_cast<int>(t.size())};
  return t.record("sigmoid", std::move(out), {a}, [a, self](Tape& tp, const Matrix& g) {
    const Matrix& s = tp.value(self);
    Matrix d = s.array() * (1.0 - s.array());
    tp.accumulate(a, g.cwiseProduct(d));
  });
}

namespace {

Matrix softmax_of(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

Matrix log_softmax_of(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    const double lse = m + std::log((x.row(r).array() - m).exp().sum());
    out.row(r) = x.row(r).array() - lse;
  }
  return out;
}

}  // namespace

Var softmax_rows(Var a) {
  Tape& t = tape_of(a);
  Matrix out = softmax_of(a.value());
  Var self{&t, static_cast<int>(t.size())};
  return t.record("softmax_rows", std::move(out), {a}, [a, self](Tape& tp, const Matrix& g) {
    const Matrix& s = tp.value(self);
    Matrix dot = g.cwiseProduct(s).rowwise().sum();
    Matrix d = s.array() * (g.colwise() - dot.col(0)).array();
    tp.accumulate(a, d);
  });
}

Var log_softmax_rows(Var a) {
  Tape& t = tape_of(a);
  Matrix out = log_softmax_of(a.value());
  Var self{&t, static_cast<int>(t.size())};
  return t.record("log_softmax_rows", std::move(out), {a}, [a, self](Tape& tp, const Matrix& g) {
    Matrix s = tp.value(self).array().exp();
    Matrix gsum = g.rowwise().sum();
    Matrix d = g - (s.array().colwise() * gsum.col(0).array()).matrix();
    tp.accumulate(a, d);
  });
}

Var concat_cols(std::initializer_list<Var> parts) {
  if (parts.size() == 0) throw ShapeError("concat_cols: no inputs");
  Tape& t = tape_of(*parts.begin());
  const Eigen::Index rows = parts.begin()->rows();
  Eigen::Index cols = 0;
  for (Var p : parts) {
    if (p.tape != &t) throw Error("Vars belong to different tapes");
    if (p.rows() != rows) throw ShapeError("concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Eigen::Index offset = 0;
  std::vector<Var> inputs(parts);
  for (Var p : inputs) {
    out.middleCols(offset, p.cols()) = p.value();
    offset += p.cols();
  }
  return t.record("concat_cols", std::move(out), parts, [inputs](Tape& tp, const Matrix& g) {
    Eigen::Index off = 0;
    for (Var p : inputs) {
      const Eigen::Index c = tp.value(p).cols();
      if (tp.requires_grad(p)) tp.accumulate(p, g.middleCols(off, c));
      off += c;
    }
  });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  Tape& t = tape_of(a);
  if (start < 0 || count < 0 || start + count > a.cols()) throw ShapeError("slice_cols: out of range");
  Matrix out = a.value().middleCols(start, count);
  return t.record("slice_cols", std::move(out), {a}, [a, start, count](Tape& tp, const Matrix& g) {
    Matrix full = Matrix::Zero(tp.value(a).rows(), tp.value(a).cols());
    full.middleCols(start, count) = g;
    tp.accumulate(a, full);
  });
}

Var gather_rows(Var table, std::span<const int> rows) {
  Tape& t = tape_of(table);
  const Matrix& tv = table.value();
  Matrix out(static_cast<Eigen::Index>(rows.size()), tv.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= tv.rows()) throw ShapeError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = tv.row(rows[i]);
  }
  std::vector<int> idx(rows.begin(), rows.end());
  return t.record("gather_rows", std::move(out), {table}, [table, idx](Tape& tp, const Matrix& g) {
    Matrix full = Matrix::Zero(tp.value(table).rows(), tp.value(table).cols());
    for (std::size_t i = 0; i < idx.size(); ++i) full.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
    tp.accumulate(table, full);
  });
}

Var sum(Var a) {
  Tape& t = tape_of(a);
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return t.record("sum", std::move(out), {a}, [a](Tape& tp, const Matrix& g) {
    const Matrix& av = tp.value(a);
    tp.accumulate(a, Matrix::Constant(av.rows(), av.cols(), g(0, 0)));
  });
}

Var mean(Var a) {
  Tape& t = tape_of(a);
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw ShapeError("mean: empty input");
  Matrix out(1, 1);
  out(0, 0) = a.value().sum() / n;
  return t.record("mean", std::move(out), {a}, [a, n](Tape& tp, const Matrix& g) {
    const Matrix& av = tp.value(a);
    tp.accumulate(a, Matrix::Constant(av.rows(), av.cols(), g(0, 0) / n));
  });
}

Var row_sum(Var a) {
  Tape& t = tape_of(a);
  Matrix out = a.value().rowwise().sum();
  return t.record("row_sum", std::move(out), {a}, [a](Tape& tp, const Matrix& g) {
    const Matrix& av = tp.value(a);
    Matrix full = g.col(0).replicate(1, av.cols());
    tp.accumulate(a, full);
  });
}

Var l2_normalize_rows(Var a, double eps) {
  Tape& t = tape_of(a);
  const Matrix& av = a.value();
  Matrix norms = av.rowwise().norm().cwiseMax(eps);
  Matrix out = av.array().colwise() / norms.col(0).array();
  Var self{&t, static_cast<int>(t.size())};
  return t.record("l2_normalize_rows", std::move(out), {a},
                  [a, self, norms](Tape& tp, const Matrix& g) {
                    const Matrix& y = tp.value(self);
                    Matrix dot = g.cwiseProduct(y).rowwise().sum();
                    Matrix d = (g - (y.array().colwise() * dot.col(0).array()).matrix());
                    d = d.array().colwise() / norms.col(0).array();
                    tp.accumulate(a, d);
                  });
}

Var batchnorm(Var x, Var gamma, Var beta, BatchNormStats& stats, bool training) {
  Tape& t = tape_of(x, gamma);
  const Matrix& xv = x.value();
  const Matrix& gv = gamma.value();
  const Matrix& bv = beta.value();
  const Eigen::Index n = xv.rows();
  const Eigen::Index d = xv.cols();
  if (gv.cols() != d || bv.cols() != d) throw ShapeError("batchnorm: parameter width mismatch");
  if (stats.running_mean.size() == 0) {
    stats.running_mean = Matrix::Zero(1, d);
    stats.running_var = Matrix::Ones(1, d);
  }
  if (!training) {
    Matrix inv_std = (stats.running_var.array() + stats.eps).rsqrt();
    Matrix xhat = (xv.rowwise() - stats.running_mean.row(0)).array().rowwise() * inv_std.row(0).array();
    Matrix out = (xhat.array().rowwise() * gv.row(0).array()).rowwise() + bv.row(0).array();
    return t.record("batchnorm_eval", std::move(out), {x, gamma, beta},
                    [x, gamma, beta, xhat, inv_std](Tape& tp, const Matrix& g) {
                      const Matrix& gv2 = tp.value(gamma);
                      if (tp.requires_grad(x)) {
                        Matrix scalev = gv2.cwiseProduct(inv_std);
                        tp.accumulate(x, (g.array().rowwise() * scalev.row(0).array()).matrix());
                      }
                      if (tp.requires_grad(gamma)) tp.accumulate(gamma, g.cwiseProduct(xhat).colwise().sum());
                      if (tp.requires_grad(beta)) tp.accumulate(beta, g.colwise().sum());
                    });
  }
  if (n < 2) throw ShapeError("batchnorm: training mode needs at least 2 rows");
  Matrix mu = xv.colwise().mean();
  Matrix centered = xv.rowwise() - mu.row(0);
  Matrix var = centered.array().square().colwise().mean();
  Matrix inv_std = (var.array() + stats.eps).rsqrt();
  Matrix xhat = centered.array().rowwise() * inv_std.row(0).array();
  Matrix out = (xhat.array().rowwise() * gv.row(0).array()).rowwise() + bv.row(0).array();

  const double m = stats.momentum;
  const double unbiased = static_cast<double>(n) / static_cast<double>(n - 1);
  stats.running_mean = (1.0 - m) * stats.running_mean + m * mu;
  stats.running_var = (1.0 - m) * stats.running_var + (m * unbiased) * var;

  return t.record("batchnorm_train", std::move(out), {x, gamma, beta},
                  [x, gamma, beta, xhat, inv_std](Tape& tp, const Matrix& g) {
                    const Matrix& gv2 = tp.value(gamma);
                    if (tp.requires_grad(gamma)) tp.accumulate(gamma, g.cwiseProduct(xhat).colwise().sum());
                    if (tp.requires_grad(beta)) tp.accumulate(beta, g.colwise().sum());
                    if (tp.requires_grad(x)) {
                      Matrix gxhat = g.array().rowwise() * gv2.row(0).array();
                      Matrix mean_g = gxhat.colwise().mean();
                      Matrix mean_gx = gxhat.cwiseProduct(xhat).colwise().mean();
                      Matrix dx = (gxhat.rowwise() - mean_g.row(0)) -
                                  (xhat.array().rowwise() * mean_gx.row(0).array()).matrix();
                      dx = dx.array().rowwise() * inv_std.row(0).array();
                      tp.accumulate(x, dx);
                    }
                  });
}

Var dropout(Var x, double rate, bool training, Rng* rng) {
  if (!training || rate <= 0.0) return x;
  if (rate >= 1.0) throw ShapeError("dropout: rate must be < 1");
  if (rng == nullptr) throw Error("dropout: training mode needs an RNG");
  Tape& t = tape_of(x);
  const Matrix& xv = x.value();
  std::bernoulli_distribution keep(1.0 - rate);
  const double s = 1.0 / (1.0 - rate);
  Matrix mask(xv.rows(), xv.cols());
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(*rng) ? s : 0.0;
  Matrix out = xv.cwiseProduct(mask);
  return t.record("dropout", std::move(out), {x}, [x, mask](Tape& tp, const Matrix& g) {
    tp.accumulate(x, g.cwiseProduct(mask));
  });
}

Var straight_through_binarize(Var x, double threshold) {
  Tape& t = tape_of(x);
  Matrix out = (x.value().array() >= threshold).cast<double>();
  return t.record("straight_through_binarize", std::move(out), {x},
                  [x](Tape& tp, const Matrix& g) { tp.accumulate(x, g); });
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  Tape& t = tape_of(logits);
  const Matrix& z = logits.value();
  if (static_cast<Eigen::Index>(labels.size()) != z.rows()) throw ShapeError("cross_entropy: label count mismatch");
  Matrix logp = log_softmax_of(z);
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= z.cols()) throw ShapeError("cross_entropy: label out of range");
    total -= logp(static_cast<Eigen::Index>(i), labels[i]);
  }
  const double n = static_cast<double>(labels.size());
  Matrix out(1, 1);
  out(0, 0) = total / n;
  std::vector<int> y(labels.begin(), labels.end());
  return t.record("cross_entropy", std::move(out), {logits}, [logits, y, logp, n](Tape& tp, const Matrix& g) {
    Matrix d = logp.array().exp();
    for (std::size_t i = 0; i < y.size(); ++i) d(static_cast<Eigen::Index>(i), y[i]) -= 1.0;
    tp.accumulate(logits, d * (g(0, 0) / n));
  });
}

Var masked_bce(Var pred, const Matrix& target, const Matrix& mask, double clamp) {
  Tape& t = tape_of(pred);
  const Matrix& p = pred.value();
  if (target.rows() != p.rows() || target.cols() != p.cols() || mask.rows() != p.rows() ||
      mask.cols() != p.cols()) {
    throw ShapeError("masked_bce: shape mismatch");
  }
  const Eigen::Index n = p.rows();
  Matrix row_counts = mask.rowwise().sum();
  double total = 0.0;
  for (Eigen::Index r = 0; r < n; ++r) {
    if (row_counts(r, 0) <= 0) continue;
    double acc = 0.0;
    for (Eigen::Index c = 0; c < p.cols(); ++c) {
      if (mask(r, c) == 0.0) continue;
      const double pv = p(r, c);
      const double y = target(r, c);
      acc -= y * std::log(std::max(pv, clamp)) + (1.0 - y) * std::log(std::max(1.0 - pv, clamp));
    }
    total += acc / row_counts(r, 0);
  }
  Matrix out(1, 1);
  out(0, 0) = total / static_cast<double>(n);
  return t.record("masked_bce", std::move(out), {pred},
                  [pred, target, mask, row_counts, clamp](Tape& tp, const Matrix& g) {
                    const Matrix& pv = tp.value(pred);
                    const double scale_all = g(0, 0) / static_cast<double>(pv.rows());
                    Matrix d = Matrix::Zero(pv.rows(), pv.cols());
                    for (Eigen::Index r = 0; r < pv.rows(); ++r) {
                      if (row_counts(r, 0) <= 0) continue;
                      const double w = scale_all / row_counts(r, 0);
                      for (Eigen::Index c = 0; c < pv.cols(); ++c) {
                        if (mask(r, c) == 0.0) continue;
                        const double x = pv(r, c);
                        const double y = target(r, c);
                        double grad = 0.0;
                        if (x > clamp) grad -= y / x;
                        if (1.0 - x > clamp) grad += (1.0 - y) / (1.0 - x);
                        d(r, c) = w * grad;
                      }
                    }
                    tp.accumulate(pred, d);
                  });
}

}  // namespace impinj::nn
