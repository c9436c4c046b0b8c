#include "impinj/optim.h"

#include <cmath>

namespace impinj::nn {

namespace {

bool has_grad(const Parameter& p) {
  return p.grad.rows() == p.value.rows() && p.grad.cols() == p.value.cols();
}

}  // namespace

double global_grad_norm(const std::vector<Parameter*>& params) {
  double sq = 0.0;
  for (const Parameter* p : params) {
    if (has_grad(*p)) sq += p->grad.squaredNorm();
  }
  return std::sqrt(sq);
}

Adam::Adam(std::vector<Parameter*> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const Parameter* p : params_) {
    m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
}

void Adam::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

void Adam::step() {
  ++step_;
  last_norm_ = global_grad_norm(params_);
  double clip_scale = 1.0;
  if (config_.clip_norm > 0.0 && last_norm_ > config_.clip_norm) {
    clip_scale = config_.clip_norm / last_norm_;
  }
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    if (!p.trainable) continue;
    if (p.value.rows() != m_[i].rows() || p.value.cols() != m_[i].cols()) {
      throw ShapeError("adam: parameter " + p.name + " changed shape");
    }
    if (has_grad(p)) {
      m_[i] = config_.beta1 * m_[i] + ((1.0 - config_.beta1) * clip_scale) * p.grad;
      v_[i] = config_.beta2 * v_[i] +
              ((1.0 - config_.beta2) * clip_scale * clip_scale) * p.grad.cwiseAbs2();
    } else {
      m_[i] *= config_.beta1;
      v_[i] *= config_.beta2;
    }
    p.value.array() -= config_.lr * (m_[i].array() / bc1) /
                       ((v_[i].array() / bc2).sqrt() + config_.eps);
  }
}

}  // namespace impinj::nn
