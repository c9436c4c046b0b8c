#pragma once

#include <vector>

#include "impinj/tape.h"

namespace impinj::nn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Global gradient-norm clip; <= 0 disables clipping.
  double clip_norm = 0.0;
};

// Adam with bias correction. Parameters whose gradient slot is empty are
// treated as having a zero gradient for the step.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamConfig config);

  void zero_grad();
  void step();

  long steps() const { return step_; }
  const AdamConfig& config() const { return config_; }
  // Global gradient norm measured by the last step (before clipping).
  double last_grad_norm() const { return last_norm_; }

 private:
  std::vector<Parameter*> params_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  AdamConfig config_;
  long step_ = 0;
  double last_norm_ = 0.0;
};

double global_grad_norm(const std::vector<Parameter*>& params);

}  // namespace impinj::nn
