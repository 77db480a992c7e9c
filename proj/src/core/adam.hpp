#pragma once

#include <unordered_map>
#include <vector>

#include "core/tape.hpp"

namespace colidr {

// Bias-corrected Adam. Moment tensors are keyed per parameter; step_count is
// shared across the group and increments by exactly one per step.
class Adam {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double epsilon = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(epsilon) {}

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  long step_count() const { return step_count_; }

  // Applies one update to every trainable parameter from its accumulated
  // gradient, then increments step_count. Non-finite gradients abort the
  // step before touching any parameter.
  void step(const std::vector<Parameter*>& params);

  static void zero_grads(const std::vector<Parameter*>& params);

  // Scales all gradients so their global L2 norm is at most max_norm.
  // Returns the pre-clip norm.
  static double clip_global_norm(const std::vector<Parameter*>& params, double max_norm);

 private:
  struct Moments {
    Tensor m;
    Tensor v;
  };

  double lr_, beta1_, beta2_, eps_;
  long step_count_ = 0;
  std::unordered_map<Parameter*, Moments> moments_;
};

}  // namespace colidr
