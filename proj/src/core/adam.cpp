#include "core/adam.hpp"

#include <cmath>

namespace colidr {

void Adam::step(const std::vector<Parameter*>& params) {
  for (Parameter* p : params) {
    if (!p->trainable) continue;
    CLDR_CHECK(p->grad.all_finite(), ErrorKind::Numeric,
               "adam: non-finite gradient for parameter '" << p->name << "'");
    CLDR_CHECK(p->grad.same_shape(p->value), ErrorKind::ShapeMismatch,
               "adam: gradient shape " << shape_str(p->grad.shape) << " vs parameter '"
                                       << p->name << "' " << shape_str(p->value.shape));
  }
  ++step_count_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
  for (Parameter* p : params) {
    if (!p->trainable) continue;
    Moments& mo = moments_[p];
    if (mo.m.numel() == 0) {
      mo.m = Tensor::zeros(p->value.shape);
      mo.v = Tensor::zeros(p->value.shape);
    }
    double* m = mo.m.data.data();
    double* v = mo.v.data.data();
    double* w = p->value.data.data();
    const double* g = p->grad.data.data();
    const std::size_t n = p->value.numel();
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      w[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

void Adam::zero_grads(const std::vector<Parameter*>& params) {
  for (Parameter* p : params) p->zero_grad();
}

double Adam::clip_global_norm(const std::vector<Parameter*>& params, double max_norm) {
  double sq = 0.0;
  for (const Parameter* p : params) {
    if (!p->trainable) continue;
    for (double g : p->grad.data) sq += g * g;
  }
  double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    double s = max_norm / norm;
    for (Parameter* p : params) {
      if (!p->trainable) continue;
      for (double& g : p->grad.data) g *= s;
    }
  }
  return norm;
}

}  // namespace colidr
