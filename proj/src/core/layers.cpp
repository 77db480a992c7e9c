#include "core/layers.hpp"

#include <cmath>

namespace colidr {

Tensor init_weight(Shape shape, std::size_t fan_in, Rng& rng) {
  double bound = std::sqrt(6.0 / static_cast<double>(fan_in == 0 ? 1 : fan_in));
  return Tensor::uniform(std::move(shape), rng, -bound, bound);
}

LinearLayer::LinearLayer(const std::string& name, int in, int out, Rng& rng)
    : w(name + ".w", init_weight({out, in}, static_cast<std::size_t>(in), rng)),
      b(name + ".b", Tensor::zeros({out})) {}

Value LinearLayer::forward(Tape& t, Value x) const {
  return linear(x, t.param(const_cast<Parameter&>(w)), t.param(const_cast<Parameter&>(b)));
}

void LinearLayer::collect(ParamRefs& out) {
  out.push_back(&w);
  out.push_back(&b);
}

Conv2dLayer::Conv2dLayer(const std::string& name, int in_ch, int out_ch, int k, int s,
                         int p, Rng& rng, bool bias)
    : w(name + ".w",
        init_weight({out_ch, in_ch, k, k}, static_cast<std::size_t>(in_ch) * k * k, rng)),
      b(name + ".b", Tensor::zeros({out_ch})),
      stride(s),
      pad(p),
      has_bias(bias) {}

Value Conv2dLayer::forward(Tape& t, Value x) const {
  Value bias = has_bias ? t.param(const_cast<Parameter&>(b))
                        : t.constant(Tensor::zeros(b.value.shape));
  return conv2d(x, t.param(const_cast<Parameter&>(w)), bias, stride, pad);
}

void Conv2dLayer::collect(ParamRefs& out) {
  out.push_back(&w);
  if (has_bias) out.push_back(&b);
}

ConvT2dLayer::ConvT2dLayer(const std::string& name, int in_ch, int out_ch, int k, int s,
                           int p, int op, Rng& rng, bool bias)
    : w(name + ".w",
        init_weight({in_ch, out_ch, k, k}, static_cast<std::size_t>(in_ch) * k * k, rng)),
      b(name + ".b", Tensor::zeros({out_ch})),
      stride(s),
      pad(p),
      out_pad(op),
      has_bias(bias) {}

Value ConvT2dLayer::forward(Tape& t, Value x) const {
  Value bias = has_bias ? t.param(const_cast<Parameter&>(b))
                        : t.constant(Tensor::zeros(b.value.shape));
  return conv_transpose2d(x, t.param(const_cast<Parameter&>(w)), bias, stride, pad,
                          out_pad);
}

void ConvT2dLayer::collect(ParamRefs& out) {
  out.push_back(&w);
  if (has_bias) out.push_back(&b);
}

BatchNorm2dLayer::BatchNorm2dLayer(const std::string& name, int channels)
    : gamma(name + ".gamma", Tensor::full({channels}, 1.0)),
      beta(name + ".beta", Tensor::zeros({channels})),
      running_mean(Tensor::zeros({channels})),
      running_var(Tensor::full({channels}, 1.0)) {}

Value BatchNorm2dLayer::forward(Tape& t, Value x, bool training, bool update_stats) {
  BatchNormResult r = batchnorm2d(x, t.param(gamma), t.param(beta), running_mean,
                                  running_var, training, eps);
  if (training && update_stats) {
    const Tensor& xin = x.tensor();
    std::size_t m = xin.numel() / static_cast<std::size_t>(xin.dim(1));
    // unbiased variance for the running estimate
    double bessel = m > 1 ? static_cast<double>(m) / static_cast<double>(m - 1) : 1.0;
    for (std::size_t c = 0; c < running_mean.numel(); ++c) {
      running_mean.data[c] =
          (1.0 - momentum) * running_mean.data[c] + momentum * r.batch_mean.data[c];
      running_var.data[c] =
          (1.0 - momentum) * running_var.data[c] + momentum * bessel * r.batch_var.data[c];
    }
  }
  return r.y;
}

void BatchNorm2dLayer::collect(ParamRefs& out) {
  out.push_back(&gamma);
  out.push_back(&beta);
}

ScalarMlp::ScalarMlp(const std::string& name, int hidden, Rng& rng)
    : l1(name + ".l1", 1, hidden, rng),
      l2(name + ".l2", hidden, hidden, rng),
      l3(name + ".l3", hidden, 1, rng) {
  // near-identity start: units 0/1 carry relu(x) - relu(-x) = x; every other
  // weight is small noise so spare units can still specialize
  const double eps = 0.05;
  for (auto& v : l1.w.value.data) v = rng.uniform(-eps, eps);
  for (auto& v : l2.w.value.data) v = rng.uniform(-eps, eps);
  for (auto& v : l3.w.value.data) v = rng.uniform(-eps, eps);
  if (hidden >= 2) {
    l1.w.value.data[0] = 1.0;
    l1.w.value.data[1] = -1.0;
    l2.w.value.data[0] += 1.0;                                // [0,0]
    l2.w.value.data[static_cast<std::size_t>(hidden) + 1] += 1.0;  // [1,1]
    l3.w.value.data[0] = 1.0;
    l3.w.value.data[1] = -1.0;
  }
}

Value ScalarMlp::forward(Tape& t, Value x) const {
  Value h = relu(l1.forward(t, x));
  h = relu(l2.forward(t, h));
  return l3.forward(t, h);
}

void ScalarMlp::collect(ParamRefs& out) {
  l1.collect(out);
  l2.collect(out);
  l3.collect(out);
}

}  // namespace colidr
