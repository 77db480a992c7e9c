#pragma once

#include <string>
#include <vector>

#include "core/ops.hpp"
#include "core/rng.hpp"
#include "core/tape.hpp"

namespace colidr {

using ParamRefs = std::vector<Parameter*>;

// Kaiming-uniform style init: U(-bound, bound) with bound = sqrt(6 / fan_in).
Tensor init_weight(Shape shape, std::size_t fan_in, Rng& rng);

struct LinearLayer {
  Parameter w;  // [out, in]
  Parameter b;  // [out]

  LinearLayer() = default;
  LinearLayer(const std::string& name, int in, int out, Rng& rng);
  Value forward(Tape& t, Value x) const;
  void collect(ParamRefs& out);
};

// Convolution layers drop their bias when followed by BatchNorm: the mean
// subtraction cancels a per-channel bias exactly, leaving a null direction.
struct Conv2dLayer {
  Parameter w;  // [oc, ic, k, k]
  Parameter b;  // [oc], absent when has_bias == false
  int stride = 2, pad = 1;
  bool has_bias = true;

  Conv2dLayer() = default;
  Conv2dLayer(const std::string& name, int in_ch, int out_ch, int k, int stride, int pad,
              Rng& rng, bool has_bias = true);
  Value forward(Tape& t, Value x) const;
  void collect(ParamRefs& out);
};

struct ConvT2dLayer {
  Parameter w;  // [ic, oc, k, k]
  Parameter b;  // [oc], absent when has_bias == false
  int stride = 2, pad = 1, out_pad = 1;
  bool has_bias = true;

  ConvT2dLayer() = default;
  ConvT2dLayer(const std::string& name, int in_ch, int out_ch, int k, int stride, int pad,
               int out_pad, Rng& rng, bool has_bias = true);
  Value forward(Tape& t, Value x) const;
  void collect(ParamRefs& out);
};

// BatchNorm with running statistics (momentum 0.1). Training mode normalizes
// by batch statistics; update_stats is separated from the forward so
// gradient checking can re-run the same function without drift.
struct BatchNorm2dLayer {
  Parameter gamma;
  Parameter beta;
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNorm2dLayer() = default;
  BatchNorm2dLayer(const std::string& name, int channels);
  Value forward(Tape& t, Value x, bool training, bool update_stats);
  void collect(ParamRefs& out);
};

// Independent scalar-to-scalar 3-layer network ([1, hidden, hidden, 1]),
// used per latent dimension by the aggregation and decomposition paths.
// Initialized near the identity (relu(x) - relu(-x) = x plus small noise) so
// the transform starts with unit derivative; a plain random init collapses
// under the z' sparsity penalty and starves the upstream gradient.
struct ScalarMlp {
  LinearLayer l1, l2, l3;

  ScalarMlp() = default;
  ScalarMlp(const std::string& name, int hidden, Rng& rng);
  Value forward(Tape& t, Value x) const;  // x: [N,1] -> [N,1]
  void collect(ParamRefs& out);
};

}  // namespace colidr
