#pragma once

#include <array>

#include "core/layers.hpp"

namespace colidr {

struct VaeConfig {
  int image_size = 32;  // 16, 32 or 64
  int latent = 16;
  std::array<int, 3> filters = {16, 32, 32};
};

struct LatentPosterior {
  Value mu;
  Value log_var;  // sigma = exp(0.5 * log_var) > 0 by construction
};

// z = mu + exp(0.5*log_var) .* noise. Gradients flow into mu and log_var;
// the injected noise is a constant.
Value reparameterize(Tape& t, const LatentPosterior& post, const Tensor& noise);

// Negated ELBO to minimize: sum-over-pixels MSE (mean over batch)
// + beta * KL(q || N(0, I)) with the diagonal-Gaussian closed form
// KL = 1/2 sum_j (mu_j^2 + sigma_j^2 - log sigma_j^2 - 1), mean over batch.
Value elbo_loss(Value x, Value x_hat, const LatentPosterior& post, double beta);
Value kl_divergence(const LatentPosterior& post);       // mean over batch
Value reconstruction_mse(Value x, Value x_hat);         // sum over pixels, mean over batch

// Convolutional beta-VAE: 3 stride-2 conv blocks (BatchNorm + LeakyReLU)
// to (mu, log_var), mirrored transpose-conv decoder with a sigmoid output.
struct Vae {
  VaeConfig cfg;
  Conv2dLayer conv1, conv2, conv3;
  BatchNorm2dLayer bn1, bn2, bn3;
  LinearLayer mu_head, logvar_head;
  LinearLayer dec_in;
  ConvT2dLayer deconv1, deconv2, deconv3;
  BatchNorm2dLayer dbn1, dbn2;
  int feat_side = 0;
  int feat_len = 0;

  Vae() = default;
  Vae(const VaeConfig& cfg, Rng& rng);

  LatentPosterior encode(Tape& t, Value x, bool training, bool update_stats);
  Value decode(Tape& t, Value z, bool training, bool update_stats);

  void collect(ParamRefs& out);
  std::vector<std::pair<std::string, Tensor*>> stat_tensors();  // BN running stats
};

}  // namespace colidr
