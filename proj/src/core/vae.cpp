#include "core/vae.hpp"

namespace colidr {

namespace {
constexpr double kLeakySlope = 0.01;
}

Value reparameterize(Tape& t, const LatentPosterior& post, const Tensor& noise) {
  const Tensor& mu = post.mu.tensor();
  CLDR_CHECK(noise.same_shape(mu), ErrorKind::ShapeMismatch,
             "reparameterize: noise " << shape_str(noise.shape) << " vs mu "
                                      << shape_str(mu.shape));
  Value sigma = exp(scale(post.log_var, 0.5));
  return add(post.mu, mul(sigma, t.constant(noise)));
}

Value reconstruction_mse(Value x, Value x_hat) {
  const Tensor& tx = x.tensor();
  CLDR_CHECK(tx.same_shape(x_hat.tensor()), ErrorKind::ShapeMismatch,
             "reconstruction_mse: " << shape_str(tx.shape) << " vs "
                                    << shape_str(x_hat.tensor().shape));
  int batch = tx.dim(0);
  return scale(sum(square(sub(x_hat, x))), 1.0 / batch);
}

Value kl_divergence(const LatentPosterior& post) {
  int batch = post.mu.tensor().dim(0);
  Value terms = add_scalar(sub(add(square(post.mu), exp(post.log_var)), post.log_var), -1.0);
  return scale(sum(terms), 0.5 / batch);
}

Value elbo_loss(Value x, Value x_hat, const LatentPosterior& post, double beta) {
  CLDR_CHECK(beta >= 0.0, ErrorKind::InvalidArgument, "elbo_loss: beta must be >= 0");
  Value recon = reconstruction_mse(x, x_hat);
  if (beta == 0.0) return recon;  // KL contributes exactly zero gradient
  return add(recon, scale(kl_divergence(post), beta));
}

Vae::Vae(const VaeConfig& c, Rng& rng) : cfg(c) {
  CLDR_CHECK(c.image_size == 16 || c.image_size == 32 || c.image_size == 64,
             ErrorKind::InvalidArgument, "vae: image_size must be 16, 32 or 64");
  const auto& f = c.filters;
  conv1 = Conv2dLayer("vae.enc.conv1", 1, f[0], 3, 2, 1, rng, /*bias=*/false);
  conv2 = Conv2dLayer("vae.enc.conv2", f[0], f[1], 3, 2, 1, rng, /*bias=*/false);
  conv3 = Conv2dLayer("vae.enc.conv3", f[1], f[2], 3, 2, 1, rng, /*bias=*/false);
  bn1 = BatchNorm2dLayer("vae.enc.bn1", f[0]);
  bn2 = BatchNorm2dLayer("vae.enc.bn2", f[1]);
  bn3 = BatchNorm2dLayer("vae.enc.bn3", f[2]);
  feat_side = c.image_size / 8;  // three stride-2 halvings
  feat_len = f[2] * feat_side * feat_side;
  mu_head = LinearLayer("vae.enc.mu", feat_len, c.latent, rng);
  logvar_head = LinearLayer("vae.enc.logvar", feat_len, c.latent, rng);
  dec_in = LinearLayer("vae.dec.in", c.latent, feat_len, rng);
  deconv1 = ConvT2dLayer("vae.dec.deconv1", f[2], f[1], 3, 2, 1, 1, rng, /*bias=*/false);
  deconv2 = ConvT2dLayer("vae.dec.deconv2", f[1], f[0], 3, 2, 1, 1, rng, /*bias=*/false);
  deconv3 = ConvT2dLayer("vae.dec.deconv3", f[0], 1, 3, 2, 1, 1, rng);
  dbn1 = BatchNorm2dLayer("vae.dec.bn1", f[1]);
  dbn2 = BatchNorm2dLayer("vae.dec.bn2", f[0]);
}

LatentPosterior Vae::encode(Tape& t, Value x, bool training, bool update_stats) {
  const Tensor& tx = x.tensor();
  CLDR_CHECK(tx.ndim() == 4 && tx.dim(1) == 1 && tx.dim(2) == cfg.image_size &&
                 tx.dim(3) == cfg.image_size,
             ErrorKind::ShapeMismatch,
             "vae encode: expected [N,1," << cfg.image_size << "," << cfg.image_size
                                          << "], got " << shape_str(tx.shape));
  const int batch = tx.dim(0);
  Value h = leaky_relu(bn1.forward(t, conv1.forward(t, x), training, update_stats),
                       kLeakySlope);
  h = leaky_relu(bn2.forward(t, conv2.forward(t, h), training, update_stats), kLeakySlope);
  h = leaky_relu(bn3.forward(t, conv3.forward(t, h), training, update_stats), kLeakySlope);
  Value flat = reshape(h, {batch, feat_len});
  return {mu_head.forward(t, flat), logvar_head.forward(t, flat)};
}

Value Vae::decode(Tape& t, Value z, bool training, bool update_stats) {
  const Tensor& tz = z.tensor();
  CLDR_CHECK(tz.ndim() == 2 && tz.dim(1) == cfg.latent, ErrorKind::ShapeMismatch,
             "vae decode: expected [N," << cfg.latent << "], got " << shape_str(tz.shape));
  const int batch = tz.dim(0);
  Value h = dec_in.forward(t, z);
  h = reshape(h, {batch, cfg.filters[2], feat_side, feat_side});
  h = leaky_relu(dbn1.forward(t, deconv1.forward(t, h), training, update_stats),
                 kLeakySlope);
  h = leaky_relu(dbn2.forward(t, deconv2.forward(t, h), training, update_stats),
                 kLeakySlope);
  return sigmoid(deconv3.forward(t, h));
}

void Vae::collect(ParamRefs& out) {
  conv1.collect(out);
  bn1.collect(out);
  conv2.collect(out);
  bn2.collect(out);
  conv3.collect(out);
  bn3.collect(out);
  mu_head.collect(out);
  logvar_head.collect(out);
  dec_in.collect(out);
  deconv1.collect(out);
  dbn1.collect(out);
  deconv2.collect(out);
  dbn2.collect(out);
  deconv3.collect(out);
}

std::vector<std::pair<std::string, Tensor*>> Vae::stat_tensors() {
  return {
      {"vae.enc.bn1.run_mean", &bn1.running_mean}, {"vae.enc.bn1.run_var", &bn1.running_var},
      {"vae.enc.bn2.run_mean", &bn2.running_mean}, {"vae.enc.bn2.run_var", &bn2.running_var},
      {"vae.enc.bn3.run_mean", &bn3.running_mean}, {"vae.enc.bn3.run_var", &bn3.running_var},
      {"vae.dec.bn1.run_mean", &dbn1.running_mean}, {"vae.dec.bn1.run_var", &dbn1.running_var},
      {"vae.dec.bn2.run_mean", &dbn2.running_mean}, {"vae.dec.bn2.run_var", &dbn2.running_var},
  };
}

}  // namespace colidr
