#include "core/aggdec.hpp"

#include <algorithm>
#include <cmath>

namespace colidr {

AggDec::AggDec(const AggDecConfig& c, Rng& rng) : cfg(c) {
  CLDR_CHECK(c.n_annotated >= 1 && c.n_annotated <= c.n_total, ErrorKind::InvalidArgument,
             "aggdec: n_annotated " << c.n_annotated << " must be in [1, " << c.n_total
                                    << "]");
  a.reserve(static_cast<std::size_t>(c.latent));
  d.reserve(static_cast<std::size_t>(c.latent));
  for (int j = 0; j < c.latent; ++j) {
    a.emplace_back("agg.a." + std::to_string(j), c.hidden, rng);
    d.emplace_back("dec.d." + std::to_string(j), c.hidden, rng);
  }
  f = LinearLayer("agg.f", c.latent, c.n_total, rng);
  g = LinearLayer("dec.g", c.n_total, c.latent, rng);
}

AggDec::Aggregated AggDec::aggregate(Tape& t, Value z) const {
  const Tensor& tz = z.tensor();
  CLDR_CHECK(tz.ndim() == 2 && tz.dim(1) == cfg.latent, ErrorKind::ShapeMismatch,
             "aggregate: expected [N," << cfg.latent << "], got " << shape_str(tz.shape));
  std::vector<Value> parts;
  parts.reserve(a.size());
  for (int j = 0; j < cfg.latent; ++j)
    parts.push_back(a[static_cast<std::size_t>(j)].forward(t, slice_cols(z, j, j + 1)));
  Aggregated out;
  out.z_prime = concat_cols(parts);
  out.logits = f.forward(t, out.z_prime);
  out.scores = sigmoid(out.logits);
  return out;
}

AggDec::Decomposed AggDec::decompose(Tape& t, Value scores) const {
  const Tensor& tc = scores.tensor();
  CLDR_CHECK(tc.ndim() == 2 && tc.dim(1) == cfg.n_total, ErrorKind::ShapeMismatch,
             "decompose: expected [N," << cfg.n_total << "], got " << shape_str(tc.shape));
  Decomposed out;
  out.z_prime_hat = g.forward(t, scores);
  std::vector<Value> parts;
  parts.reserve(d.size());
  for (int j = 0; j < cfg.latent; ++j)
    parts.push_back(
        d[static_cast<std::size_t>(j)].forward(t, slice_cols(out.z_prime_hat, j, j + 1)));
  out.z_hat = concat_cols(parts);
  return out;
}

void AggDec::collect(ParamRefs& out) {
  for (auto& net : a) net.collect(out);
  f.collect(out);
  g.collect(out);
  for (auto& net : d) net.collect(out);
}

Value concept_loss(Value logits, int n_annotated, const Tensor& labels,
                   const Tensor& pos_weight) {
  Value annotated = slice_cols(logits, 0, n_annotated);
  return bce_with_logits(annotated, labels, pos_weight);
}

Value drc_loss(Value z, Value z_hat) {
  const Tensor& tz = z.tensor();
  CLDR_CHECK(tz.same_shape(z_hat.tensor()), ErrorKind::ShapeMismatch,
             "drc_loss: " << shape_str(tz.shape) << " vs "
                          << shape_str(z_hat.tensor().shape));
  return scale(sum(square(sub(z, z_hat))), 1.0 / tz.dim(0));
}

Value sparsity_penalty(Value z_prime) {
  return scale(sum(abs(z_prime)), 1.0 / z_prime.tensor().dim(0));
}

Tensor concept_pos_weights(const Tensor& concept_labels, int n_annotated) {
  CLDR_CHECK(concept_labels.ndim() == 2 &&
                 concept_labels.dim(1) >= n_annotated,
             ErrorKind::ShapeMismatch, "concept_pos_weights: labels "
                                           << shape_str(concept_labels.shape) << " vs n="
                                           << n_annotated);
  const int rows = concept_labels.dim(0);
  const int cols = concept_labels.dim(1);
  Tensor w({n_annotated});
  for (int j = 0; j < n_annotated; ++j) {
    long pos = 0;
    for (int i = 0; i < rows; ++i)
      pos += concept_labels.data[static_cast<std::size_t>(i) * cols + j] > 0.5 ? 1 : 0;
    long neg = rows - pos;
    double ratio = pos == 0 ? 10.0 : static_cast<double>(neg) / static_cast<double>(pos);
    w.data[static_cast<std::size_t>(j)] = std::clamp(ratio, 0.1, 10.0);
  }
  return w;
}

}  // namespace colidr
