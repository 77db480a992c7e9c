#pragma once

#include "core/layers.hpp"

namespace colidr {

struct AggDecConfig {
  int latent = 16;     // k
  int n_total = 16;    // N concepts; first n_annotated carry labels
  int n_annotated = 6;
  int hidden = 32;     // per-dimension transform width
};

// Aggregation: z'_j = a_j(z_j) through k independent scalar networks, then a
// single fully connected layer f to N concept logits; scores = sigmoid.
// Decomposition: g maps concept scores back to z'-space, then k independent
// decoders d_j recover each latent dimension; the per-dimension decoders
// confine leakage so d_j sees only row j of g's output.
struct AggDec {
  AggDecConfig cfg;
  std::vector<ScalarMlp> a;  // agg.a.{j}
  LinearLayer f;             // agg.f
  LinearLayer g;             // dec.g
  std::vector<ScalarMlp> d;  // dec.d.{j}

  AggDec() = default;
  AggDec(const AggDecConfig& cfg, Rng& rng);

  struct Aggregated {
    Value z_prime;  // [N_batch, k]
    Value logits;   // [N_batch, N]
    Value scores;   // sigmoid(logits)
  };
  Aggregated aggregate(Tape& t, Value z) const;

  struct Decomposed {
    Value z_prime_hat;  // g(c), [N_batch, k]
    Value z_hat;        // [N_batch, k]
  };
  Decomposed decompose(Tape& t, Value scores) const;

  void collect(ParamRefs& out);
};

// Weighted BCE over the first n annotated concepts, computed from logits;
// pos_weight balances positives per concept. Mean over batch.
Value concept_loss(Value logits, int n_annotated, const Tensor& labels,
                   const Tensor& pos_weight);

// ||z - z_hat||^2, mean over batch.
Value drc_loss(Value z, Value z_hat);

// ||z'||_1, mean over batch.
Value sparsity_penalty(Value z_prime);

// Class-balance weights (neg/pos per concept) clipped to [0.1, 10].
Tensor concept_pos_weights(const Tensor& concept_labels, int n_annotated);

}  // namespace colidr
