#pragma once

#include <string>

#include "core/aggdec.hpp"
#include "core/taskhead.hpp"
#include "core/vae.hpp"

namespace colidr {

enum class Ablation : int { None = 0, Cbm = 1, NoDrc = 2, VanillaVae = 3 };

const char* ablation_name(Ablation a);
Ablation ablation_from_name(const std::string& name);

struct ModelConfig {
  int image_size = 32;
  int latent = 16;       // k
  int n_total = 16;      // N concepts (= k by default)
  int n_annotated = 6;   // n
  int task_classes = 2;  // m
  std::array<int, 3> filters = {16, 32, 32};
  int agg_hidden = 32;
  double beta = 0.05;
  Ablation ablation = Ablation::None;

  // effective beta: vanilla_vae pins 1, cbm drops the KL term entirely
  double effective_beta() const;
  void validate() const;
};

// The full pipeline: images -> disentangled factors -> concepts -> task.
// The cbm ablation swaps the probabilistic encoder for a deterministic
// bottleneck and replaces aggregation/decomposition with a direct linear
// concept layer.
struct Model {
  ModelConfig cfg;
  Vae vae;
  AggDec aggdec;            // unused in cbm mode
  LinearLayer cbm_concepts; // cbm mode only: bottleneck -> N logits
  TaskHead head;

  Model() = default;
  Model(const ModelConfig& cfg, std::uint64_t init_seed);

  bool is_cbm() const { return cfg.ablation == Ablation::Cbm; }

  struct Forward {
    LatentPosterior post;
    Value z;        // sampled factors (cbm: the deterministic bottleneck)
    Value x_hat;
    Value z_prime;  // aggregation transform (invalid in cbm mode)
    Value logits;   // concept logits [N_batch, N]
    Value scores;   // sigmoid(logits)
    Value z_hat;    // decomposition output (invalid in cbm mode)
    TaskHead::Prediction pred;
  };
  // One full pass on a single tape. noise must be [batch, latent]; it is
  // ignored in cbm mode. In inference mode (training=false) BatchNorm uses
  // running statistics and z = mu (noise unused).
  Forward forward(Tape& t, Value x, const Tensor& noise, bool training,
                  bool update_stats);

  // Concept scores as a function of a latent vector batch (inference path
  // used by attribution and intervention).
  Value scores_from_latent(Tape& t, Value z) const;

  ParamRefs params();
  ParamRefs vae_params();
  ParamRefs concept_params();  // aggregation/decomposition (or cbm layer)
  ParamRefs head_params();

  void save(const std::string& path) const;
  static Model load(const std::string& path);
};

}  // namespace colidr
