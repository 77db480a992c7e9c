#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "core/adam.hpp"
#include "core/model.hpp"
#include "core/sprites.hpp"

namespace colidr {

// Loss weights and schedule. Defaults follow the dSprites settings scaled to
// desk size (20/10/10 epochs).
struct TrainConfig {
  double lambda1 = 0.5;  // concept supervision
  double lambda2 = 0.2;  // task prediction
  double lambda3 = 1.0;  // representation consistency
  double lambda4 = 0.1;  // z' sparsity
  double beta = 0.05;
  double lr = 1e-3;
  double grad_clip = 5.0;
  int batch_size = 64;
  int epochs_stage1 = 20;
  int epochs_stage2 = 10;
  int epochs_stage3 = 10;
  std::uint64_t seed = 0;
  Ablation ablation = Ablation::None;

  int latent = 16;
  int n_total = 16;
  int n_annotated = 6;
  int agg_hidden = 32;
  std::array<int, 3> filters = {16, 32, 32};
  int eval_subset = 256;  // per-epoch metric subset of the test split

  void validate() const;
  nlohmann::json to_json() const;
  // strict: unknown keys are rejected
  static TrainConfig from_json(const nlohmann::json& j);

  ModelConfig model_config(int image_size) const;
  // lambda3 = 0 under no_drc
  double effective_lambda3() const;
};

struct LossBreakdown {
  double total = 0.0;
  // weighted contributions; they sum to total
  double elbo = 0.0;
  double con = 0.0;
  double pred = 0.0;
  double drc = 0.0;
  double sparsity = 0.0;
  // unweighted diagnostics
  double recon = 0.0;
  double kl = 0.0;
};

struct EpochRecord {
  int stage = 0;
  int epoch = 0;  // per-stage index
  LossBreakdown loss;
  double task_accuracy = 0.0;
  double concept_rmse = 0.0;
  double wall_seconds = 0.0;  // kept out of metrics.csv so reruns are byte-identical
};

// Per-stage lambda set after freezing rules are applied.
struct StageWeights {
  double lambda1 = 0.0, lambda2 = 0.0, lambda3 = 0.0, lambda4 = 0.0;
  double beta = 0.0;
  bool train_vae = false;
  bool train_concepts = false;
  bool train_head = false;
};
StageWeights stage_weights(int stage, const TrainConfig& cfg);

// Builds the full objective on the tape and reports the term breakdown.
// vae_grad=false runs encode/decode without gradient tracking (frozen VAE);
// the ELBO term is still computed for logging.
struct BatchLoss {
  Value total;
  LossBreakdown breakdown;
};
BatchLoss total_loss(Tape& t, Model& model, const Tensor& images,
                     const Tensor& concept_labels, const std::vector<int>& task_labels,
                     const Tensor& noise, const Tensor& pos_weight,
                     const StageWeights& w, bool vae_grad, bool update_stats);

class Trainer {
 public:
  Trainer(const TrainConfig& cfg, const Dataset& data);

  // Runs stages 1..3; writes stage{n}.cldr checkpoints and metrics.csv under
  // out_dir when given. Deterministic for a fixed seed and worker count.
  Model run(const std::optional<std::string>& out_dir);

  // Single-stage entry used by tests.
  void train_stage(int stage, Model& model, std::vector<EpochRecord>& log);

  const std::vector<EpochRecord>& log() const { return log_; }

 private:
  TrainConfig cfg_;
  const Dataset& data_;
  Tensor pos_weight_;
  std::vector<int> eval_rows_;

  EpochRecord run_epoch(int stage, int epoch, Model& model, Adam& opt, Rng& shuffle_rng,
                        Rng& noise_rng);
  std::vector<EpochRecord> log_;
};

void write_metrics_csv(const std::string& path, const std::vector<EpochRecord>& log);

}  // namespace colidr
