#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "core/model.hpp"
#include "core/sprites.hpp"

namespace colidr {

// ---------------------------------------------------------------------------
// Split metrics
// ---------------------------------------------------------------------------

enum class ConceptErrorKind { Rmse, ZeroOne };

// rmse = sqrt(mean((score - label)^2)); zero_one = mean(round(score) != label)
double concept_error(const std::vector<double>& scores, const std::vector<double>& labels,
                     ConceptErrorKind kind);

struct SplitMetrics {
  double task_accuracy = 0.0;
  double concept_rmse = 0.0;
  double concept_zero_one = 0.0;
  int sample_count = 0;
};

// Inference-mode metrics (z = mu, BatchNorm running stats). When indices is
// given only those rows of the split are scored.
SplitMetrics evaluate_split(Model& model, const SplitData& split,
                            const std::vector<int>* indices = nullptr,
                            int batch_size = 256);

// Inference forward over a split: concept scores [N, n_total] and predicted
// class per sample.
struct SplitPredictions {
  Tensor scores;
  std::vector<int> predicted;
  Tensor mu;  // [N, k] latent means
};
SplitPredictions predict_split(Model& model, const SplitData& split,
                               const std::vector<int>* indices = nullptr,
                               int batch_size = 256);

// ---------------------------------------------------------------------------
// Integrated gradients over the latent space
// ---------------------------------------------------------------------------

// Scalar score of a latent vector; fills *grad with dF/dz when non-null.
using ScoreFn = std::function<double(const std::vector<double>& z, std::vector<double>* grad)>;

// Concept score c_i as a function of z, in inference mode.
ScoreFn concept_score_fn(Model& model, int concept_idx);

struct IgResult {
  std::vector<double> attributions;  // per latent dimension
  double f_input = 0.0;
  double f_baseline = 0.0;
  // |sum(attr) - (F(z) - F(baseline))| / |F(z) - F(baseline)|
  double completeness_gap() const;
};

// Riemann-midpoint path integral with `steps` points; exact for linear F.
IgResult integrated_gradients(const ScoreFn& fn, const std::vector<double>& z,
                              const std::vector<double>& baseline, int steps);

struct AttributionMap {
  std::vector<double> dim_scores;  // |attr| / max|attr|, in [0, 1]
};
AttributionMap to_attribution_map(const std::vector<double>& attributions);

// Indices of the k_sel largest scores, ties broken toward the lower index.
std::vector<int> top_k_dims(const AttributionMap& attr, int k_sel);

// ---------------------------------------------------------------------------
// Pixel saliency and IoU
// ---------------------------------------------------------------------------

inline constexpr double kSaliencyThreshold = 150.0 / 255.0;

struct SaliencyMask {
  int size = 0;
  std::vector<double> heat;  // in [0, 1], max = 1 when any gradient is nonzero
  std::vector<bool> binary;  // heat > 150/255
};

// |x * d mu[dim] / d x| (gradient times input) box-smoothed (3x3,
// renormalized at borders), max-scaled.
SaliencyMask dim_saliency(Model& model, const Tensor& image, int dim);

// Intersection over union of two equally-shaped masks; 0 when both empty.
double iou(const std::vector<bool>& a, const std::vector<bool>& b);

struct IouReport {
  double mean_top2 = 0.0;
  double mean_top5 = 0.0;
  std::vector<double> per_concept_top2;  // over annotated concepts
  std::vector<double> per_concept_top5;
  int samples_used = 0;
};

// Per annotated concept, over correctly-predicted test samples: IG-ranked
// top-k latent dimensions, per-dimension saliency IoU against the renderer
// ground-truth mask, averaged per dimension then over samples and concepts.
IouReport saliency_iou(Model& model, const SplitData& split, int max_samples_per_concept,
                       int ig_steps);

// ---------------------------------------------------------------------------
// Latent traversal
// ---------------------------------------------------------------------------

// Decodes z with z[dim] swept linearly over [lo, hi]; returns `steps` images.
std::vector<Tensor> latent_traversal(Model& model, const std::vector<double>& z, int dim,
                                     double lo, double hi, int steps);

// ---------------------------------------------------------------------------
// Test-time intervention
// ---------------------------------------------------------------------------

// Replaces predicted scores at the given annotated indices with ground-truth
// {0, 1} values, re-runs the task head, and reports whether the prediction
// now matches y.
bool intervene(Model& model, const std::vector<double>& scores,
               const std::vector<double>& gt_concepts, int y,
               const std::vector<int>& intervened_indices);

struct InterventionResult {
  double fraction_intervened = 0.0;
  double corrected_rate = 0.0;
  int sample_count = 0;
};

enum class InterventionOrder { MostDeviantFirst, Random };

// Curve over ascending fractions p: round(p*n) concepts intervened per
// initially-misclassified test sample. Empty results (no misclassified
// samples) are flagged by sample_count == 0, not an error.
std::vector<InterventionResult> intervention_curve(Model& model, const SplitData& split,
                                                   const std::vector<double>& fractions,
                                                   std::uint64_t seed,
                                                   InterventionOrder order =
                                                       InterventionOrder::MostDeviantFirst);

// ---------------------------------------------------------------------------
// Report writers
// ---------------------------------------------------------------------------

void write_pgm(const std::string& path, int h, int w, const std::vector<double>& gray01);
void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<double>>& rows);

struct EvalSummary {
  double task_accuracy = 0.0;
  double concept_error = 0.0;
  double mean_iou_top2 = 0.0;
  double mean_iou_top5 = 0.0;
  nlohmann::json to_json() const;
};

}  // namespace colidr
