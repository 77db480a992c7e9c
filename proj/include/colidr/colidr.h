/*
 * colidr: concept learning over disentangled representations.
 *
 * C API over the training/evaluation pipeline. All functions return a
 * colidr_status; on failure colidr_last_error() holds a human-readable
 * message for the calling thread. Handles are opaque and single-owner;
 * close functions tolerate NULL.
 *
 * Config-bearing entry points take JSON strings. Unknown keys are rejected
 * so that typos never silently fall back to defaults.
 */

#ifndef COLIDR_H
#define COLIDR_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define COLIDR_API __declspec(dllexport)
#else
#define COLIDR_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum colidr_status {
  COLIDR_OK = 0,
  COLIDR_ERR_INVALID_ARGUMENT = 1,
  COLIDR_ERR_IO = 2,
  COLIDR_ERR_FORMAT = 3,
  COLIDR_ERR_NUMERIC = 4,
  COLIDR_ERR_UNSATISFIABLE = 5,
  COLIDR_ERR_INTERNAL = 6
} colidr_status;

COLIDR_API const char* colidr_status_name(colidr_status status);

/* Message for the most recent failure on this thread; empty string if none. */
COLIDR_API const char* colidr_last_error(void);

COLIDR_API const char* colidr_version(void);

/* Caps worker threads for rendering, convolution kernels and evaluation
 * fan-out. n < 1 means one worker. */
COLIDR_API void colidr_set_workers(int n);

/* ------------------------------------------------------------------ */
/* Datasets                                                            */
/* ------------------------------------------------------------------ */

typedef struct colidr_dataset colidr_dataset;

/* json_options keys:
 *   count (int, >= 100), size (16|32|64), task (string, e.g.
 *   "shape=square,x>0.5"), seed (uint64), train_fraction (optional, default
 *   0.7). Writes dataset.cldr, masks.cldb and manifest.json into out_dir;
 *   generation is byte-identical for a fixed seed. */
COLIDR_API colidr_status colidr_generate_dataset(const char* json_options,
                                                 const char* out_dir);

COLIDR_API colidr_status colidr_dataset_open(const char* dir, colidr_dataset** out);
COLIDR_API void colidr_dataset_close(colidr_dataset* dataset);

/* Copies the manifest JSON into buf (NUL-terminated). *needed receives the
 * full length incl. terminator; returns COLIDR_ERR_INVALID_ARGUMENT if cap
 * is too small. */
COLIDR_API colidr_status colidr_dataset_manifest(const colidr_dataset* dataset,
                                                 char* buf, size_t cap, size_t* needed);

/* ------------------------------------------------------------------ */
/* Training                                                            */
/* ------------------------------------------------------------------ */

/* json_config keys (all optional): lambda1..lambda4, beta, lr, grad_clip,
 * batch_size, epochs ([s1,s2,s3]), seed, ablation
 * ("none"|"cbm"|"no_drc"|"vanilla_vae"), latent, n_total, n_annotated,
 * agg_hidden, filters ([f1,f2,f3]), eval_subset.
 *
 * Writes run_manifest.json before the first step, then stage{1,2,3}.cldr
 * and metrics.csv into out_dir. Runs with the same seed and worker count
 * produce byte-identical checkpoints and metrics. */
COLIDR_API colidr_status colidr_train(const char* dataset_dir, const char* json_config,
                                      const char* out_dir);

/* ------------------------------------------------------------------ */
/* Models                                                              */
/* ------------------------------------------------------------------ */

typedef struct colidr_model colidr_model;

COLIDR_API colidr_status colidr_model_open(const char* checkpoint_path,
                                           colidr_model** out);
COLIDR_API void colidr_model_close(colidr_model* model);

/* Task-head weights as CSV (concept name, one weight column per class). */
COLIDR_API colidr_status colidr_export_head_weights(colidr_model* model,
                                                    const char* out_csv);

/* ------------------------------------------------------------------ */
/* Evaluation                                                          */
/* ------------------------------------------------------------------ */

/* split is "train" or "test". Writes summary.json with task_accuracy,
 * concept_error (RMSE), mean_iou_top2, mean_iou_top5, plus
 * iou_per_concept.csv, into out_dir. */
COLIDR_API colidr_status colidr_evaluate(colidr_model* model, colidr_dataset* dataset,
                                         const char* split, const char* out_dir);

/* Integrated-gradients attribution for one named concept over sample_count
 * test samples: attribution.csv (rank, dim, mean normalized score),
 * attribution_meta.json, and per-sample saliency PGMs for the top_k
 * dimensions. */
COLIDR_API colidr_status colidr_attribute(colidr_model* model, colidr_dataset* dataset,
                                          const char* concept_name, int top_k,
                                          int sample_count, const char* out_dir);

/* Decodes a latent sweep of `dim` over [lo, hi] for the given test sample;
 * writes `steps` PGM frames. */
COLIDR_API colidr_status colidr_traverse(colidr_model* model, colidr_dataset* dataset,
                                         int sample_index, int dim, double lo, double hi,
                                         int steps, const char* out_dir);

/* Test-time intervention curve over ascending fractions in [0,1]; writes a
 * CSV (fraction, corrected_rate, sample_count). random_order != 0 replaces
 * the most-deviant-first concept ordering with a seeded random one. */
COLIDR_API colidr_status colidr_intervene(colidr_model* model, colidr_dataset* dataset,
                                          const double* fractions, size_t n_fractions,
                                          uint64_t seed, int random_order,
                                          const char* out_csv);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* COLIDR_H */
