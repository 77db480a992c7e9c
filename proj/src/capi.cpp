#include "colidr/colidr.h"

#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "core/eval.hpp"
#include "core/model.hpp"
#include "core/parallel.hpp"
#include "core/sprites.hpp"
#include "core/trainer.hpp"

using namespace colidr;

struct colidr_dataset {
  Dataset data;
};

struct colidr_model {
  Model model;
};

namespace {

thread_local std::string g_last_error;

colidr_status status_from(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidArgument:
    case ErrorKind::ShapeMismatch: return COLIDR_ERR_INVALID_ARGUMENT;
    case ErrorKind::Io: return COLIDR_ERR_IO;
    case ErrorKind::Format: return COLIDR_ERR_FORMAT;
    case ErrorKind::Numeric: return COLIDR_ERR_NUMERIC;
    case ErrorKind::Unsatisfiable: return COLIDR_ERR_UNSATISFIABLE;
    case ErrorKind::Internal: return COLIDR_ERR_INTERNAL;
  }
  return COLIDR_ERR_INTERNAL;
}

template <typename Fn>
colidr_status guarded(Fn&& fn) {
  try {
    fn();
    g_last_error.clear();
    return COLIDR_OK;
  } catch (const Error& e) {
    g_last_error = e.what();
    return status_from(e.kind());
  } catch (const nlohmann::json::exception& e) {
    g_last_error = e.what();
    return COLIDR_ERR_INVALID_ARGUMENT;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return COLIDR_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return COLIDR_ERR_INTERNAL;
  }
}

void require_arg(const void* p, const char* what) {
  CLDR_CHECK(p != nullptr, ErrorKind::InvalidArgument, what << " must not be NULL");
}

nlohmann::json parse_json(const char* text, const char* what) {
  require_arg(text, what);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::InvalidArgument, std::string(what) + ": " + e.what());
  }
}

GenerateConfig generate_config_from_json(const nlohmann::json& j) {
  static const std::array<const char*, 5> known = {"count", "size", "task", "seed",
                                                   "train_fraction"};
  CLDR_CHECK(j.is_object(), ErrorKind::InvalidArgument, "generate options: expected object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known)
      if (it.key() == k) ok = true;
    CLDR_CHECK(ok, ErrorKind::InvalidArgument,
               "generate options: unknown key '" << it.key() << "'");
  }
  GenerateConfig cfg;
  cfg.count = j.value("count", cfg.count);
  cfg.size = j.value("size", cfg.size);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.train_fraction = j.value("train_fraction", cfg.train_fraction);
  CLDR_CHECK(j.contains("task") && j.at("task").is_string(), ErrorKind::InvalidArgument,
             "generate options: 'task' (string) is required");
  cfg.task = TaskDef::parse(j.at("task").get<std::string>());
  CLDR_CHECK(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0,
             ErrorKind::InvalidArgument, "generate options: train_fraction in (0, 1)");
  return cfg;
}

const SplitData& split_by_name(const Dataset& ds, const char* split) {
  require_arg(split, "split");
  if (std::strcmp(split, "train") == 0) return ds.train;
  if (std::strcmp(split, "test") == 0) return ds.test;
  fail(ErrorKind::InvalidArgument,
       std::string("split must be 'train' or 'test', got '") + split + "'");
}

void check_model_dataset(const Model& m, const Dataset& d) {
  CLDR_CHECK(m.cfg.image_size == d.image_size, ErrorKind::InvalidArgument,
             "model expects " << m.cfg.image_size << "x" << m.cfg.image_size
                              << " images, dataset is " << d.image_size << "x"
                              << d.image_size);
  CLDR_CHECK(m.cfg.n_annotated <= d.train.concepts.dim(1), ErrorKind::InvalidArgument,
             "model expects " << m.cfg.n_annotated << " annotated concepts, dataset has "
                              << d.train.concepts.dim(1));
}

Tensor sample_image(const SplitData& split, int size, int index) {
  CLDR_CHECK(0 <= index && index < split.count(), ErrorKind::InvalidArgument,
             "sample index " << index << " out of [0, " << split.count() << ")");
  const std::size_t hw = static_cast<std::size_t>(size) * size;
  Tensor img({1, 1, size, size});
  std::copy_n(split.images.data.begin() + static_cast<std::size_t>(index) * hw, hw,
              img.data.begin());
  return img;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  CLDR_CHECK(!ec, ErrorKind::Io, "cannot create directory '" << dir << "'");
}

}  // namespace

extern "C" {

const char* colidr_status_name(colidr_status status) {
  switch (status) {
    case COLIDR_OK: return "ok";
    case COLIDR_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case COLIDR_ERR_IO: return "io";
    case COLIDR_ERR_FORMAT: return "format";
    case COLIDR_ERR_NUMERIC: return "numeric";
    case COLIDR_ERR_UNSATISFIABLE: return "unsatisfiable";
    case COLIDR_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* colidr_last_error(void) { return g_last_error.c_str(); }

const char* colidr_version(void) { return kVersion; }

void colidr_set_workers(int n) { set_worker_count(n); }

colidr_status colidr_generate_dataset(const char* json_options, const char* out_dir) {
  return guarded([&] {
    require_arg(out_dir, "out_dir");
    GenerateConfig cfg = generate_config_from_json(parse_json(json_options, "generate options"));
    Dataset::generate(cfg).save(out_dir);
  });
}

colidr_status colidr_dataset_open(const char* dir, colidr_dataset** out) {
  return guarded([&] {
    require_arg(dir, "dir");
    require_arg(out, "out");
    auto handle = std::make_unique<colidr_dataset>();
    handle->data = Dataset::load(dir);
    *out = handle.release();
  });
}

void colidr_dataset_close(colidr_dataset* dataset) { delete dataset; }

colidr_status colidr_dataset_manifest(const colidr_dataset* dataset, char* buf, size_t cap,
                                      size_t* needed) {
  return guarded([&] {
    require_arg(dataset, "dataset");
    require_arg(buf, "buf");
    std::string text = dataset->data.manifest.dump(2);
    if (needed) *needed = text.size() + 1;
    CLDR_CHECK(cap >= text.size() + 1, ErrorKind::InvalidArgument,
               "manifest buffer too small: need " << text.size() + 1 << " bytes, have "
                                                  << cap);
    std::memcpy(buf, text.c_str(), text.size() + 1);
  });
}

colidr_status colidr_train(const char* dataset_dir, const char* json_config,
                           const char* out_dir) {
  return guarded([&] {
    require_arg(dataset_dir, "dataset_dir");
    require_arg(out_dir, "out_dir");
    TrainConfig cfg = TrainConfig::from_json(parse_json(json_config, "train config"));
    Dataset data = Dataset::load(dataset_dir);
    ensure_dir(out_dir);

    // run manifest goes out before any training step
    nlohmann::json manifest{
        {"version", std::string("colidr ") + kVersion},
        {"seed", cfg.seed},
        {"workers", worker_count()},
        {"created_unix",
         std::chrono::duration_cast<std::chrono::seconds>(
             std::chrono::system_clock::now().time_since_epoch())
             .count()},
        {"config", cfg.to_json()},
        {"dataset",
         {{"dir", dataset_dir},
          {"seed", data.seed},
          {"size", data.image_size},
          {"task", data.task.str()}}},
        {"outputs",
         {{"checkpoints", {"stage1.cldr", "stage2.cldr", "stage3.cldr"}},
          {"metrics", "metrics.csv"}}},
    };
    {
      std::ofstream os(std::string(out_dir) + "/run_manifest.json");
      CLDR_CHECK(os.is_open(), ErrorKind::Io,
                 "cannot write '" << out_dir << "/run_manifest.json'");
      os << manifest.dump(2) << "\n";
    }

    Trainer trainer(cfg, data);
    trainer.run(std::string(out_dir));
  });
}

colidr_status colidr_model_open(const char* checkpoint_path, colidr_model** out) {
  return guarded([&] {
    require_arg(checkpoint_path, "checkpoint_path");
    require_arg(out, "out");
    auto handle = std::make_unique<colidr_model>();
    handle->model = Model::load(checkpoint_path);
    *out = handle.release();
  });
}

void colidr_model_close(colidr_model* model) { delete model; }

colidr_status colidr_export_head_weights(colidr_model* model, const char* out_csv) {
  return guarded([&] {
    require_arg(model, "model");
    require_arg(out_csv, "out_csv");
    const Model& m = model->model;
    std::ofstream os(out_csv);
    CLDR_CHECK(os.is_open(), ErrorKind::Io, "cannot write '" << out_csv << "'");
    os << "concept";
    for (int c = 0; c < m.cfg.task_classes; ++c) os << ",class" << c;
    os << "\n";
    const auto& defs = concept_defs();
    char buf[64];
    for (int j = 0; j < m.cfg.n_annotated; ++j) {
      std::string name = j < kNumConcepts ? defs[static_cast<std::size_t>(j)].name
                                          : "concept_" + std::to_string(j);
      os << name;
      for (int c = 0; c < m.cfg.task_classes; ++c) {
        std::snprintf(buf, sizeof buf, "%.12g",
                      m.head.h.w.value.data[static_cast<std::size_t>(c) * m.cfg.n_annotated +
                                            j]);
        os << "," << buf;
      }
      os << "\n";
    }
    os << "bias";
    for (int c = 0; c < m.cfg.task_classes; ++c) {
      std::snprintf(buf, sizeof buf, "%.12g",
                    m.head.h.b.value.data[static_cast<std::size_t>(c)]);
      os << "," << buf;
    }
    os << "\n";
    CLDR_CHECK(os.good(), ErrorKind::Io, "write failed for '" << out_csv << "'");
  });
}

colidr_status colidr_evaluate(colidr_model* model, colidr_dataset* dataset,
                              const char* split, const char* out_dir) {
  return guarded([&] {
    require_arg(model, "model");
    require_arg(dataset, "dataset");
    require_arg(out_dir, "out_dir");
    check_model_dataset(model->model, dataset->data);
    const SplitData& s = split_by_name(dataset->data, split);
    ensure_dir(out_dir);

    SplitMetrics metrics = evaluate_split(model->model, s);
    IouReport iou_rep = saliency_iou(model->model, s, /*max_samples_per_concept=*/50,
                                     /*ig_steps=*/64);
    EvalSummary summary{metrics.task_accuracy, metrics.concept_rmse, iou_rep.mean_top2,
                        iou_rep.mean_top5};
    {
      std::ofstream os(std::string(out_dir) + "/summary.json");
      CLDR_CHECK(os.is_open(), ErrorKind::Io, "cannot write '" << out_dir
                                                               << "/summary.json'");
      os << summary.to_json().dump(2) << "\n";
    }
    std::vector<std::vector<double>> rows;
    for (int ci = 0; ci < model->model.cfg.n_annotated; ++ci)
      rows.push_back({static_cast<double>(ci),
                      iou_rep.per_concept_top2[static_cast<std::size_t>(ci)],
                      iou_rep.per_concept_top5[static_cast<std::size_t>(ci)]});
    write_csv(std::string(out_dir) + "/iou_per_concept.csv",
              {"concept", "iou_top2", "iou_top5"}, rows);
  });
}

colidr_status colidr_attribute(colidr_model* model, colidr_dataset* dataset,
                               const char* concept_name, int top_k, int sample_count,
                               const char* out_dir) {
  return guarded([&] {
    require_arg(model, "model");
    require_arg(dataset, "dataset");
    require_arg(concept_name, "concept_name");
    require_arg(out_dir, "out_dir");
    Model& m = model->model;
    check_model_dataset(m, dataset->data);
    int ci = concept_index(concept_name);
    CLDR_CHECK(ci >= 0 && ci < m.cfg.n_annotated, ErrorKind::InvalidArgument,
               "unknown concept '" << concept_name << "'");
    CLDR_CHECK(top_k >= 1 && top_k <= m.cfg.latent, ErrorKind::InvalidArgument,
               "top_k must be in [1, " << m.cfg.latent << "]");
    CLDR_CHECK(sample_count >= 1, ErrorKind::InvalidArgument, "sample_count must be >= 1");
    const SplitData& s = dataset->data.test;
    const int n = std::min(sample_count, s.count());
    ensure_dir(out_dir);

    SplitPredictions pred = predict_split(m, s);
    ScoreFn fn = concept_score_fn(m, ci);
    std::vector<double> mean_score(static_cast<std::size_t>(m.cfg.latent), 0.0);
    const int steps = 128;
    for (int i = 0; i < n; ++i) {
      std::vector<double> z(
          pred.mu.data.begin() + static_cast<std::size_t>(i) * m.cfg.latent,
          pred.mu.data.begin() + static_cast<std::size_t>(i + 1) * m.cfg.latent);
      IgResult ig = integrated_gradients(fn, z, std::vector<double>(z.size(), 0.0), steps);
      AttributionMap map = to_attribution_map(ig.attributions);
      for (int j = 0; j < m.cfg.latent; ++j)
        mean_score[static_cast<std::size_t>(j)] += map.dim_scores[static_cast<std::size_t>(j)];
      std::vector<int> top = top_k_dims(map, top_k);
      Tensor img = sample_image(s, m.cfg.image_size, i);
      for (int r = 0; r < top_k; ++r) {
        SaliencyMask sal = dim_saliency(m, img, top[static_cast<std::size_t>(r)]);
        std::string path = std::string(out_dir) + "/saliency_s" + std::to_string(i) +
                           "_d" + std::to_string(top[static_cast<std::size_t>(r)]) + ".pgm";
        write_pgm(path, m.cfg.image_size, m.cfg.image_size, sal.heat);
      }
    }
    for (auto& v : mean_score) v /= n;
    AttributionMap mean_map;
    mean_map.dim_scores = mean_score;
    std::vector<int> top = top_k_dims(mean_map, top_k);
    std::vector<std::vector<double>> rows;
    for (int r = 0; r < top_k; ++r)
      rows.push_back({static_cast<double>(r), static_cast<double>(top[static_cast<std::size_t>(r)]),
                      mean_score[static_cast<std::size_t>(top[static_cast<std::size_t>(r)])]});
    write_csv(std::string(out_dir) + "/attribution.csv", {"rank", "dim", "mean_score"},
              rows);
    nlohmann::json meta{{"concept", concept_name},
                        {"normalization", "max_abs"},
                        {"baseline", "zero"},
                        {"ig_steps", steps},
                        {"samples", n}};
    std::ofstream os(std::string(out_dir) + "/attribution_meta.json");
    CLDR_CHECK(os.is_open(), ErrorKind::Io, "cannot write attribution_meta.json");
    os << meta.dump(2) << "\n";
  });
}

colidr_status colidr_traverse(colidr_model* model, colidr_dataset* dataset,
                              int sample_index, int dim, double lo, double hi, int steps,
                              const char* out_dir) {
  return guarded([&] {
    require_arg(model, "model");
    require_arg(dataset, "dataset");
    require_arg(out_dir, "out_dir");
    Model& m = model->model;
    check_model_dataset(m, dataset->data);
    const SplitData& s = dataset->data.test;
    Tensor img = sample_image(s, m.cfg.image_size, sample_index);
    ensure_dir(out_dir);

    Tape t(false);
    LatentPosterior post = m.vae.encode(t, t.leaf(img), false, false);
    std::vector<double> z(post.mu.tensor().data);
    auto frames = latent_traversal(m, z, dim, lo, hi, steps);
    for (std::size_t fidx = 0; fidx < frames.size(); ++fidx) {
      std::string path = std::string(out_dir) + "/traverse_s" +
                         std::to_string(sample_index) + "_d" + std::to_string(dim) + "_" +
                         std::to_string(fidx) + ".pgm";
      write_pgm(path, m.cfg.image_size, m.cfg.image_size, frames[fidx].data);
    }
  });
}

colidr_status colidr_intervene(colidr_model* model, colidr_dataset* dataset,
                               const double* fractions, size_t n_fractions, uint64_t seed,
                               int random_order, const char* out_csv) {
  return guarded([&] {
    require_arg(model, "model");
    require_arg(dataset, "dataset");
    require_arg(fractions, "fractions");
    require_arg(out_csv, "out_csv");
    CLDR_CHECK(n_fractions >= 1, ErrorKind::InvalidArgument, "need at least one fraction");
    check_model_dataset(model->model, dataset->data);
    std::vector<double> fr(fractions, fractions + n_fractions);
    auto curve = intervention_curve(model->model, dataset->data.test, fr, seed,
                                    random_order ? InterventionOrder::Random
                                                 : InterventionOrder::MostDeviantFirst);
    std::vector<std::vector<double>> rows;
    for (const auto& r : curve)
      rows.push_back({r.fraction_intervened, r.corrected_rate,
                      static_cast<double>(r.sample_count)});
    write_csv(out_csv, {"fraction", "corrected_rate", "sample_count"}, rows);
  });
}

}  // extern "C"
