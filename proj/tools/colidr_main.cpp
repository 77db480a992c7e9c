// colidr command-line front end. Talks to the pipeline exclusively through
// the C API in colidr/colidr.h; all heavy lifting lives in the shared
// library.

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "colidr/colidr.h"

namespace {

// exit codes: 0 success, 1 user error, 2 internal error
int exit_code_for(colidr_status s) {
  switch (s) {
    case COLIDR_OK: return 0;
    case COLIDR_ERR_INVALID_ARGUMENT:
    case COLIDR_ERR_IO:
    case COLIDR_ERR_FORMAT:
    case COLIDR_ERR_UNSATISFIABLE: return 1;
    case COLIDR_ERR_NUMERIC:
    case COLIDR_ERR_INTERNAL: return 2;
  }
  return 2;
}

int report(colidr_status s, const std::string& action) {
  if (s == COLIDR_OK) return 0;
  std::cerr << "colidr: " << action << " failed (" << colidr_status_name(s)
            << "): " << colidr_last_error() << "\n";
  return exit_code_for(s);
}

// --out falls back to the COLIDR_OUT_DIR environment variable
std::string resolve_out(const std::string& flag_value, const char* what) {
  if (!flag_value.empty()) return flag_value;
  const char* env = std::getenv("COLIDR_OUT_DIR");
  if (env && *env) return env;
  std::cerr << "colidr: " << what << ": --out not given and COLIDR_OUT_DIR not set\n";
  std::exit(1);
}

struct DatasetHandle {
  colidr_dataset* ptr = nullptr;
  ~DatasetHandle() { colidr_dataset_close(ptr); }
};

struct ModelHandle {
  colidr_model* ptr = nullptr;
  ~ModelHandle() { colidr_model_close(ptr); }
};

int open_pair(const std::string& ckpt, const std::string& data, ModelHandle& model,
              DatasetHandle& dataset) {
  if (int rc = report(colidr_model_open(ckpt.c_str(), &model.ptr), "opening checkpoint"))
    return rc;
  if (int rc = report(colidr_dataset_open(data.c_str(), &dataset.ptr), "opening dataset"))
    return rc;
  return 0;
}

std::vector<double> parse_fractions(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      out.push_back(std::stod(tok));
    } catch (const std::exception&) {
      std::cerr << "colidr: bad fraction '" << tok << "'\n";
      std::exit(1);
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"concept learning over disentangled representations"};
  app.require_subcommand(1);

  int workers = 0;
  app.add_option("--workers", workers, "cap worker threads (default: hardware)");

  // ---- generate ----------------------------------------------------------
  auto* gen = app.add_subcommand("generate", "generate a sprite dataset");
  int g_count = 10000, g_size = 32;
  std::uint64_t g_seed = 0;
  std::string g_task, g_out;
  double g_train_fraction = 0.7;
  gen->add_option("--count", g_count, "number of samples (>= 100)");
  gen->add_option("--size", g_size, "image side: 16, 32 or 64");
  gen->add_option("--task", g_task, "conjunction task, e.g. shape=square,x>0.5")
      ->required();
  gen->add_option("--seed", g_seed, "generation seed");
  gen->add_option("--train-fraction", g_train_fraction, "train split fraction");
  gen->add_option("--out", g_out, "output directory");

  // ---- train -------------------------------------------------------------
  auto* train = app.add_subcommand("train", "train on a generated dataset");
  std::string t_data, t_out, t_config, t_ablation;
  std::optional<std::uint64_t> t_seed;
  std::optional<int> t_batch;
  std::optional<double> t_lr, t_beta;
  train->add_option("--data", t_data, "dataset directory")->required();
  train->add_option("--config", t_config, "JSON config file (strict keys)");
  train->add_option("--seed", t_seed, "seed override");
  train->add_option("--ablation", t_ablation, "none|cbm|no_drc|vanilla_vae");
  train->add_option("--batch-size", t_batch, "batch size override");
  train->add_option("--lr", t_lr, "learning rate override");
  train->add_option("--beta", t_beta, "KL weight override");
  train->add_option("--out", t_out, "output directory");

  // ---- eval --------------------------------------------------------------
  auto* eval = app.add_subcommand("eval", "accuracy, concept error and saliency IoU");
  std::string e_ckpt, e_data, e_split = "test", e_out;
  eval->add_option("--ckpt", e_ckpt, "model checkpoint")->required();
  eval->add_option("--data", e_data, "dataset directory")->required();
  eval->add_option("--split", e_split, "train or test");
  eval->add_option("--out", e_out, "output directory");

  // ---- attribute ---------------------------------------------------------
  auto* attr = app.add_subcommand("attribute", "integrated-gradients attribution");
  std::string a_ckpt, a_data, a_concept, a_out;
  int a_top = 2, a_samples = 4;
  attr->add_option("--ckpt", a_ckpt, "model checkpoint")->required();
  attr->add_option("--data", a_data, "dataset directory")->required();
  attr->add_option("--concept", a_concept, "concept name, e.g. is_square")->required();
  attr->add_option("--top", a_top, "number of top dimensions");
  attr->add_option("--samples", a_samples, "number of test samples");
  attr->add_option("--out", a_out, "output directory");

  // ---- traverse ----------------------------------------------------------
  auto* trav = app.add_subcommand("traverse", "latent dimension sweep frames");
  std::string v_ckpt, v_data, v_out;
  int v_sample = 0, v_dim = 0, v_steps = 8;
  double v_lo = -2.0, v_hi = 2.0;
  trav->add_option("--ckpt", v_ckpt, "model checkpoint")->required();
  trav->add_option("--data", v_data, "dataset directory")->required();
  trav->add_option("--sample", v_sample, "test sample index");
  trav->add_option("--dim", v_dim, "latent dimension")->required();
  trav->add_option("--lo", v_lo, "sweep start");
  trav->add_option("--hi", v_hi, "sweep end");
  trav->add_option("--steps", v_steps, "frames to emit");
  trav->add_option("--out", v_out, "output directory");

  // ---- intervene ---------------------------------------------------------
  auto* inter = app.add_subcommand("intervene", "test-time intervention curve");
  std::string i_ckpt, i_data, i_fractions = "0,0.25,0.5,0.75,1", i_out;
  std::uint64_t i_seed = 0;
  bool i_random = false;
  inter->add_option("--ckpt", i_ckpt, "model checkpoint")->required();
  inter->add_option("--data", i_data, "dataset directory")->required();
  inter->add_option("--fractions", i_fractions, "ascending fractions in [0,1]");
  inter->add_option("--seed", i_seed, "seed for random-order mode");
  inter->add_flag("--random-order", i_random, "random concept order instead of most-deviant");
  inter->add_option("--out", i_out, "output CSV path");

  // ---- head-weights ------------------------------------------------------
  auto* headw = app.add_subcommand("head-weights", "export task-head weights as CSV");
  std::string h_ckpt, h_out;
  headw->add_option("--ckpt", h_ckpt, "model checkpoint")->required();
  headw->add_option("--out", h_out, "output CSV path");

  CLI11_PARSE(app, argc, argv);

  if (workers > 0) colidr_set_workers(workers);

  if (gen->parsed()) {
    nlohmann::json opts{{"count", g_count},
                        {"size", g_size},
                        {"task", g_task},
                        {"seed", g_seed},
                        {"train_fraction", g_train_fraction}};
    std::string out = resolve_out(g_out, "generate");
    return report(colidr_generate_dataset(opts.dump().c_str(), out.c_str()), "generate");
  }

  if (train->parsed()) {
    nlohmann::json cfg = nlohmann::json::object();
    if (!t_config.empty()) {
      std::ifstream is(t_config);
      if (!is.is_open()) {
        std::cerr << "colidr: cannot open config '" << t_config << "'\n";
        return 1;
      }
      try {
        is >> cfg;
      } catch (const nlohmann::json::exception& e) {
        std::cerr << "colidr: config parse error: " << e.what() << "\n";
        return 1;
      }
    }
    if (t_seed) cfg["seed"] = *t_seed;
    if (!t_ablation.empty()) cfg["ablation"] = t_ablation;
    if (t_batch) cfg["batch_size"] = *t_batch;
    if (t_lr) cfg["lr"] = *t_lr;
    if (t_beta) cfg["beta"] = *t_beta;
    std::string out = resolve_out(t_out, "train");
    return report(colidr_train(t_data.c_str(), cfg.dump().c_str(), out.c_str()), "train");
  }

  if (eval->parsed()) {
    ModelHandle m;
    DatasetHandle d;
    if (int rc = open_pair(e_ckpt, e_data, m, d)) return rc;
    std::string out = resolve_out(e_out, "eval");
    return report(colidr_evaluate(m.ptr, d.ptr, e_split.c_str(), out.c_str()), "eval");
  }

  if (attr->parsed()) {
    ModelHandle m;
    DatasetHandle d;
    if (int rc = open_pair(a_ckpt, a_data, m, d)) return rc;
    std::string out = resolve_out(a_out, "attribute");
    return report(
        colidr_attribute(m.ptr, d.ptr, a_concept.c_str(), a_top, a_samples, out.c_str()),
        "attribute");
  }

  if (trav->parsed()) {
    ModelHandle m;
    DatasetHandle d;
    if (int rc = open_pair(v_ckpt, v_data, m, d)) return rc;
    std::string out = resolve_out(v_out, "traverse");
    return report(
        colidr_traverse(m.ptr, d.ptr, v_sample, v_dim, v_lo, v_hi, v_steps, out.c_str()),
        "traverse");
  }

  if (inter->parsed()) {
    ModelHandle m;
    DatasetHandle d;
    if (int rc = open_pair(i_ckpt, i_data, m, d)) return rc;
    std::vector<double> fr = parse_fractions(i_fractions);
    std::string out = resolve_out(i_out, "intervene");
    return report(colidr_intervene(m.ptr, d.ptr, fr.data(), fr.size(), i_seed,
                                   i_random ? 1 : 0, out.c_str()),
                  "intervene");
  }

  if (headw->parsed()) {
    ModelHandle m;
    if (int rc = report(colidr_model_open(h_ckpt.c_str(), &m.ptr), "opening checkpoint"))
      return rc;
    std::string out = resolve_out(h_out, "head-weights");
    return report(colidr_export_head_weights(m.ptr, out.c_str()), "head-weights");
  }

  return 0;
}
