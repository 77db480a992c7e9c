#include "core/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "core/eval.hpp"
#include "core/ops.hpp"

namespace colidr {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  CLDR_CHECK(lambda1 >= 0 && lambda2 >= 0 && lambda3 >= 0 && lambda4 >= 0,
             ErrorKind::InvalidArgument, "train config: lambdas must be >= 0");
  CLDR_CHECK(beta >= 0, ErrorKind::InvalidArgument, "train config: beta must be >= 0");
  CLDR_CHECK(lr > 0, ErrorKind::InvalidArgument, "train config: lr must be > 0");
  CLDR_CHECK(grad_clip > 0, ErrorKind::InvalidArgument, "train config: grad_clip > 0");
  CLDR_CHECK(batch_size >= 1, ErrorKind::InvalidArgument, "train config: batch_size >= 1");
  CLDR_CHECK(epochs_stage1 >= 0 && epochs_stage2 >= 0 && epochs_stage3 >= 0,
             ErrorKind::InvalidArgument, "train config: stage epochs must be >= 0");
  CLDR_CHECK(eval_subset >= 1, ErrorKind::InvalidArgument, "train config: eval_subset >= 1");
  ModelConfig mc = model_config(32);
  mc.validate();
}

nlohmann::json TrainConfig::to_json() const {
  return nlohmann::json{
      {"lambda1", lambda1},
      {"lambda2", lambda2},
      {"lambda3", lambda3},
      {"lambda4", lambda4},
      {"beta", beta},
      {"lr", lr},
      {"grad_clip", grad_clip},
      {"batch_size", batch_size},
      {"epochs", {epochs_stage1, epochs_stage2, epochs_stage3}},
      {"seed", seed},
      {"ablation", ablation_name(ablation)},
      {"latent", latent},
      {"n_total", n_total},
      {"n_annotated", n_annotated},
      {"agg_hidden", agg_hidden},
      {"filters", {filters[0], filters[1], filters[2]}},
      {"eval_subset", eval_subset},
  };
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  static const std::array<const char*, 17> known = {
      "lambda1", "lambda2",  "lambda3",     "lambda4",    "beta",       "lr",
      "grad_clip", "batch_size", "epochs",  "seed",       "ablation",   "latent",
      "n_total", "n_annotated", "agg_hidden", "filters",  "eval_subset"};
  CLDR_CHECK(j.is_object(), ErrorKind::InvalidArgument, "train config: expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known)
      if (it.key() == k) {
        ok = true;
        break;
      }
    CLDR_CHECK(ok, ErrorKind::InvalidArgument,
               "train config: unknown key '" << it.key() << "'");
  }
  TrainConfig c;
  try {
    c.lambda1 = j.value("lambda1", c.lambda1);
    c.lambda2 = j.value("lambda2", c.lambda2);
    c.lambda3 = j.value("lambda3", c.lambda3);
    c.lambda4 = j.value("lambda4", c.lambda4);
    c.beta = j.value("beta", c.beta);
    c.lr = j.value("lr", c.lr);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.batch_size = j.value("batch_size", c.batch_size);
    if (j.contains("epochs")) {
      auto e = j.at("epochs");
      CLDR_CHECK(e.is_array() && e.size() == 3, ErrorKind::InvalidArgument,
                 "train config: epochs must be [stage1, stage2, stage3]");
      c.epochs_stage1 = e[0].get<int>();
      c.epochs_stage2 = e[1].get<int>();
      c.epochs_stage3 = e[2].get<int>();
    }
    c.seed = j.value("seed", c.seed);
    if (j.contains("ablation")) c.ablation = ablation_from_name(j.at("ablation"));
    c.latent = j.value("latent", c.latent);
    c.n_total = j.value("n_total", c.n_total);
    c.n_annotated = j.value("n_annotated", c.n_annotated);
    c.agg_hidden = j.value("agg_hidden", c.agg_hidden);
    if (j.contains("filters")) {
      auto f = j.at("filters");
      CLDR_CHECK(f.is_array() && f.size() == 3, ErrorKind::InvalidArgument,
                 "train config: filters must have 3 entries");
      c.filters = {f[0].get<int>(), f[1].get<int>(), f[2].get<int>()};
    }
    c.eval_subset = j.value("eval_subset", c.eval_subset);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::InvalidArgument, std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

ModelConfig TrainConfig::model_config(int image_size) const {
  ModelConfig mc;
  mc.image_size = image_size;
  mc.latent = latent;
  mc.n_total = n_total;
  mc.n_annotated = n_annotated;
  mc.filters = filters;
  mc.agg_hidden = agg_hidden;
  mc.beta = beta;
  mc.ablation = ablation;
  return mc;
}

double TrainConfig::effective_lambda3() const {
  return ablation == Ablation::NoDrc ? 0.0 : lambda3;
}

// ---------------------------------------------------------------------------
// Stage weighting / freezing
// ---------------------------------------------------------------------------

StageWeights stage_weights(int stage, const TrainConfig& cfg) {
  CLDR_CHECK(stage >= 1 && stage <= 3, ErrorKind::InvalidArgument,
             "stage must be 1, 2 or 3, got " << stage);
  StageWeights w;
  w.beta = cfg.model_config(32).effective_beta();
  switch (stage) {
    case 1:
      // VAE alone, every other term off
      w.train_vae = true;
      break;
    case 2:
      // concept mappings only: lambda2 = 0, VAE frozen
      w.lambda1 = cfg.lambda1;
      w.lambda3 = cfg.effective_lambda3();
      w.lambda4 = cfg.lambda4;
      w.train_concepts = true;
      break;
    case 3:
      w.lambda1 = cfg.lambda1;
      w.lambda2 = cfg.lambda2;
      w.lambda3 = cfg.effective_lambda3();
      w.lambda4 = cfg.lambda4;
      w.train_vae = true;
      w.train_concepts = true;
      w.train_head = true;
      break;
  }
  return w;
}

// ---------------------------------------------------------------------------
// Objective
// ---------------------------------------------------------------------------

BatchLoss total_loss(Tape& t, Model& model, const Tensor& images,
                     const Tensor& concept_labels, const std::vector<int>& task_labels,
                     const Tensor& noise, const Tensor& pos_weight,
                     const StageWeights& w, bool vae_grad, bool update_stats) {
  BatchLoss out;
  const bool cbm = model.is_cbm();
  const bool concept_path =
      w.lambda1 > 0 || w.lambda2 > 0 || w.lambda3 > 0 || w.lambda4 > 0 ||
      w.train_concepts || w.train_head;

  Value z;             // sampled latent on the main tape
  Value elbo_value;    // on-tape ELBO when the VAE trains
  double elbo_scalar = 0.0;

  if (vae_grad) {
    Value x_leaf = t.constant(images);
    auto fwd_post = model.vae.encode(t, x_leaf, true, update_stats);
    if (cbm) {
      z = fwd_post.mu;
    } else {
      z = reparameterize(t, fwd_post, noise);
    }
    Value x_hat = model.vae.decode(t, z, true, update_stats);
    Value recon = reconstruction_mse(x_leaf, x_hat);
    out.breakdown.recon = recon.scalar();
    if (cbm || w.beta == 0.0) {
      elbo_value = recon;
      out.breakdown.kl = cbm ? 0.0 : kl_divergence(fwd_post).scalar();
    } else {
      Value kl = kl_divergence(fwd_post);
      out.breakdown.kl = kl.scalar();
      elbo_value = add(recon, scale(kl, w.beta));
    }
    elbo_scalar = elbo_value.scalar();
  } else {
    // frozen VAE: inference-mode encode off-tape; the decoder is untouched
    // this stage, so the ELBO is logged from a per-epoch pass in run_epoch
    // instead of being recomputed every batch
    Tape frozen(false);
    frozen.set_check_finite(false);  // guarded by the loss-term checks below
    auto post = model.vae.encode(frozen, frozen.leaf(images), false, false);
    const Tensor& mu = post.mu.tensor();
    const Tensor& lv = post.log_var.tensor();
    Tensor z_data = mu;
    if (!cbm) {
      for (std::size_t i = 0; i < z_data.numel(); ++i)
        z_data.data[i] = mu.data[i] + std::exp(0.5 * lv.data[i]) * noise.data[i];
    }
    out.breakdown.kl = cbm ? 0.0 : kl_divergence(post).scalar();
    z = t.constant(std::move(z_data));
  }
  out.breakdown.elbo = elbo_scalar;

  std::vector<Value> terms;
  if (vae_grad) terms.push_back(elbo_value);

  if (concept_path) {
    Value logits, scores, z_prime, z_hat;
    if (cbm) {
      logits = model.cbm_concepts.forward(t, z);
      scores = sigmoid(logits);
    } else {
      auto agg = model.aggdec.aggregate(t, z);
      z_prime = agg.z_prime;
      logits = agg.logits;
      scores = agg.scores;
      if (w.lambda3 > 0 || w.train_concepts) {
        z_hat = model.aggdec.decompose(t, scores).z_hat;
      }
    }
    if (w.lambda1 > 0) {
      Value con = concept_loss(logits, model.cfg.n_annotated, concept_labels, pos_weight);
      out.breakdown.con = w.lambda1 * con.scalar();
      terms.push_back(scale(con, w.lambda1));
    }
    if (w.lambda2 > 0) {
      auto pred = model.head.predict(t, scores);
      Value pl = pred_loss(pred, task_labels);
      out.breakdown.pred = w.lambda2 * pl.scalar();
      terms.push_back(scale(pl, w.lambda2));
    }
    if (!cbm && w.lambda3 > 0) {
      Value drc = drc_loss(z, z_hat);
      out.breakdown.drc = w.lambda3 * drc.scalar();
      terms.push_back(scale(drc, w.lambda3));
    }
    if (!cbm && w.lambda4 > 0) {
      Value sp = sparsity_penalty(z_prime);
      out.breakdown.sparsity = w.lambda4 * sp.scalar();
      terms.push_back(scale(sp, w.lambda4));
    }
  }

  CLDR_CHECK(!terms.empty() || !vae_grad, ErrorKind::Internal, "total_loss: empty objective");
  Value total;
  if (terms.empty()) {
    total = t.constant(Tensor::scalar(0.0));
  } else {
    total = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
  }
  if (!vae_grad) total = add_scalar(total, elbo_scalar);  // constant shift, no gradient
  out.total = total;
  out.breakdown.total = out.breakdown.elbo + out.breakdown.con + out.breakdown.pred +
                        out.breakdown.drc + out.breakdown.sparsity;
  for (double v : {out.breakdown.total, out.breakdown.elbo, out.breakdown.con,
                   out.breakdown.pred, out.breakdown.drc, out.breakdown.sparsity}) {
    CLDR_CHECK(std::isfinite(v), ErrorKind::Numeric,
               "total_loss: non-finite term in breakdown (total=" << out.breakdown.total
                                                                  << ")");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

Trainer::Trainer(const TrainConfig& cfg, const Dataset& data) : cfg_(cfg), data_(data) {
  cfg_.validate();
  CLDR_CHECK(cfg_.n_annotated <= data.train.concepts.dim(1), ErrorKind::InvalidArgument,
             "trainer: config expects " << cfg_.n_annotated
                                        << " annotated concepts, dataset provides "
                                        << data.train.concepts.dim(1));
  pos_weight_ = concept_pos_weights(data.train.concepts, cfg_.n_annotated);
  int n_eval = std::min(cfg_.eval_subset, data.test.count());
  eval_rows_.resize(static_cast<std::size_t>(n_eval));
  std::iota(eval_rows_.begin(), eval_rows_.end(), 0);
}

EpochRecord Trainer::run_epoch(int stage, int epoch, Model& model, Adam& opt,
                               Rng& shuffle_rng, Rng& noise_rng) {
  auto t0 = std::chrono::steady_clock::now();
  const StageWeights w = stage_weights(stage, cfg_);
  const SplitData& train = data_.train;
  const int n = train.count();
  const int hw = data_.image_size * data_.image_size;
  const int n_cols = train.concepts.dim(1);

  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  for (int i = n - 1; i > 0; --i)
    std::swap(order[static_cast<std::size_t>(i)],
              order[shuffle_rng.uniform_index(static_cast<std::uint64_t>(i) + 1)]);

  ParamRefs params = model.params();
  LossBreakdown sum;
  int batches = 0;
  for (int at = 0; at < n; at += cfg_.batch_size) {
    const int bn = std::min(cfg_.batch_size, n - at);
    Tensor images({bn, 1, data_.image_size, data_.image_size});
    Tensor concepts({bn, cfg_.n_annotated});
    std::vector<int> labels(static_cast<std::size_t>(bn));
    for (int i = 0; i < bn; ++i) {
      int r = order[static_cast<std::size_t>(at + i)];
      std::copy_n(train.images.data.begin() + static_cast<std::size_t>(r) * hw, hw,
                  images.data.begin() + static_cast<std::size_t>(i) * hw);
      for (int j = 0; j < cfg_.n_annotated; ++j)
        concepts.data[static_cast<std::size_t>(i) * cfg_.n_annotated + j] =
            train.concepts.data[static_cast<std::size_t>(r) * n_cols + j];
      labels[static_cast<std::size_t>(i)] = train.labels[static_cast<std::size_t>(r)];
    }
    Tensor noise({bn, cfg_.latent});
    for (auto& v : noise.data) v = noise_rng.normal();

    Tape tape;
    // per-op finite scans off in the hot loop; the loss-breakdown check and
    // the optimizer's gradient check still trip on any non-finite value
    tape.set_check_finite(false);
    BatchLoss loss = total_loss(tape, model, images, concepts, labels, noise, pos_weight_,
                                w, /*vae_grad=*/w.train_vae, /*update_stats=*/w.train_vae);
    tape.backward(loss.total);
    Adam::clip_global_norm(params, cfg_.grad_clip);
    opt.step(params);
    Adam::zero_grads(params);

    sum.total += loss.breakdown.total;
    sum.elbo += loss.breakdown.elbo;
    sum.recon += loss.breakdown.recon;
    sum.kl += loss.breakdown.kl;
    sum.con += loss.breakdown.con;
    sum.pred += loss.breakdown.pred;
    sum.drc += loss.breakdown.drc;
    sum.sparsity += loss.breakdown.sparsity;
    ++batches;
  }

  EpochRecord rec;
  rec.stage = stage;
  rec.epoch = epoch;
  rec.loss = sum;
  if (batches > 0) {
    rec.loss.total /= batches;
    rec.loss.elbo /= batches;
    rec.loss.recon /= batches;
    rec.loss.kl /= batches;
    rec.loss.con /= batches;
    rec.loss.pred /= batches;
    rec.loss.drc /= batches;
    rec.loss.sparsity /= batches;
  }
  if (!w.train_vae) {
    // frozen-VAE stages skip the per-batch decode; log the reconstruction
    // term from one inference pass over a fixed train subsample
    int sub = std::min(512, n);
    Tensor imgs({sub, 1, data_.image_size, data_.image_size});
    std::copy_n(train.images.data.begin(), static_cast<std::size_t>(sub) * hw,
                imgs.data.begin());
    Tape frozen(false);
    Value x = frozen.leaf(std::move(imgs));
    LatentPosterior post = model.vae.encode(frozen, x, false, false);
    Value xh = model.vae.decode(frozen, post.mu, false, false);
    rec.loss.recon = reconstruction_mse(x, xh).scalar();
    rec.loss.elbo = rec.loss.recon + w.beta * rec.loss.kl;
    rec.loss.total += rec.loss.elbo;
  }
  SplitMetrics m = evaluate_split(model, data_.test, &eval_rows_);
  rec.task_accuracy = m.task_accuracy;
  rec.concept_rmse = m.concept_rmse;
  rec.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

void Trainer::train_stage(int stage, Model& model, std::vector<EpochRecord>& log) {
  const StageWeights w = stage_weights(stage, cfg_);
  int epochs = stage == 1   ? cfg_.epochs_stage1
               : stage == 2 ? cfg_.epochs_stage2
                            : cfg_.epochs_stage3;

  for (Parameter* p : model.vae_params()) p->trainable = w.train_vae;
  for (Parameter* p : model.concept_params()) p->trainable = w.train_concepts;
  for (Parameter* p : model.head_params()) p->trainable = w.train_head;

  Adam opt(cfg_.lr);
  Rng shuffle_rng = Rng::substream(cfg_.seed, "shuffle.stage" + std::to_string(stage));
  Rng noise_rng = Rng::substream(cfg_.seed, "noise.stage" + std::to_string(stage));
  for (int e = 0; e < epochs; ++e)
    log.push_back(run_epoch(stage, e, model, opt, shuffle_rng, noise_rng));

  for (Parameter* p : model.params()) p->trainable = true;
}

Model Trainer::run(const std::optional<std::string>& out_dir) {
  Model model(cfg_.model_config(data_.image_size), cfg_.seed);
  log_.clear();
  if (out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(*out_dir, ec);
    CLDR_CHECK(!ec, ErrorKind::Io, "cannot create '" << *out_dir << "'");
  }
  for (int stage = 1; stage <= 3; ++stage) {
    std::vector<EpochRecord> stage_log;
    try {
      train_stage(stage, model, stage_log);
    } catch (const Error& e) {
      // emit the last good checkpoint before propagating
      log_.insert(log_.end(), stage_log.begin(), stage_log.end());
      if (out_dir) {
        model.save(*out_dir + "/stage" + std::to_string(stage) + ".aborted.cldr");
        write_metrics_csv(*out_dir + "/metrics.csv", log_);
      }
      throw Error(e.kind(), std::string("stage ") + std::to_string(stage) +
                                " aborted: " + e.what());
    }
    log_.insert(log_.end(), stage_log.begin(), stage_log.end());
    if (out_dir) model.save(*out_dir + "/stage" + std::to_string(stage) + ".cldr");
  }
  if (out_dir) write_metrics_csv(*out_dir + "/metrics.csv", log_);
  return model;
}

void write_metrics_csv(const std::string& path, const std::vector<EpochRecord>& log) {
  // wall time deliberately omitted: metrics files must be byte-identical
  // across reruns with the same seed
  std::ofstream os(path);
  CLDR_CHECK(os.is_open(), ErrorKind::Io, "cannot write '" << path << "'");
  os << "stage,epoch,total,recon,kl,con,pred,drc,sparsity,task_acc,concept_rmse\n";
  char buf[64];
  auto put = [&](double v, bool lead_comma = true) {
    std::snprintf(buf, sizeof buf, "%.12g", v);
    if (lead_comma) os << ",";
    os << buf;
  };
  for (const auto& r : log) {
    os << r.stage << "," << r.epoch;
    put(r.loss.total);
    put(r.loss.recon);
    put(r.loss.kl);
    put(r.loss.con);
    put(r.loss.pred);
    put(r.loss.drc);
    put(r.loss.sparsity);
    put(r.task_accuracy);
    put(r.concept_rmse);
    os << "\n";
  }
  CLDR_CHECK(os.good(), ErrorKind::Io, "write failed for '" << path << "'");
}

}  // namespace colidr
