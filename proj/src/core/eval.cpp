#include "core/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "core/ops.hpp"

namespace colidr {

// ---------------------------------------------------------------------------
// Split metrics
// ---------------------------------------------------------------------------

double concept_error(const std::vector<double>& scores, const std::vector<double>& labels,
                     ConceptErrorKind kind) {
  CLDR_CHECK(scores.size() == labels.size() && !scores.empty(), ErrorKind::ShapeMismatch,
             "concept_error: " << scores.size() << " scores vs " << labels.size()
                               << " labels");
  if (kind == ConceptErrorKind::Rmse) {
    double acc = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      double d = scores[i] - labels[i];
      acc += d * d;
    }
    return std::sqrt(acc / static_cast<double>(scores.size()));
  }
  double miss = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i)
    miss += (std::llround(scores[i]) != std::llround(labels[i])) ? 1.0 : 0.0;
  return miss / static_cast<double>(scores.size());
}

namespace {

Tensor gather_rows(const Tensor& src, const std::vector<int>& rows) {
  Shape s = src.shape;
  std::size_t stride = src.numel() / static_cast<std::size_t>(s[0]);
  s[0] = static_cast<int>(rows.size());
  Tensor out(s);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(src.data.begin() + static_cast<std::size_t>(rows[i]) * stride, stride,
                out.data.begin() + i * stride);
  return out;
}

}  // namespace

SplitPredictions predict_split(Model& model, const SplitData& split,
                               const std::vector<int>* indices, int batch_size) {
  std::vector<int> rows;
  if (indices) {
    rows = *indices;
  } else {
    rows.resize(static_cast<std::size_t>(split.count()));
    std::iota(rows.begin(), rows.end(), 0);
  }
  const int n = static_cast<int>(rows.size());
  SplitPredictions out;
  out.scores = Tensor({n, model.cfg.n_total});
  out.mu = Tensor({n, model.cfg.latent});
  out.predicted.resize(static_cast<std::size_t>(n));

  for (int at = 0; at < n; at += batch_size) {
    int bn = std::min(batch_size, n - at);
    std::vector<int> brows(rows.begin() + at, rows.begin() + at + bn);
    Tensor images = gather_rows(split.images, brows);
    Tape t(false);
    Tensor noise = Tensor::zeros({bn, model.cfg.latent});  // unused in inference
    auto fwd = model.forward(t, t.leaf(std::move(images)), noise, false, false);
    const Tensor& sc = fwd.scores.tensor();
    const Tensor& mu = fwd.post.mu.tensor();
    const Tensor& probs = fwd.pred.probs.tensor();
    std::copy(sc.data.begin(), sc.data.end(),
              out.scores.data.begin() + static_cast<std::size_t>(at) * model.cfg.n_total);
    std::copy(mu.data.begin(), mu.data.end(),
              out.mu.data.begin() + static_cast<std::size_t>(at) * model.cfg.latent);
    for (int i = 0; i < bn; ++i) {
      const double* row = &probs.data[static_cast<std::size_t>(i) * model.cfg.task_classes];
      int best = 0;
      for (int c = 1; c < model.cfg.task_classes; ++c)
        if (row[c] > row[best]) best = c;
      out.predicted[static_cast<std::size_t>(at + i)] = best;
    }
  }
  return out;
}

SplitMetrics evaluate_split(Model& model, const SplitData& split,
                            const std::vector<int>* indices, int batch_size) {
  std::vector<int> rows;
  if (indices) {
    rows = *indices;
  } else {
    rows.resize(static_cast<std::size_t>(split.count()));
    std::iota(rows.begin(), rows.end(), 0);
  }
  SplitPredictions pred = predict_split(model, split, &rows, batch_size);

  SplitMetrics m;
  m.sample_count = static_cast<int>(rows.size());
  int correct = 0;
  std::vector<double> flat_scores, flat_labels;
  const int n_annot = model.cfg.n_annotated;
  const int n_concepts = split.concepts.dim(1);
  CLDR_CHECK(n_annot <= n_concepts, ErrorKind::ShapeMismatch,
             "evaluate_split: model expects " << n_annot << " annotated concepts, dataset has "
                                              << n_concepts);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    int r = rows[i];
    if (pred.predicted[i] == split.labels[static_cast<std::size_t>(r)]) ++correct;
    for (int j = 0; j < n_annot; ++j) {
      flat_scores.push_back(pred.scores.data[i * model.cfg.n_total + static_cast<std::size_t>(j)]);
      flat_labels.push_back(
          split.concepts.data[static_cast<std::size_t>(r) * n_concepts + j]);
    }
  }
  m.task_accuracy = static_cast<double>(correct) / static_cast<double>(rows.size());
  m.concept_rmse = concept_error(flat_scores, flat_labels, ConceptErrorKind::Rmse);
  m.concept_zero_one = concept_error(flat_scores, flat_labels, ConceptErrorKind::ZeroOne);
  return m;
}

// ---------------------------------------------------------------------------
// Integrated gradients
// ---------------------------------------------------------------------------

ScoreFn concept_score_fn(Model& model, int concept_idx) {
  CLDR_CHECK(0 <= concept_idx && concept_idx < model.cfg.n_total, ErrorKind::InvalidArgument,
             "concept index " << concept_idx << " out of [0, " << model.cfg.n_total << ")");
  Model* m = &model;
  // attribute the pre-sigmoid concept logit: once scores saturate, the
  // sigmoid output barely moves between baseline and input, which makes the
  // completeness ratio ill-conditioned and the attributions vanish
  return [m, concept_idx](const std::vector<double>& z, std::vector<double>* grad) {
    CLDR_CHECK(z.size() == static_cast<std::size_t>(m->cfg.latent), ErrorKind::ShapeMismatch,
               "score_fn: z has " << z.size() << " dims, expected " << m->cfg.latent);
    Tape t(grad != nullptr);
    Tensor zt({1, m->cfg.latent}, std::vector<double>(z));
    zt.requires_grad = grad != nullptr;
    Value zv = t.leaf(std::move(zt));
    Value logit_row;
    if (m->is_cbm()) {
      logit_row = m->cbm_concepts.forward(t, zv);
    } else {
      logit_row = m->aggdec.aggregate(t, zv).logits;
    }
    Value score = slice_cols(logit_row, concept_idx, concept_idx + 1);
    if (grad) {
      t.backward(score);
      const Tensor& g = t.grad_of(zv);
      grad->assign(g.data.begin(), g.data.end());
    }
    return score.tensor().data[0];
  };
}

double IgResult::completeness_gap() const {
  double total = 0.0;
  for (double a : attributions) total += a;
  double delta = f_input - f_baseline;
  return std::abs(total - delta) / (std::abs(delta) > 0 ? std::abs(delta) : 1.0);
}

IgResult integrated_gradients(const ScoreFn& fn, const std::vector<double>& z,
                              const std::vector<double>& baseline, int steps) {
  CLDR_CHECK(steps >= 1, ErrorKind::InvalidArgument, "integrated_gradients: steps >= 1");
  CLDR_CHECK(z.size() == baseline.size(), ErrorKind::ShapeMismatch,
             "integrated_gradients: z and baseline dims differ");
  const std::size_t k = z.size();
  IgResult res;
  res.attributions.assign(k, 0.0);
  std::vector<double> point(k), grad;
  for (int s = 0; s < steps; ++s) {
    double alpha = (static_cast<double>(s) + 0.5) / static_cast<double>(steps);
    for (std::size_t j = 0; j < k; ++j)
      point[j] = baseline[j] + alpha * (z[j] - baseline[j]);
    fn(point, &grad);
    CLDR_CHECK(grad.size() == k, ErrorKind::Internal, "score_fn returned bad gradient size");
    for (std::size_t j = 0; j < k; ++j) {
      CLDR_CHECK(std::isfinite(grad[j]), ErrorKind::Numeric,
                 "integrated_gradients: non-finite gradient at step " << s);
      res.attributions[j] += grad[j];
    }
  }
  for (std::size_t j = 0; j < k; ++j)
    res.attributions[j] *= (z[j] - baseline[j]) / static_cast<double>(steps);
  res.f_input = fn(z, nullptr);
  res.f_baseline = fn(baseline, nullptr);
  return res;
}

AttributionMap to_attribution_map(const std::vector<double>& attributions) {
  AttributionMap map;
  map.dim_scores.resize(attributions.size());
  double mx = 0.0;
  for (std::size_t i = 0; i < attributions.size(); ++i) {
    map.dim_scores[i] = std::abs(attributions[i]);
    mx = std::max(mx, map.dim_scores[i]);
  }
  if (mx > 0.0)
    for (double& v : map.dim_scores) v /= mx;
  return map;
}

std::vector<int> top_k_dims(const AttributionMap& attr, int k_sel) {
  const int k = static_cast<int>(attr.dim_scores.size());
  CLDR_CHECK(1 <= k_sel && k_sel <= k, ErrorKind::InvalidArgument,
             "top_k_dims: k_sel " << k_sel << " out of [1, " << k << "]");
  std::vector<int> idx(static_cast<std::size_t>(k));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return attr.dim_scores[static_cast<std::size_t>(a)] >
           attr.dim_scores[static_cast<std::size_t>(b)];
  });
  idx.resize(static_cast<std::size_t>(k_sel));
  return idx;
}

// ---------------------------------------------------------------------------
// Saliency and IoU
// ---------------------------------------------------------------------------

SaliencyMask dim_saliency(Model& model, const Tensor& image, int dim) {
  CLDR_CHECK(0 <= dim && dim < model.cfg.latent, ErrorKind::InvalidArgument,
             "dim_saliency: dim " << dim << " out of [0, " << model.cfg.latent << ")");
  const int size = model.cfg.image_size;
  CLDR_CHECK((image.shape == Shape{1, 1, size, size}), ErrorKind::ShapeMismatch,
             "dim_saliency: image " << shape_str(image.shape));

  Tape t;
  Tensor x = image;
  x.requires_grad = true;
  Value xv = t.leaf(std::move(x));
  LatentPosterior post = model.vae.encode(t, xv, false, false);
  t.backward(slice_cols(post.mu, dim, dim + 1));
  const Tensor& g = t.grad_of(xv);

  SaliencyMask out;
  out.size = size;
  out.heat.assign(static_cast<std::size_t>(size) * size, 0.0);
  // gradient-times-input, then 3x3 box mean renormalized at borders. The raw
  // gradient of a position-encoding latent is centroid-like and peaks far
  // away from the sprite; weighting by the input confines the map to the
  // dimension's actual support.
  std::vector<double> mag(g.data.size());
  for (std::size_t i = 0; i < g.data.size(); ++i)
    mag[i] = std::abs(g.data[i] * image.data[i]);
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) {
      double acc = 0.0;
      int cnt = 0;
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          int rr = r + dr, cc = c + dc;
          if (rr < 0 || rr >= size || cc < 0 || cc >= size) continue;
          acc += mag[static_cast<std::size_t>(rr) * size + cc];
          ++cnt;
        }
      out.heat[static_cast<std::size_t>(r) * size + c] = acc / cnt;
    }
  }
  double mx = *std::max_element(out.heat.begin(), out.heat.end());
  if (mx > 0.0)
    for (double& v : out.heat) v /= mx;
  out.binary.resize(out.heat.size());
  for (std::size_t i = 0; i < out.heat.size(); ++i)
    out.binary[i] = out.heat[i] > kSaliencyThreshold;
  return out;
}

double iou(const std::vector<bool>& a, const std::vector<bool>& b) {
  CLDR_CHECK(a.size() == b.size(), ErrorKind::ShapeMismatch,
             "iou: mask sizes " << a.size() << " vs " << b.size());
  long inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += (a[i] && b[i]) ? 1 : 0;
    uni += (a[i] || b[i]) ? 1 : 0;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

IouReport saliency_iou(Model& model, const SplitData& split, int max_samples_per_concept,
                       int ig_steps) {
  const int size = model.cfg.image_size;
  const std::size_t hw = static_cast<std::size_t>(size) * size;
  SplitPredictions pred = predict_split(model, split);

  IouReport rep;
  const int n_annot = model.cfg.n_annotated;
  rep.per_concept_top2.assign(static_cast<std::size_t>(n_annot), 0.0);
  rep.per_concept_top5.assign(static_cast<std::size_t>(n_annot), 0.0);
  const int top_big = std::min(5, model.cfg.latent);

  for (int ci = 0; ci < n_annot; ++ci) {
    ScoreFn fn = concept_score_fn(model, ci);
    double acc2 = 0.0, acc5 = 0.0;
    int used = 0;
    for (int i = 0; i < split.count() && used < max_samples_per_concept; ++i) {
      double score = pred.scores.data[static_cast<std::size_t>(i) * model.cfg.n_total + ci];
      double label =
          split.concepts.data[static_cast<std::size_t>(i) * split.concepts.dim(1) + ci];
      if (std::llround(score) != std::llround(label)) continue;  // mispredicted concept
      std::vector<double> z(pred.mu.data.begin() + static_cast<std::size_t>(i) * model.cfg.latent,
                            pred.mu.data.begin() +
                                static_cast<std::size_t>(i + 1) * model.cfg.latent);
      IgResult ig = integrated_gradients(fn, z, std::vector<double>(z.size(), 0.0), ig_steps);
      AttributionMap map = to_attribution_map(ig.attributions);
      std::vector<int> top = top_k_dims(map, top_big);

      Tensor img({1, 1, size, size});
      std::copy_n(split.images.data.begin() + static_cast<std::size_t>(i) * hw, hw,
                  img.data.begin());
      std::vector<bool> gt(split.masks.begin() + static_cast<std::size_t>(i) * hw,
                           split.masks.begin() + static_cast<std::size_t>(i + 1) * hw);

      double s2 = 0.0, s5 = 0.0;
      for (int r = 0; r < top_big; ++r) {
        SaliencyMask sal = dim_saliency(model, img, top[static_cast<std::size_t>(r)]);
        double v = iou(sal.binary, gt);
        if (r < 2) s2 += v;
        s5 += v;
      }
      acc2 += s2 / 2.0;
      acc5 += s5 / top_big;
      ++used;
    }
    if (used > 0) {
      rep.per_concept_top2[static_cast<std::size_t>(ci)] = acc2 / used;
      rep.per_concept_top5[static_cast<std::size_t>(ci)] = acc5 / used;
    }
    rep.samples_used += used;
  }
  double m2 = 0.0, m5 = 0.0;
  for (int ci = 0; ci < n_annot; ++ci) {
    m2 += rep.per_concept_top2[static_cast<std::size_t>(ci)];
    m5 += rep.per_concept_top5[static_cast<std::size_t>(ci)];
  }
  rep.mean_top2 = m2 / n_annot;
  rep.mean_top5 = m5 / n_annot;
  return rep;
}

// ---------------------------------------------------------------------------
// Latent traversal
// ---------------------------------------------------------------------------

std::vector<Tensor> latent_traversal(Model& model, const std::vector<double>& z, int dim,
                                     double lo, double hi, int steps) {
  CLDR_CHECK(0 <= dim && dim < model.cfg.latent, ErrorKind::InvalidArgument,
             "latent_traversal: dim " << dim << " out of range");
  CLDR_CHECK(lo < hi, ErrorKind::InvalidArgument, "latent_traversal: need lo < hi");
  CLDR_CHECK(steps >= 2, ErrorKind::InvalidArgument, "latent_traversal: steps >= 2");
  CLDR_CHECK(z.size() == static_cast<std::size_t>(model.cfg.latent), ErrorKind::ShapeMismatch,
             "latent_traversal: z has " << z.size() << " dims");
  std::vector<Tensor> frames;
  frames.reserve(static_cast<std::size_t>(steps));
  for (int s = 0; s < steps; ++s) {
    std::vector<double> zs = z;
    zs[static_cast<std::size_t>(dim)] =
        lo + (hi - lo) * static_cast<double>(s) / static_cast<double>(steps - 1);
    Tape t(false);
    Value img = model.vae.decode(t, t.leaf(Tensor({1, model.cfg.latent}, std::move(zs))),
                                 false, false);
    frames.push_back(img.tensor());
  }
  return frames;
}

// ---------------------------------------------------------------------------
// Intervention
// ---------------------------------------------------------------------------

bool intervene(Model& model, const std::vector<double>& scores,
               const std::vector<double>& gt_concepts, int y,
               const std::vector<int>& intervened_indices) {
  CLDR_CHECK(scores.size() == static_cast<std::size_t>(model.cfg.n_total),
             ErrorKind::ShapeMismatch, "intervene: score vector size");
  std::vector<double> patched = scores;
  for (int idx : intervened_indices) {
    CLDR_CHECK(0 <= idx && idx < model.cfg.n_annotated, ErrorKind::InvalidArgument,
               "intervene: index " << idx << " outside the annotated range [0, "
                                   << model.cfg.n_annotated << ")");
    patched[static_cast<std::size_t>(idx)] =
        gt_concepts[static_cast<std::size_t>(idx)] > 0.5 ? 1.0 : 0.0;
  }
  Tape t(false);
  auto pred = model.head.predict(t, t.leaf(Tensor({1, model.cfg.n_total}, std::move(patched))));
  const Tensor& probs = pred.probs.tensor();
  int best = 0;
  for (int c = 1; c < model.cfg.task_classes; ++c)
    if (probs.data[static_cast<std::size_t>(c)] > probs.data[static_cast<std::size_t>(best)])
      best = c;
  return best == y;
}

std::vector<InterventionResult> intervention_curve(Model& model, const SplitData& split,
                                                   const std::vector<double>& fractions,
                                                   std::uint64_t seed,
                                                   InterventionOrder order) {
  for (std::size_t i = 0; i + 1 < fractions.size(); ++i)
    CLDR_CHECK(fractions[i] <= fractions[i + 1], ErrorKind::InvalidArgument,
               "intervention_curve: fractions must be sorted ascending");
  for (double p : fractions)
    CLDR_CHECK(0.0 <= p && p <= 1.0, ErrorKind::InvalidArgument,
               "intervention_curve: fraction " << p << " outside [0, 1]");

  SplitPredictions pred = predict_split(model, split);
  std::vector<int> wrong;
  for (int i = 0; i < split.count(); ++i)
    if (pred.predicted[static_cast<std::size_t>(i)] != split.labels[static_cast<std::size_t>(i)])
      wrong.push_back(i);

  const int n = model.cfg.n_annotated;
  const int n_cols = split.concepts.dim(1);
  std::vector<InterventionResult> out;
  Rng rng = Rng::substream(seed, "intervention");
  for (double p : fractions) {
    InterventionResult res;
    res.fraction_intervened = p;
    res.sample_count = static_cast<int>(wrong.size());
    if (wrong.empty()) {
      out.push_back(res);
      continue;
    }
    int count = static_cast<int>(std::llround(p * n));
    int corrected = 0;
    for (int i : wrong) {
      std::vector<double> scores(
          pred.scores.data.begin() + static_cast<std::size_t>(i) * model.cfg.n_total,
          pred.scores.data.begin() + static_cast<std::size_t>(i + 1) * model.cfg.n_total);
      std::vector<double> gt(n);
      for (int j = 0; j < n; ++j)
        gt[static_cast<std::size_t>(j)] =
            split.concepts.data[static_cast<std::size_t>(i) * n_cols + j];
      std::vector<int> idx(static_cast<std::size_t>(n));
      std::iota(idx.begin(), idx.end(), 0);
      if (order == InterventionOrder::MostDeviantFirst) {
        std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
          double da = std::abs(scores[static_cast<std::size_t>(a)] -
                               gt[static_cast<std::size_t>(a)]);
          double db = std::abs(scores[static_cast<std::size_t>(b)] -
                               gt[static_cast<std::size_t>(b)]);
          return da > db;
        });
      } else {
        for (int j = n - 1; j > 0; --j)
          std::swap(idx[static_cast<std::size_t>(j)],
                    idx[rng.uniform_index(static_cast<std::uint64_t>(j) + 1)]);
      }
      idx.resize(static_cast<std::size_t>(count));
      if (intervene(model, scores, gt, split.labels[static_cast<std::size_t>(i)], idx))
        ++corrected;
    }
    res.corrected_rate = static_cast<double>(corrected) / static_cast<double>(wrong.size());
    out.push_back(res);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Writers
// ---------------------------------------------------------------------------

void write_pgm(const std::string& path, int h, int w, const std::vector<double>& gray01) {
  CLDR_CHECK(gray01.size() == static_cast<std::size_t>(h) * w, ErrorKind::ShapeMismatch,
             "write_pgm: " << gray01.size() << " pixels vs " << h << "x" << w);
  std::ofstream os(path, std::ios::binary);
  CLDR_CHECK(os.is_open(), ErrorKind::Io, "cannot write '" << path << "'");
  os << "P5\n" << w << " " << h << "\n255\n";
  for (double v : gray01) {
    double c = std::clamp(v, 0.0, 1.0);
    unsigned char byte = static_cast<unsigned char>(std::llround(c * 255.0));
    os.put(static_cast<char>(byte));
  }
  CLDR_CHECK(os.good(), ErrorKind::Io, "write failed for '" << path << "'");
}

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<double>>& rows) {
  std::ofstream os(path);
  CLDR_CHECK(os.is_open(), ErrorKind::Io, "cannot write '" << path << "'");
  for (std::size_t i = 0; i < header.size(); ++i)
    os << (i ? "," : "") << header[i];
  os << "\n";
  char buf[64];
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.12g", row[i]);
      os << (i ? "," : "") << buf;
    }
    os << "\n";
  }
  CLDR_CHECK(os.good(), ErrorKind::Io, "write failed for '" << path << "'");
}

nlohmann::json EvalSummary::to_json() const {
  return nlohmann::json{{"task_accuracy", task_accuracy},
                        {"concept_error", concept_error},
                        {"mean_iou_top2", mean_iou_top2},
                        {"mean_iou_top5", mean_iou_top5}};
}

}  // namespace colidr
