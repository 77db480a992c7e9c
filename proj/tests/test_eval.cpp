#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "core/eval.hpp"
#include "doctest.h"

using namespace colidr;

namespace {

Model tiny_model(Ablation ab = Ablation::None, std::uint64_t seed = 13) {
  ModelConfig cfg;
  cfg.image_size = 16;
  cfg.latent = 4;
  cfg.n_total = 8;
  cfg.n_annotated = 6;
  cfg.filters = {4, 6, 6};
  cfg.agg_hidden = 8;
  cfg.ablation = ab;
  return Model(cfg, seed);
}

Dataset tiny_dataset(std::uint64_t seed = 19) {
  GenerateConfig g;
  g.count = 120;
  g.size = 16;
  g.task = TaskDef::parse("x>0.5,scale>0.75");
  g.seed = seed;
  return Dataset::generate(g);
}

}  // namespace

TEST_CASE("integrated gradients are exact on linear score functions") {
  std::vector<double> w = {2.0, -1.5, 0.7};
  ScoreFn fn = [&w](const std::vector<double>& z, std::vector<double>* grad) {
    double acc = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) acc += w[i] * z[i];
    if (grad) *grad = w;
    return acc;
  };
  std::vector<double> z = {1.0, 2.0, -0.5};
  for (int steps : {1, 4, 128}) {
    IgResult r = integrated_gradients(fn, z, {0.0, 0.0, 0.0}, steps);
    for (std::size_t j = 0; j < z.size(); ++j)
      CHECK(r.attributions[j] == doctest::Approx(w[j] * z[j]).epsilon(1e-12));
    CHECK(r.completeness_gap() < 1e-12);
  }
}

TEST_CASE("integrated gradients satisfy completeness on a quadratic") {
  ScoreFn fn = [](const std::vector<double>& z, std::vector<double>* grad) {
    if (grad) *grad = {2.0 * z[0]};
    return z[0] * z[0];
  };
  IgResult r = integrated_gradients(fn, {2.0}, {0.0}, 128);
  // exact for the midpoint rule on quadratics
  CHECK(r.attributions[0] == doctest::Approx(4.0).epsilon(1e-10));
  CHECK(r.f_input - r.f_baseline == doctest::Approx(4.0));
}

TEST_CASE("attribution maps normalize to max 1 with tie-stable top-k") {
  AttributionMap m = to_attribution_map({0.1, -0.5, 0.3});
  CHECK(m.dim_scores[0] == doctest::Approx(0.2));
  CHECK(m.dim_scores[1] == doctest::Approx(1.0));
  CHECK(m.dim_scores[2] == doctest::Approx(0.6));
  CHECK(top_k_dims(m, 2) == std::vector<int>{1, 2});

  AttributionMap equal = to_attribution_map({0.5, 0.5, 0.5});
  CHECK(top_k_dims(equal, 2) == std::vector<int>{0, 1});

  AttributionMap perm = to_attribution_map({0.3, 0.9, 0.1});
  CHECK(top_k_dims(perm, 3) == std::vector<int>{1, 0, 2});

  AttributionMap zeros = to_attribution_map({0.0, 0.0});
  CHECK(zeros.dim_scores[0] == 0.0);

  CHECK_THROWS_AS(top_k_dims(m, 4), Error);
  CHECK_THROWS_AS(top_k_dims(m, 0), Error);
}

TEST_CASE("iou basics") {
  std::vector<bool> a = {true, true, false, false};
  CHECK(iou(a, a) == doctest::Approx(1.0));
  std::vector<bool> b = {false, false, true, true};
  CHECK(iou(a, b) == doctest::Approx(0.0));
  std::vector<bool> c = {true, false, true, false};
  CHECK(iou(a, c) == doctest::Approx(1.0 / 3.0));
  CHECK(iou(a, c) == iou(c, a));
  std::vector<bool> empty(4, false);
  CHECK(iou(empty, empty) == 0.0);
  std::vector<bool> other(5, false);
  CHECK_THROWS_AS(iou(a, other), Error);
}

TEST_CASE("iou of half-overlapping 100-pixel masks is 1/3") {
  std::vector<bool> a(300, false), b(300, false);
  for (int i = 0; i < 100; ++i) a[static_cast<std::size_t>(i)] = true;
  for (int i = 50; i < 150; ++i) b[static_cast<std::size_t>(i)] = true;
  CHECK(iou(a, b) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("concept_error closed forms") {
  CHECK(concept_error({1.0, 0.0}, {1.0, 0.0}, ConceptErrorKind::Rmse) == 0.0);
  CHECK(concept_error({1.0, 0.0}, {1.0, 0.0}, ConceptErrorKind::ZeroOne) == 0.0);
  CHECK(concept_error({0.5, 0.5, 0.5, 0.5}, {1.0, 0.0, 1.0, 0.0},
                      ConceptErrorKind::Rmse) == doctest::Approx(0.5));
  CHECK(concept_error({0.9, 0.2}, {1.0, 1.0}, ConceptErrorKind::ZeroOne) ==
        doctest::Approx(0.5));
  CHECK_THROWS_AS(concept_error({0.5}, {1.0, 0.0}, ConceptErrorKind::Rmse), Error);
}

TEST_CASE("latent traversal emits the requested frames and is continuous") {
  Model m = tiny_model();
  std::vector<double> z = {0.1, -0.2, 0.3, 0.0};
  auto frames = latent_traversal(m, z, 1, -2.0, 2.0, 8);
  CHECK(frames.size() == 8);
  for (const auto& f : frames) CHECK(f.shape == Shape{1, 1, 16, 16});

  auto near = latent_traversal(m, z, 1, 0.5, 0.5 + 1e-9, 2);
  double dist = 0.0;
  for (std::size_t i = 0; i < near[0].numel(); ++i) {
    double d = near[0].data[i] - near[1].data[i];
    dist += d * d;
  }
  CHECK(std::sqrt(dist) < 1e-8);

  CHECK_THROWS_AS(latent_traversal(m, z, 9, -2, 2, 8), Error);
  CHECK_THROWS_AS(latent_traversal(m, z, 1, 2, -2, 8), Error);
  CHECK_THROWS_AS(latent_traversal(m, z, 1, -2, 2, 1), Error);
}

TEST_CASE("dim_saliency normalizes to max 1 and is deterministic") {
  Model m = tiny_model();
  Dataset ds = tiny_dataset();
  Tensor img({1, 1, 16, 16});
  std::copy_n(ds.train.images.data.begin(), 256, img.data.begin());
  SaliencyMask a = dim_saliency(m, img, 0);
  SaliencyMask b = dim_saliency(m, img, 0);
  CHECK(a.heat == b.heat);
  CHECK(a.binary == b.binary);
  CHECK(*std::max_element(a.heat.begin(), a.heat.end()) == doctest::Approx(1.0));
  for (std::size_t i = 0; i < a.heat.size(); ++i)
    CHECK(a.binary[i] == (a.heat[i] > 150.0 / 255.0));
  CHECK_THROWS_AS(dim_saliency(m, img, 7), Error);
}

TEST_CASE("intervene replaces annotated scores with ground truth") {
  Model m = tiny_model();
  // head that is perfect on true concepts for the conjunction task
  // label = is_large (idx 3) AND is_right (idx 4)
  m.head.h.w.value = Tensor::zeros({2, 6});
  m.head.h.b.value = Tensor::zeros({2});
  m.head.h.w.value.data[6 + 3] = 10.0;  // class-1 row
  m.head.h.w.value.data[6 + 4] = 10.0;
  m.head.h.b.value.data[1] = -15.0;

  std::vector<double> scores = {0.5, 0.5, 0.5, 0.1, 0.2, 0.5, 0.5, 0.5};  // wrong on 3, 4
  std::vector<double> gt = {0.0, 1.0, 0.0, 1.0, 1.0, 0.0};
  // prediction from raw scores: logit1 = 10*(0.1+0.2) - 15 = -12 -> class 0; truth is 1
  CHECK_FALSE(intervene(m, scores, gt, 1, {}));          // empty set cannot correct
  CHECK(intervene(m, scores, gt, 1, {0, 1, 2, 3, 4, 5}));  // full truth corrects
  CHECK(intervene(m, scores, gt, 1, {3, 4}));            // the two deviant concepts suffice
  CHECK_THROWS_AS(intervene(m, scores, gt, 1, {6}), Error);  // unannotated index

  // idempotence: replacing a score that already equals its ground-truth value
  std::vector<double> exact = {0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.3, 0.4};
  bool before = intervene(m, exact, gt, 1, {});
  bool after = intervene(m, exact, gt, 1, {0, 3});
  CHECK(before == after);
}

TEST_CASE("intervention curve starts at zero and counts misclassified samples") {
  Model m = tiny_model();
  Dataset ds = tiny_dataset();
  auto curve = intervention_curve(m, ds.test, {0.0, 0.5, 1.0}, 7);
  REQUIRE(curve.size() == 3);
  CHECK(curve[0].fraction_intervened == 0.0);
  if (curve[0].sample_count > 0) CHECK(curve[0].corrected_rate == 0.0);
  for (const auto& r : curve) {
    CHECK(r.sample_count == curve[0].sample_count);
    CHECK(r.corrected_rate >= 0.0);
    CHECK(r.corrected_rate <= 1.0);
  }
  CHECK_THROWS_AS(intervention_curve(m, ds.test, {0.5, 0.1}, 7), Error);
  CHECK_THROWS_AS(intervention_curve(m, ds.test, {0.5, 1.5}, 7), Error);

  // random-order mode runs and stays within bounds
  auto rnd = intervention_curve(m, ds.test, {0.0, 1.0}, 7, InterventionOrder::Random);
  CHECK(rnd.size() == 2);
}

TEST_CASE("evaluate_split and predict_split are deterministic and consistent") {
  Model m = tiny_model();
  Dataset ds = tiny_dataset();
  SplitMetrics a = evaluate_split(m, ds.test);
  SplitMetrics b = evaluate_split(m, ds.test);
  CHECK(a.task_accuracy == b.task_accuracy);
  CHECK(a.concept_rmse == b.concept_rmse);
  CHECK(a.task_accuracy >= 0.0);
  CHECK(a.task_accuracy <= 1.0);
  CHECK(a.sample_count == ds.test.count());

  auto pred = predict_split(m, ds.test);
  CHECK(pred.scores.shape == Shape{ds.test.count(), 8});
  CHECK(pred.mu.shape == Shape{ds.test.count(), 4});
  // batch-size independence of the inference path
  auto pred_small = predict_split(m, ds.test, nullptr, 7);
  CHECK(pred.scores.data == pred_small.scores.data);
  CHECK(pred.predicted == pred_small.predicted);
}

TEST_CASE("saliency IoU report is well-formed on an untrained model") {
  Model m = tiny_model();
  Dataset ds = tiny_dataset();
  IouReport rep = saliency_iou(m, ds.test, 4, 8);
  CHECK(rep.per_concept_top2.size() == 6);
  CHECK(rep.per_concept_top5.size() == 6);
  CHECK(rep.mean_top2 >= 0.0);
  CHECK(rep.mean_top2 <= 1.0);
  CHECK(rep.mean_top5 >= 0.0);
  CHECK(rep.mean_top5 <= 1.0);
}

TEST_CASE("pgm writer emits a valid P5 file") {
  std::string path =
      (std::filesystem::temp_directory_path() / "colidr_test.pgm").string();
  std::vector<double> img(16 * 16);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(i) / 255.0;
  write_pgm(path, 16, 16, img);
  std::ifstream is(path, std::ios::binary);
  std::string magic;
  is >> magic;
  int w, h, maxv;
  is >> w >> h >> maxv;
  CHECK(magic == "P5");
  CHECK(w == 16);
  CHECK(h == 16);
  CHECK(maxv == 255);
  is.get();  // single whitespace after header
  std::vector<char> bytes(std::istreambuf_iterator<char>(is), {});
  REQUIRE(bytes.size() == 256);
  CHECK(static_cast<unsigned char>(bytes[0]) == 0);
  CHECK(static_cast<unsigned char>(bytes[255]) == 255);
  std::remove(path.c_str());
}

TEST_CASE("csv writer emits deterministic numeric rows") {
  std::string path =
      (std::filesystem::temp_directory_path() / "colidr_test.csv").string();
  write_csv(path, {"a", "b"}, {{1.0, 0.25}, {-3.5, 1e-9}});
  std::ifstream is(path);
  std::string l1, l2, l3;
  std::getline(is, l1);
  std::getline(is, l2);
  std::getline(is, l3);
  CHECK(l1 == "a,b");
  CHECK(l2 == "1,0.25");
  CHECK(l3 == "-3.5,1e-09");
  std::remove(path.c_str());
}

TEST_CASE("eval summary serializes the four required keys") {
  EvalSummary s{0.9, 0.1, 0.5, 0.4};
  nlohmann::json j = s.to_json();
  CHECK(j.size() == 4);
  CHECK(j.at("task_accuracy") == 0.9);
  CHECK(j.at("concept_error") == 0.1);
  CHECK(j.at("mean_iou_top2") == 0.5);
  CHECK(j.at("mean_iou_top5") == 0.4);
}
