#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "core/rng.hpp"
#include "core/sprites.hpp"
#include "doctest.h"

using namespace colidr;

namespace {

// Brute-force oracle: count pixel centers inside an axis-aligned square of
// side `side` centered at (cx, cy). Written independently of render_sprite.
int brute_square_pixel_count(double cx, double cy, double side, int size) {
  int count = 0;
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c) {
      double dx = c + 0.5 - cx;
      double dy = r + 0.5 - cy;
      if (std::abs(dx) <= side / 2 && std::abs(dy) <= side / 2) ++count;
    }
  return count;
}

int mask_count(const std::vector<bool>& m) {
  int n = 0;
  for (bool b : m) n += b ? 1 : 0;
  return n;
}

std::vector<char> slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return std::vector<char>(std::istreambuf_iterator<char>(is), {});
}

std::string temp_dir(const char* stem) {
  auto p = std::filesystem::temp_directory_path() / stem;
  std::filesystem::remove_all(p);
  return p.string();
}

FactorSpec centered_square(double scale) {
  FactorSpec f;
  f.shape = SpriteShape::Square;
  f.scale = scale;
  f.orientation = 0.0;
  f.x_pos = 0.5;
  f.y_pos = 0.5;
  return f;
}

}  // namespace

TEST_CASE("centered scale-1 square covers round(side)^2 pixels") {
  for (int size : {16, 32, 64}) {
    auto r = render_sprite(centered_square(1.0), size);
    double side = square_side_px(1.0, size);
    int expect = static_cast<int>(std::llround(side) * std::llround(side));
    CHECK(mask_count(r.mask) == expect);
    CHECK(mask_count(r.mask) ==
          brute_square_pixel_count(0.5 * size, 0.5 * size, side, size));
  }
}

TEST_CASE("image is exactly 1 on the mask and 0 off it") {
  FactorSpec f;
  f.shape = SpriteShape::Heart;
  f.scale = 0.8;
  f.orientation = 1.1;
  f.x_pos = 0.63;
  f.y_pos = 0.37;
  auto r = render_sprite(f, 32);
  CHECK(mask_count(r.mask) > 0);
  for (std::size_t i = 0; i < r.image.size(); ++i)
    CHECK(r.image[i] == (r.mask[i] ? 1.0 : 0.0));
}

TEST_CASE("square has 4-fold rotational symmetry") {
  auto a = render_sprite(centered_square(1.0), 32);
  FactorSpec f = centered_square(1.0);
  f.orientation = std::acos(-1.0) / 2.0;
  auto b = render_sprite(f, 32);
  CHECK(a.mask == b.mask);
}

TEST_CASE("smaller ellipse is strictly contained in the larger one") {
  FactorSpec small, big;
  small.shape = big.shape = SpriteShape::Ellipse;
  small.orientation = big.orientation = 0.7;
  small.x_pos = big.x_pos = 0.45;
  small.y_pos = big.y_pos = 0.6;
  small.scale = 0.5;
  big.scale = 1.0;
  auto rs = render_sprite(small, 32);
  auto rb = render_sprite(big, 32);
  int small_n = mask_count(rs.mask), big_n = mask_count(rb.mask);
  CHECK(small_n > 0);
  CHECK(small_n < big_n);
  for (std::size_t i = 0; i < rs.mask.size(); ++i)
    if (rs.mask[i]) CHECK(rb.mask[i]);
}

TEST_CASE("mask is nonempty at the smallest scale and size") {
  for (auto shape : {SpriteShape::Square, SpriteShape::Ellipse, SpriteShape::Heart}) {
    FactorSpec f;
    f.shape = shape;
    f.scale = 0.5;
    f.orientation = 0.0;
    f.x_pos = 0.2;
    f.y_pos = 0.8;
    auto r = render_sprite(f, 16);
    CHECK(mask_count(r.mask) > 0);
  }
}

TEST_CASE("sprite geometry never reaches beyond the position margin") {
  // Max radius of each shape at scale 1, probed densely on a fine polar
  // grid rendered at high resolution via the inclusion predicate itself:
  // every lit pixel must stay within 0.2*size of the sprite center, which
  // is the distance to the nearest frame edge at extreme positions.
  for (auto shape : {SpriteShape::Square, SpriteShape::Ellipse, SpriteShape::Heart}) {
    for (double orient : {0.0, 0.5, 2.2, 4.0}) {
      FactorSpec f;
      f.shape = shape;
      f.scale = 1.0;
      f.orientation = orient;
      f.x_pos = 0.5;
      f.y_pos = 0.5;
      auto r = render_sprite(f, 64);
      double cx = 0.5 * 64, cy = 0.5 * 64;
      double max_r = 0.0;
      for (int row = 0; row < 64; ++row)
        for (int col = 0; col < 64; ++col)
          if (r.mask[static_cast<std::size_t>(row) * 64 + col])
            max_r = std::max(max_r,
                             std::hypot(col + 0.5 - cx, row + 0.5 - cy));
      CAPTURE(static_cast<int>(shape));
      CAPTURE(orient);
      CHECK(max_r <= 0.2 * 64);
    }
  }
}

TEST_CASE("render is translation-consistent for whole-pixel shifts") {
  FactorSpec f;
  f.shape = SpriteShape::Heart;
  f.scale = 0.9;
  f.orientation = 2.4;
  f.x_pos = 0.4;
  f.y_pos = 0.5;
  auto a = render_sprite(f, 32);
  const int d = 5;
  FactorSpec g = f;
  g.x_pos = f.x_pos + static_cast<double>(d) / 32.0;
  auto b = render_sprite(g, 32);
  for (int r = 0; r < 32; ++r)
    for (int c = 0; c < 32; ++c) {
      bool av = a.mask[static_cast<std::size_t>(r) * 32 + c];
      bool bv = (c + d < 32) ? b.mask[static_cast<std::size_t>(r) * 32 + c + d] : false;
      if (c + d < 32) CHECK(av == bv);
    }
}

TEST_CASE("render rejects out-of-range factors and sizes") {
  FactorSpec f = centered_square(1.2);
  CHECK_THROWS_AS(render_sprite(f, 32), Error);
  f.scale = 0.8;
  f.x_pos = 0.1;
  CHECK_THROWS_AS(render_sprite(f, 32), Error);
  f.x_pos = 0.5;
  CHECK_THROWS_AS(render_sprite(f, 20), Error);
}

TEST_CASE("concept derivation matches its definitions") {
  FactorSpec f;
  f.shape = SpriteShape::Heart;
  f.scale = 0.9;
  f.x_pos = 0.7;
  f.y_pos = 0.3;
  auto bits = derive_concepts(f);
  CHECK(bits == std::array<bool, 6>{false, false, true, true, true, false});

  f.scale = 0.75;  // boundary maps to 0 (strict threshold)
  CHECK_FALSE(derive_concepts(f)[3]);
  f.x_pos = 0.5;
  CHECK_FALSE(derive_concepts(f)[4]);

  CHECK(concept_index("is_square") == 0);
  CHECK(concept_index("is_top") == 5);
  CHECK(concept_index("nope") == -1);
}

TEST_CASE("task labels are the conjunction of the two criterion bits") {
  CHECK(task_label(true, true) == 1);
  CHECK(task_label(true, false) == 0);
  CHECK(task_label(false, true) == 0);
  CHECK(task_label(false, false) == 0);

  TaskDef t = TaskDef::parse("shape=square,x>0.5");
  FactorSpec f = centered_square(1.0);
  f.x_pos = 0.7;
  CHECK(derive_task_label(f, t) == 1);
  f.x_pos = 0.3;
  CHECK(derive_task_label(f, t) == 0);
  f.shape = SpriteShape::Heart;
  f.x_pos = 0.7;
  CHECK(derive_task_label(f, t) == 0);
}

TEST_CASE("task parsing validates structure") {
  CHECK_THROWS_AS(TaskDef::parse("shape=square"), Error);           // one criterion
  CHECK_THROWS_AS(TaskDef::parse("x>0.5,x<0.7"), Error);            // same factor twice
  CHECK_THROWS_AS(TaskDef::parse("shape>1,x>0.5"), Error);          // threshold on shape
  CHECK_THROWS_AS(TaskDef::parse("scale=big,x>0.5"), Error);        // equality on scale
  CHECK_THROWS_AS(TaskDef::parse("shape=blob,x>0.5"), Error);       // unknown shape
  TaskDef t = TaskDef::parse("scale>0.75,y<0.4");
  CHECK(t.a.kind == Criterion::Kind::Greater);
  CHECK(t.b.kind == Criterion::Kind::Less);
  TaskDef back = TaskDef::from_json(t.to_json());
  CHECK(back.str() == t.str());
}

TEST_CASE("marginal positive rate is the product of criterion marginals") {
  // Monte-Carlo oracle over 1e5 independent uniform factor draws.
  TaskDef t = TaskDef::parse("x>0.5,scale>0.75");
  Rng rng(404);
  const int n = 100000;
  int pos = 0, bit_a = 0, bit_b = 0;
  for (int i = 0; i < n; ++i) {
    FactorSpec f;
    f.shape = static_cast<SpriteShape>(rng.uniform_index(3));
    f.scale = rng.uniform(kScaleMin, kScaleMax);
    f.orientation = rng.uniform(0.0, 6.28318);
    f.x_pos = rng.uniform(kPosMin, kPosMax);
    f.y_pos = rng.uniform(kPosMin, kPosMax);
    bool a = eval_criterion(t.a, f);
    bool b = eval_criterion(t.b, f);
    bit_a += a;
    bit_b += b;
    pos += task_label(a, b);
  }
  double pa = static_cast<double>(bit_a) / n;
  double pb = static_cast<double>(bit_b) / n;
  double pab = static_cast<double>(pos) / n;
  CHECK(pab == doctest::Approx(pa * pb).epsilon(0.05));
  CHECK(pa == doctest::Approx(0.5).epsilon(0.03));   // x>0.5 over [0.2, 0.8]
  CHECK(pb == doctest::Approx(0.5).epsilon(0.03));   // scale>0.75 over [0.5, 1.0]
}

TEST_CASE("generated dataset is balanced, split 70/30 and decorrelated") {
  GenerateConfig cfg;
  cfg.count = 1000;
  cfg.size = 16;
  cfg.task = TaskDef::parse("x>0.5,scale>0.75");
  cfg.seed = 99;
  Dataset ds = Dataset::generate(cfg);

  CHECK(ds.train.count() == 700);
  CHECK(ds.test.count() == 300);

  int pos = 0;
  for (int y : ds.train.labels) pos += y;
  for (int y : ds.test.labels) pos += y;
  double frac = static_cast<double>(pos) / cfg.count;
  CHECK(frac >= 0.45);
  CHECK(frac <= 0.55);

  // Pearson correlations between factor columns over both splits, skipping
  // the task-factor pair which the balance rejection intentionally couples.
  auto col = [&](int j) {
    std::vector<double> v;
    for (const SplitData* s : {&ds.train, &ds.test})
      for (int i = 0; i < s->count(); ++i)
        v.push_back(s->factors.data[static_cast<std::size_t>(i) * 5 + j]);
    return v;
  };
  auto pearson = [](const std::vector<double>& a, const std::vector<double>& b) {
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      ma += a[i];
      mb += b[i];
    }
    ma /= a.size();
    mb /= b.size();
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      sab += (a[i] - ma) * (b[i] - mb);
      saa += (a[i] - ma) * (a[i] - ma);
      sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
  };
  // factor columns: 0 shape, 1 scale, 2 orientation, 3 x, 4 y; task pair (1,3)
  for (int i = 0; i < 5; ++i)
    for (int j = i + 1; j < 5; ++j) {
      if ((i == 1 && j == 3)) continue;
      CAPTURE(i);
      CAPTURE(j);
      CHECK(std::abs(pearson(col(i), col(j))) < 0.1);
    }
}

TEST_CASE("is_large samples have larger mean mask area at equal shape") {
  GenerateConfig cfg;
  cfg.count = 400;
  cfg.size = 16;
  cfg.task = TaskDef::parse("x>0.5,y>0.5");
  cfg.seed = 7;
  Dataset ds = Dataset::generate(cfg);
  const std::size_t hw = 16 * 16;
  for (int shape = 0; shape < 3; ++shape) {
    double large_area = 0, small_area = 0;
    int large_n = 0, small_n = 0;
    for (int i = 0; i < ds.train.count(); ++i) {
      if (static_cast<int>(ds.train.factors.data[static_cast<std::size_t>(i) * 5]) != shape)
        continue;
      int area = 0;
      for (std::size_t q = 0; q < hw; ++q) area += ds.train.masks[i * hw + q];
      if (ds.train.concepts.data[static_cast<std::size_t>(i) * 6 + 3] > 0.5) {
        large_area += area;
        ++large_n;
      } else {
        small_area += area;
        ++small_n;
      }
    }
    REQUIRE(large_n > 0);
    REQUIRE(small_n > 0);
    CHECK(large_area / large_n > small_area / small_n);
  }
}

TEST_CASE("dataset generation is byte-identical for a fixed seed") {
  GenerateConfig cfg;
  cfg.count = 120;
  cfg.size = 16;
  cfg.task = TaskDef::parse("shape=ellipse,y>0.5");
  cfg.seed = 31337;

  std::string d1 = temp_dir("colidr_ds_a");
  std::string d2 = temp_dir("colidr_ds_b");
  Dataset::generate(cfg).save(d1);
  Dataset::generate(cfg).save(d2);
  for (const char* f : {"dataset.cldr", "masks.cldb", "manifest.json"}) {
    CAPTURE(f);
    CHECK(slurp(d1 + "/" + f) == slurp(d2 + "/" + f));
  }

  // regeneration from the manifest parameters reproduces identical bytes
  Dataset loaded = Dataset::load(d1);
  GenerateConfig cfg2;
  cfg2.count = loaded.manifest.at("count").get<int>();
  cfg2.size = loaded.manifest.at("size").get<int>();
  cfg2.seed = loaded.manifest.at("seed").get<std::uint64_t>();
  cfg2.task = TaskDef::from_json(loaded.manifest.at("task"));
  std::string d3 = temp_dir("colidr_ds_c");
  Dataset::generate(cfg2).save(d3);
  CHECK(slurp(d1 + "/dataset.cldr") == slurp(d3 + "/dataset.cldr"));

  std::filesystem::remove_all(d1);
  std::filesystem::remove_all(d2);
  std::filesystem::remove_all(d3);
}

TEST_CASE("dataset load round-trips the splits") {
  GenerateConfig cfg;
  cfg.count = 150;
  cfg.size = 16;
  cfg.task = TaskDef::parse("x>0.5,y>0.5");
  cfg.seed = 5;
  Dataset ds = Dataset::generate(cfg);
  std::string dir = temp_dir("colidr_ds_rt");
  ds.save(dir);
  Dataset back = Dataset::load(dir);
  CHECK(back.image_size == 16);
  CHECK(back.train.count() == ds.train.count());
  CHECK(back.test.count() == ds.test.count());
  CHECK(back.train.images.data == ds.train.images.data);
  CHECK(back.train.masks == ds.train.masks);
  CHECK(back.test.labels == ds.test.labels);
  CHECK(back.task.str() == ds.task.str());
  std::filesystem::remove_all(dir);
}

TEST_CASE("unsatisfiable tasks and tiny datasets are rejected") {
  GenerateConfig cfg;
  cfg.count = 200;
  cfg.size = 16;
  cfg.seed = 1;
  cfg.task = TaskDef::parse("scale>0.9999,x>0.7999");  // ~2e-5 positive rate
  CHECK_THROWS_AS(Dataset::generate(cfg), Error);

  cfg.task = TaskDef::parse("x>0.5,y>0.5");
  cfg.count = 10;
  CHECK_THROWS_AS(Dataset::generate(cfg), Error);
}
