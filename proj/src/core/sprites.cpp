#include "core/sprites.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "core/container.hpp"
#include "core/parallel.hpp"

namespace colidr {

namespace {
constexpr double kTwoPi = 6.283185307179586476925286766559;
}

// ---------------------------------------------------------------------------
// Factors
// ---------------------------------------------------------------------------

const char* shape_name(SpriteShape s) {
  switch (s) {
    case SpriteShape::Square: return "square";
    case SpriteShape::Ellipse: return "ellipse";
    case SpriteShape::Heart: return "heart";
  }
  return "?";
}

SpriteShape shape_from_name(const std::string& name) {
  if (name == "square") return SpriteShape::Square;
  if (name == "ellipse") return SpriteShape::Ellipse;
  if (name == "heart") return SpriteShape::Heart;
  fail(ErrorKind::InvalidArgument, "unknown shape '" + name + "'");
}

void FactorSpec::validate() const {
  CLDR_CHECK(scale >= kScaleMin && scale <= kScaleMax, ErrorKind::InvalidArgument,
             "factor out of range: scale " << scale << " not in [" << kScaleMin << ", "
                                           << kScaleMax << "]");
  CLDR_CHECK(orientation >= 0.0 && orientation < kTwoPi, ErrorKind::InvalidArgument,
             "factor out of range: orientation " << orientation);
  CLDR_CHECK(x_pos >= kPosMin && x_pos <= kPosMax, ErrorKind::InvalidArgument,
             "factor out of range: x_pos " << x_pos);
  CLDR_CHECK(y_pos >= kPosMin && y_pos <= kPosMax, ErrorKind::InvalidArgument,
             "factor out of range: y_pos " << y_pos);
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

double square_side_px(double scale, int size) { return scale * 0.25 * size; }

namespace {

// Inclusion tests in sprite-local coordinates (x right, y up, pre-rotation).
bool inside_square(double x, double y, double half_side) {
  return std::abs(x) <= half_side && std::abs(y) <= half_side;
}

bool inside_ellipse(double x, double y, double a, double b) {
  double u = x / a, v = y / b;
  return u * u + v * v <= 1.0;
}

bool inside_heart(double x, double y, double r) {
  // classic implicit heart (x^2 + y^2 - 1)^3 - x^2 y^3 <= 0, lobes up
  double u = x / r, v = y / r;
  double q = u * u + v * v - 1.0;
  return q * q * q - u * u * v * v * v <= 0.0;
}

}  // namespace

RenderedSprite render_sprite(const FactorSpec& factors, int size) {
  CLDR_CHECK(size == 16 || size == 32 || size == 64, ErrorKind::InvalidArgument,
             "render size must be 16, 32 or 64, got " << size);
  factors.validate();

  RenderedSprite out;
  out.size = size;
  out.image.assign(static_cast<std::size_t>(size) * size, 0.0);
  out.mask.assign(static_cast<std::size_t>(size) * size, false);

  const double cx = factors.x_pos * size;
  const double cy = (1.0 - factors.y_pos) * size;  // image rows grow downward
  const double c = std::cos(factors.orientation);
  const double s = std::sin(factors.orientation);

  // Base extents chosen so every shape at scale 1 stays strictly inside the
  // frame for positions in [0.2, 0.8] (the heart curve reaches ~1.43x its
  // nominal radius at the lobes), while the inscribed disc at scale 0.5 and
  // size 16 still guarantees at least one lit pixel center.
  const double half_side = 0.5 * square_side_px(factors.scale, size);
  const double ell_a = 0.15 * size * factors.scale;
  const double ell_b = 0.095 * size * factors.scale;
  const double heart_r = 0.125 * size * factors.scale;

  for (int row = 0; row < size; ++row) {
    for (int col = 0; col < size; ++col) {
      const double px = col + 0.5 - cx;
      const double py = cy - (row + 0.5);  // flip to y-up sprite coordinates
      // rotate the sample point by -orientation into sprite-local frame
      const double lx = c * px + s * py;
      const double ly = -s * px + c * py;
      bool hit = false;
      switch (factors.shape) {
        case SpriteShape::Square: hit = inside_square(lx, ly, half_side); break;
        case SpriteShape::Ellipse: hit = inside_ellipse(lx, ly, ell_a, ell_b); break;
        case SpriteShape::Heart: hit = inside_heart(lx, ly, heart_r); break;
      }
      if (hit) {
        std::size_t idx = static_cast<std::size_t>(row) * size + col;
        out.mask[idx] = true;
        out.image[idx] = 1.0;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Concepts
// ---------------------------------------------------------------------------

const std::array<ConceptDef, kNumConcepts>& concept_defs() {
  static const std::array<ConceptDef, kNumConcepts> defs = {{
      {"is_square", "shape == square"},
      {"is_ellipse", "shape == ellipse"},
      {"is_heart", "shape == heart"},
      {"is_large", "scale > 0.75"},
      {"is_right", "x_pos > 0.5"},
      {"is_top", "y_pos > 0.5"},
  }};
  return defs;
}

int concept_index(const std::string& name) {
  const auto& defs = concept_defs();
  for (int i = 0; i < kNumConcepts; ++i)
    if (defs[static_cast<std::size_t>(i)].name == name) return i;
  return -1;
}

std::array<bool, kNumConcepts> derive_concepts(const FactorSpec& f) {
  return {f.shape == SpriteShape::Square, f.shape == SpriteShape::Ellipse,
          f.shape == SpriteShape::Heart,  f.scale > 0.75,
          f.x_pos > 0.5,                  f.y_pos > 0.5};
}

// ---------------------------------------------------------------------------
// Tasks
// ---------------------------------------------------------------------------

namespace {

const char* factor_name(FactorId f) {
  switch (f) {
    case FactorId::Shape: return "shape";
    case FactorId::Scale: return "scale";
    case FactorId::Orientation: return "orientation";
    case FactorId::XPos: return "x";
    case FactorId::YPos: return "y";
  }
  return "?";
}

FactorId factor_from_name(const std::string& name) {
  if (name == "shape") return FactorId::Shape;
  if (name == "scale") return FactorId::Scale;
  if (name == "orientation" || name == "orient") return FactorId::Orientation;
  if (name == "x" || name == "x_pos") return FactorId::XPos;
  if (name == "y" || name == "y_pos") return FactorId::YPos;
  fail(ErrorKind::InvalidArgument, "unknown factor '" + name + "'");
}

double factor_value(const FactorSpec& f, FactorId id) {
  switch (id) {
    case FactorId::Shape: return static_cast<double>(f.shape);
    case FactorId::Scale: return f.scale;
    case FactorId::Orientation: return f.orientation;
    case FactorId::XPos: return f.x_pos;
    case FactorId::YPos: return f.y_pos;
  }
  return 0.0;
}

Criterion parse_criterion(const std::string& text) {
  Criterion c;
  std::size_t pos;
  if ((pos = text.find('=')) != std::string::npos) {
    std::string lhs = text.substr(0, pos), rhs = text.substr(pos + 1);
    c.factor = factor_from_name(lhs);
    CLDR_CHECK(c.factor == FactorId::Shape, ErrorKind::InvalidArgument,
               "criterion '" << text << "': equality is only defined for the shape factor");
    c.kind = Criterion::Kind::Equals;
    c.shape_value = shape_from_name(rhs);
  } else if ((pos = text.find('>')) != std::string::npos ||
             (pos = text.find('<')) != std::string::npos) {
    std::string lhs = text.substr(0, pos), rhs = text.substr(pos + 1);
    c.factor = factor_from_name(lhs);
    CLDR_CHECK(c.factor != FactorId::Shape, ErrorKind::InvalidArgument,
               "criterion '" << text << "': thresholds apply to continuous factors only");
    c.kind = text[pos] == '>' ? Criterion::Kind::Greater : Criterion::Kind::Less;
    try {
      c.threshold = std::stod(rhs);
    } catch (const std::exception&) {
      fail(ErrorKind::InvalidArgument, "criterion '" + text + "': bad threshold '" + rhs + "'");
    }
  } else {
    fail(ErrorKind::InvalidArgument,
         "criterion '" + text + "': expected factor=value or factor>t / factor<t");
  }
  return c;
}

}  // namespace

std::string Criterion::str() const {
  std::string s = factor_name(factor);
  switch (kind) {
    case Kind::Equals: return s + "=" + shape_name(shape_value);
    case Kind::Greater: return s + ">" + std::to_string(threshold);
    case Kind::Less: return s + "<" + std::to_string(threshold);
  }
  return s;
}

void TaskDef::validate() const {
  CLDR_CHECK(a.factor != b.factor, ErrorKind::InvalidArgument,
             "task criteria must reference two distinct factors, both use '"
                 << factor_name(a.factor) << "'");
}

std::string TaskDef::str() const { return a.str() + "," + b.str(); }

nlohmann::json TaskDef::to_json() const {
  auto crit = [](const Criterion& c) {
    nlohmann::json j;
    j["factor"] = factor_name(c.factor);
    switch (c.kind) {
      case Criterion::Kind::Equals:
        j["op"] = "eq";
        j["value"] = shape_name(c.shape_value);
        break;
      case Criterion::Kind::Greater:
        j["op"] = "gt";
        j["value"] = c.threshold;
        break;
      case Criterion::Kind::Less:
        j["op"] = "lt";
        j["value"] = c.threshold;
        break;
    }
    return j;
  };
  return nlohmann::json{{"a", crit(a)}, {"b", crit(b)}};
}

TaskDef TaskDef::from_json(const nlohmann::json& j) {
  auto crit = [](const nlohmann::json& cj) {
    Criterion c;
    c.factor = factor_from_name(cj.at("factor").get<std::string>());
    std::string op = cj.at("op").get<std::string>();
    if (op == "eq") {
      c.kind = Criterion::Kind::Equals;
      c.shape_value = shape_from_name(cj.at("value").get<std::string>());
    } else if (op == "gt" || op == "lt") {
      c.kind = op == "gt" ? Criterion::Kind::Greater : Criterion::Kind::Less;
      c.threshold = cj.at("value").get<double>();
    } else {
      fail(ErrorKind::Format, "task criterion: unknown op '" + op + "'");
    }
    return c;
  };
  TaskDef t{crit(j.at("a")), crit(j.at("b"))};
  t.validate();
  return t;
}

TaskDef TaskDef::parse(const std::string& text) {
  std::size_t comma = text.find(',');
  CLDR_CHECK(comma != std::string::npos, ErrorKind::InvalidArgument,
             "task '" << text << "': expected two comma-separated criteria");
  TaskDef t{parse_criterion(text.substr(0, comma)), parse_criterion(text.substr(comma + 1))};
  t.validate();
  return t;
}

bool eval_criterion(const Criterion& c, const FactorSpec& f) {
  switch (c.kind) {
    case Criterion::Kind::Equals: return f.shape == c.shape_value;
    case Criterion::Kind::Greater: return factor_value(f, c.factor) > c.threshold;
    case Criterion::Kind::Less: return factor_value(f, c.factor) < c.threshold;
  }
  return false;
}

int derive_task_label(const FactorSpec& f, const TaskDef& task) {
  return task_label(eval_criterion(task.a, f), eval_criterion(task.b, f));
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

FactorSpec SplitData::factor_spec(int i) const {
  const double* row = &factors.data[static_cast<std::size_t>(i) * 5];
  FactorSpec f;
  f.shape = static_cast<SpriteShape>(static_cast<int>(row[0]));
  f.scale = row[1];
  f.orientation = row[2];
  f.x_pos = row[3];
  f.y_pos = row[4];
  return f;
}

namespace {

FactorSpec draw_factors(Rng& rng) {
  FactorSpec f;
  f.shape = static_cast<SpriteShape>(rng.uniform_index(3));
  f.scale = rng.uniform(kScaleMin, kScaleMax);
  f.orientation = rng.uniform(0.0, kTwoPi);
  f.x_pos = rng.uniform(kPosMin, kPosMax);
  f.y_pos = rng.uniform(kPosMin, kPosMax);
  return f;
}

SplitData build_split(const std::vector<FactorSpec>& all, const std::vector<int>& labels,
                      const std::vector<int>& indices, int size) {
  SplitData split;
  const int n = static_cast<int>(indices.size());
  split.images = Tensor({n, 1, size, size});
  split.factors = Tensor({n, 5});
  split.concepts = Tensor({n, kNumConcepts});
  split.labels.resize(static_cast<std::size_t>(n));
  split.masks.assign(static_cast<std::size_t>(n) * size * size, false);
  const std::size_t hw = static_cast<std::size_t>(size) * size;
  parallel_for(static_cast<std::size_t>(n), [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      const FactorSpec& f = all[static_cast<std::size_t>(indices[i])];
      RenderedSprite r = render_sprite(f, size);
      std::copy(r.image.begin(), r.image.end(), split.images.data.begin() + i * hw);
      for (std::size_t q = 0; q < hw; ++q) split.masks[i * hw + q] = r.mask[q];
      double* frow = &split.factors.data[i * 5];
      frow[0] = static_cast<double>(f.shape);
      frow[1] = f.scale;
      frow[2] = f.orientation;
      frow[3] = f.x_pos;
      frow[4] = f.y_pos;
      auto bits = derive_concepts(f);
      for (int k = 0; k < kNumConcepts; ++k)
        split.concepts.data[i * kNumConcepts + static_cast<std::size_t>(k)] =
            bits[static_cast<std::size_t>(k)] ? 1.0 : 0.0;
      split.labels[i] = labels[static_cast<std::size_t>(indices[i])];
    }
  });
  return split;
}

}  // namespace

Dataset Dataset::generate(const GenerateConfig& cfg) {
  CLDR_CHECK(cfg.count >= 100, ErrorKind::InvalidArgument,
             "dataset count must be >= 100, got " << cfg.count);
  cfg.task.validate();

  Rng rng = Rng::substream(cfg.seed, "data");

  // cheap satisfiability probe before any rendering
  {
    Rng probe = Rng::substream(cfg.seed, "probe");
    int pos = 0;
    const int probes = 50000;
    for (int i = 0; i < probes; ++i)
      pos += derive_task_label(draw_factors(probe), cfg.task);
    CLDR_CHECK(pos >= probes / 100, ErrorKind::Unsatisfiable,
               "task '" << cfg.task.str() << "' has positive rate "
                        << static_cast<double>(pos) / probes
                        << " < 0.01; refusing to balance by rejection");
  }

  // exact half/half fill by rejection on the joint label only
  const int pos_target = cfg.count / 2;
  const int neg_target = cfg.count - pos_target;
  std::vector<FactorSpec> all;
  std::vector<int> labels;
  all.reserve(static_cast<std::size_t>(cfg.count));
  labels.reserve(static_cast<std::size_t>(cfg.count));
  int pos_n = 0, neg_n = 0;
  long attempts = 0;
  const long max_attempts = 500L * cfg.count + 100000L;
  while (pos_n < pos_target || neg_n < neg_target) {
    CLDR_CHECK(attempts++ < max_attempts, ErrorKind::Unsatisfiable,
               "rejection sampling exhausted " << max_attempts << " attempts for task '"
                                               << cfg.task.str() << "'");
    FactorSpec f = draw_factors(rng);
    int y = derive_task_label(f, cfg.task);
    if (y == 1) {
      if (pos_n >= pos_target) continue;
      ++pos_n;
    } else {
      if (neg_n >= neg_target) continue;
      ++neg_n;
    }
    all.push_back(f);
    labels.push_back(y);
  }

  // seeded shuffle, then 70/30 split recorded in the manifest
  std::vector<int> order(static_cast<std::size_t>(cfg.count));
  for (int i = 0; i < cfg.count; ++i) order[static_cast<std::size_t>(i)] = i;
  Rng split_rng = Rng::substream(cfg.seed, "split");
  for (int i = cfg.count - 1; i > 0; --i)
    std::swap(order[static_cast<std::size_t>(i)],
              order[split_rng.uniform_index(static_cast<std::uint64_t>(i) + 1)]);
  const int train_n = static_cast<int>(
      std::llround(cfg.train_fraction * static_cast<double>(cfg.count)));
  std::vector<int> train_idx(order.begin(), order.begin() + train_n);
  std::vector<int> test_idx(order.begin() + train_n, order.end());

  Dataset ds;
  ds.image_size = cfg.size;
  ds.seed = cfg.seed;
  ds.task = cfg.task;
  ds.train = build_split(all, labels, train_idx, cfg.size);
  ds.test = build_split(all, labels, test_idx, cfg.size);

  nlohmann::json cdefs = nlohmann::json::array();
  for (const auto& d : concept_defs())
    cdefs.push_back({{"name", d.name},
                     {"rule", d.rule},
                     {"mask", "sprite shape mask"}});
  ds.manifest = nlohmann::json{
      {"format_version", 1},
      {"seed", cfg.seed},
      {"size", cfg.size},
      {"count", cfg.count},
      {"train_fraction", cfg.train_fraction},
      {"task", ds.task.to_json()},
      {"concepts", cdefs},
      {"split", {{"train", train_idx}, {"test", test_idx}}},
  };
  return ds;
}

// ---------------------------------------------------------------------------
// Dataset io
// ---------------------------------------------------------------------------

namespace {

void append_split(std::vector<NamedTensor>& tensors, std::vector<NamedBitmap>& bitmaps,
                  const std::string& prefix, const SplitData& s, int size) {
  Tensor lab({s.count()});
  for (int i = 0; i < s.count(); ++i)
    lab.data[static_cast<std::size_t>(i)] = static_cast<double>(s.labels[static_cast<std::size_t>(i)]);
  tensors.push_back({prefix + ".images", s.images});
  tensors.push_back({prefix + ".factors", s.factors});
  tensors.push_back({prefix + ".concepts", s.concepts});
  tensors.push_back({prefix + ".labels", std::move(lab)});
  bitmaps.push_back({prefix + ".masks", {s.count(), size, size}, s.masks});
}

SplitData read_split(const std::vector<NamedTensor>& tensors,
                     const std::vector<NamedBitmap>& bitmaps, const std::string& prefix,
                     const std::string& dir) {
  auto find_t = [&](const std::string& name) -> const Tensor& {
    for (const auto& e : tensors)
      if (e.name == name) return e.tensor;
    fail(ErrorKind::Format, dir + ": dataset container missing tensor '" + name + "'");
  };
  SplitData s;
  s.images = find_t(prefix + ".images");
  s.factors = find_t(prefix + ".factors");
  s.concepts = find_t(prefix + ".concepts");
  const Tensor& lab = find_t(prefix + ".labels");
  s.labels.resize(lab.numel());
  for (std::size_t i = 0; i < lab.numel(); ++i)
    s.labels[i] = static_cast<int>(std::llround(lab.data[i]));
  for (const auto& b : bitmaps) {
    if (b.name == prefix + ".masks") {
      s.masks = b.bits;
      return s;
    }
  }
  fail(ErrorKind::Format, dir + ": mask container missing '" + prefix + ".masks'");
}

}  // namespace

void Dataset::save(const std::string& dir) const {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  CLDR_CHECK(!ec, ErrorKind::Io, "cannot create output directory '" << dir << "'");

  std::vector<NamedTensor> tensors;
  std::vector<NamedBitmap> bitmaps;
  append_split(tensors, bitmaps, "train", train, image_size);
  append_split(tensors, bitmaps, "test", test, image_size);
  write_tensor_container(dir + "/dataset.cldr", tensors);
  write_bitmap_container(dir + "/masks.cldb", bitmaps);

  std::ofstream os(dir + "/manifest.json");
  CLDR_CHECK(os.is_open(), ErrorKind::Io, "cannot write '" << dir << "/manifest.json'");
  os << manifest.dump(2) << "\n";
}

Dataset Dataset::load(const std::string& dir) {
  std::ifstream is(dir + "/manifest.json");
  CLDR_CHECK(is.is_open(), ErrorKind::Io,
             "cannot open '" << dir << "/manifest.json' (not a dataset directory?)");
  nlohmann::json manifest;
  try {
    is >> manifest;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, dir + "/manifest.json: " + e.what());
  }
  CLDR_CHECK(manifest.value("format_version", 0) == 1, ErrorKind::Format,
             dir << ": unsupported dataset format_version");

  Dataset ds;
  ds.manifest = manifest;
  ds.image_size = manifest.at("size").get<int>();
  ds.seed = manifest.at("seed").get<std::uint64_t>();
  ds.task = TaskDef::from_json(manifest.at("task"));
  auto tensors = read_tensor_container(dir + "/dataset.cldr");
  auto bitmaps = read_bitmap_container(dir + "/masks.cldb");
  ds.train = read_split(tensors, bitmaps, "train", dir);
  ds.test = read_split(tensors, bitmaps, "test", dir);
  return ds;
}

}  // namespace colidr
