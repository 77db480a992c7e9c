#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "core/tensor.hpp"

namespace colidr {

// ---------------------------------------------------------------------------
// Generative factors
// ---------------------------------------------------------------------------

enum class SpriteShape : int { Square = 0, Ellipse = 1, Heart = 2 };

const char* shape_name(SpriteShape s);
SpriteShape shape_from_name(const std::string& name);

// Five mutually independent factors. Positions are fractions of the image
// side; y_pos is measured from the bottom edge so larger values sit higher.
struct FactorSpec {
  SpriteShape shape = SpriteShape::Square;
  double scale = 1.0;        // [0.5, 1.0]
  double orientation = 0.0;  // [0, 2*pi)
  double x_pos = 0.5;        // [0.2, 0.8]
  double y_pos = 0.5;        // [0.2, 0.8]

  void validate() const;
};

inline constexpr double kScaleMin = 0.5, kScaleMax = 1.0;
inline constexpr double kPosMin = 0.2, kPosMax = 0.8;

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

struct RenderedSprite {
  int size = 0;
  std::vector<double> image;  // H*W, exactly 1.0 on the mask, 0.0 elsewhere
  std::vector<bool> mask;
};

// Hard-edged rasterization by pixel-center inclusion test. Deterministic;
// the sprite is fully inside the frame for all in-range factors.
RenderedSprite render_sprite(const FactorSpec& factors, int size);

// Side of the rasterized square in pixels (scale * 0.25 * size); exposed for
// the pixel-count oracle.
double square_side_px(double scale, int size);

// ---------------------------------------------------------------------------
// Concepts
// ---------------------------------------------------------------------------

inline constexpr int kNumConcepts = 6;

struct ConceptDef {
  std::string name;
  std::string rule;  // human-readable predicate, recorded in the manifest
};

// is_square, is_ellipse, is_heart, is_large (scale>0.75), is_right
// (x_pos>0.5), is_top (y_pos>0.5). Thresholds are strict; boundary values
// map to 0.
const std::array<ConceptDef, kNumConcepts>& concept_defs();
int concept_index(const std::string& name);  // -1 if unknown
std::array<bool, kNumConcepts> derive_concepts(const FactorSpec& f);

// ---------------------------------------------------------------------------
// Tasks
// ---------------------------------------------------------------------------

enum class FactorId : int { Shape = 0, Scale = 1, Orientation = 2, XPos = 3, YPos = 4 };

struct Criterion {
  FactorId factor = FactorId::Shape;
  enum class Kind { Equals, Greater, Less } kind = Kind::Equals;
  SpriteShape shape_value = SpriteShape::Square;  // Equals on the shape factor
  double threshold = 0.0;                         // Greater/Less on continuous factors

  std::string str() const;
};

// Conjunction of two criteria over distinct factors.
struct TaskDef {
  Criterion a, b;

  void validate() const;
  std::string str() const;
  nlohmann::json to_json() const;
  static TaskDef from_json(const nlohmann::json& j);
  // e.g. "shape=square,x>0.5"
  static TaskDef parse(const std::string& text);
};

bool eval_criterion(const Criterion& c, const FactorSpec& f);
inline int task_label(bool bit_a, bool bit_b) { return (bit_a && bit_b) ? 1 : 0; }
int derive_task_label(const FactorSpec& f, const TaskDef& task);

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

struct SplitData {
  Tensor images;            // [N,1,H,W]
  Tensor factors;           // [N,5]: shape index, scale, orientation, x, y
  Tensor concepts;          // [N,6] 0/1
  std::vector<int> labels;  // task labels
  std::vector<bool> masks;  // N*H*W ground-truth sprite masks

  int count() const { return labels.empty() ? 0 : static_cast<int>(labels.size()); }
  FactorSpec factor_spec(int i) const;
};

struct GenerateConfig {
  int count = 10000;
  int size = 32;
  TaskDef task;
  std::uint64_t seed = 0;
  double train_fraction = 0.7;
};

struct Dataset {
  int image_size = 0;
  std::uint64_t seed = 0;
  TaskDef task;
  SplitData train, test;
  nlohmann::json manifest;

  // Label-balanced by rejection on the two task factors jointly; every other
  // factor stays independent. Deterministic for a fixed seed.
  static Dataset generate(const GenerateConfig& cfg);

  void save(const std::string& dir) const;
  static Dataset load(const std::string& dir);
};

}  // namespace colidr
