#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lvrpo/rng.hpp"

namespace lvrpo {

constexpr int kGrid = 16;
constexpr int kChannels = 10;  // 0 occupancy, 1..3 shape one-hot, 4..9 color one-hot
constexpr int kPatches = kGrid * kGrid;
constexpr int kLatentSize = kGrid * kGrid * kChannels;
constexpr int kConcepts = 8;

enum class ShapeKind : int { Circle = 0, Square = 1, Triangle = 2 };
enum class ColorKind : int { Red = 0, Green = 1, Blue = 2, Yellow = 3, Purple = 4, Orange = 5 };
enum class RelationKind : int { LeftOf = 0, RightOf = 1, Above = 2, Below = 3, Inside = 4 };

enum class PromptCategory : int {
  SingleObject = 0,
  TwoObjects = 1,
  Counting = 2,
  Colors = 3,
  Position = 4,
  ColorAttribution = 5,
  Knowledge = 6,
};
constexpr int kCategories = 7;

const char* to_string(ShapeKind s);
const char* to_string(ColorKind c);
const char* to_string(RelationKind r);
const char* to_string(PromptCategory c);
PromptCategory category_from_string(const std::string& name);

struct SceneObject {
  ShapeKind shape = ShapeKind::Circle;
  ColorKind color = ColorKind::Red;
  int row = 0;   // anchor cell (top-left of bounding box)
  int col = 0;
  int size = 2;  // bounding box is size x size, 2..5
  int concept_id = -1;  // 0..7 or -1 when absent

  int row_end() const { return row + size - 1; }
  int col_end() const { return col + size - 1; }
};

struct SceneSpec {
  std::vector<SceneObject> objects;
};

struct LatentImage {
  std::vector<float> grid;  // kGrid*kGrid*kChannels, row-major (row, col, channel)

  LatentImage() : grid(kLatentSize, 0.0f) {}
  float& at(int r, int c, int ch) { return grid[static_cast<std::size_t>((r * kGrid + c) * kChannels + ch)]; }
  float at(int r, int c, int ch) const { return grid[static_cast<std::size_t>((r * kGrid + c) * kChannels + ch)]; }
};

struct Constraint {
  enum class Kind : int { ObjectPresent = 0, Count = 1, Relation = 2, AttributeBound = 3 };
  Kind kind = Kind::ObjectPresent;
  ShapeKind shape = ShapeKind::Circle;  // subject shape
  int color = -1;                       // ColorKind as int, -1 = any
  int count = 0;                        // Count only
  RelationKind relation = RelationKind::LeftOf;  // Relation only
  ShapeKind object_shape = ShapeKind::Circle;    // Relation only

  bool operator==(const Constraint& o) const {
    if (kind != o.kind || shape != o.shape || color != o.color) return false;
    if (kind == Kind::Count) return count == o.count;
    if (kind == Kind::Relation) return relation == o.relation && object_shape == o.object_shape;
    return true;
  }
  std::string describe() const;
};

using ConstraintSet = std::vector<Constraint>;

struct FactRef {
  int concept_id = 0;
  std::string attribute = "color";
  bool suppressed = false;  // set when the prompt states the attribute explicitly
};

struct PromptSpec {
  std::vector<int> tokens;
  std::string text;
  std::vector<int> key_tokens;  // positions into `tokens`
  ConstraintSet constraints;
  std::vector<FactRef> fact_refs;
  PromptCategory category = PromptCategory::SingleObject;
};

struct KnowledgeBase {
  struct Entry {
    ColorKind canonical_color = ColorKind::Red;
    ShapeKind canonical_shape = ShapeKind::Circle;
  };
  std::array<Entry, kConcepts> canon{};
};

struct DetectedObject {
  ShapeKind shape = ShapeKind::Circle;
  ColorKind color = ColorKind::Red;
  int row0 = 0, col0 = 0, rows = 0, cols = 0;
  int cells = 0;
  float confidence = 0.0f;
  int row_end() const { return row0 + rows - 1; }
  int col_end() const { return col0 + cols - 1; }
};

struct DetectedScene {
  std::vector<DetectedObject> objects;
  SceneSpec as_scene_spec() const;
};

// --- vocabulary -------------------------------------------------------------

class Vocabulary {
 public:
  static const Vocabulary& instance();
  int size() const { return static_cast<int>(words_.size()); }
  int id(const std::string& word) const;             // throws on unknown word
  std::optional<int> try_id(const std::string& word) const;
  const std::string& word(int id) const;
  int pad() const { return 0; }
  int bos() const { return 1; }
  int eos() const { return 2; }

 private:
  Vocabulary();
  std::vector<std::string> words_;
};

std::vector<int> tokenize_prompt(const std::string& text);
std::string detokenize(const std::vector<int>& ids);

// --- world operations -------------------------------------------------------

// Deterministic scene sampling; `variant` selects the category's template
// flavor (counting with/without a color word, knowledge plain/override).
SceneSpec sample_scene(Rng& rng, PromptCategory category, const KnowledgeBase& kb, int variant);
SceneSpec sample_scene(std::uint64_t seed, PromptCategory category, const KnowledgeBase& kb, int variant = 0);

LatentImage rasterize_scene(const SceneSpec& scene);

// Shape masks are fixed per-size templates shared by rasterizer and tests.
bool shape_mask_cell(ShapeKind shape, int size, int r, int c);

PromptSpec render_prompt(const SceneSpec& scene, PromptCategory category, int template_id, const KnowledgeBase& kb);

// Strict parse of a token sequence back into the template-derived constraint
// set. Throws on sequences outside the grammar.
ConstraintSet extract_constraints(const std::vector<int>& tokens, const KnowledgeBase& kb);

// Lenient flavor used to score sampled captions: returns nullopt instead of
// throwing when the tokens do not parse.
std::optional<ConstraintSet> try_extract_constraints(const std::vector<int>& tokens, const KnowledgeBase& kb);

DetectedScene detect_objects(const LatentImage& latent, float threshold = 0.5f);

bool constraint_satisfied(const Constraint& c, const DetectedScene& scene);

// Order-insensitive equality on the visually recoverable fields (concept ids
// are prompt metadata and are not painted into the latent).
bool same_visual_scene(const SceneSpec& a, const SceneSpec& b);

KnowledgeBase build_knowledge_base(std::uint64_t seed);

// --- dataset ----------------------------------------------------------------

struct DatasetRecord {
  std::string id;
  PromptSpec prompt;
  int latent_index = 0;
};

struct Dataset {
  std::vector<DatasetRecord> train;
  std::vector<DatasetRecord> eval;
  std::vector<LatentImage> train_latents;
  std::vector<LatentImage> eval_latents;
  KnowledgeBase kb;
  std::uint64_t seed = 0;
  int n_per_category = 0;
  int n_eval_per_category = 0;

  const LatentImage& latent_of(const DatasetRecord& r, bool eval_split) const {
    return eval_split ? eval_latents[static_cast<std::size_t>(r.latent_index)]
                      : train_latents[static_cast<std::size_t>(r.latent_index)];
  }
};

Dataset build_dataset(std::uint64_t seed, int n_per_category, int n_eval_per_category = -1);
void write_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace lvrpo
