#include "lvrpo/world.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "lvrpo/tensor.hpp"
#include "json.hpp"

namespace lvrpo {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

// --- names -------------------------------------------------------------------

const char* to_string(ShapeKind s) {
  switch (s) {
    case ShapeKind::Circle: return "circle";
    case ShapeKind::Square: return "square";
    case ShapeKind::Triangle: return "triangle";
  }
  return "?";
}

const char* to_string(ColorKind c) {
  switch (c) {
    case ColorKind::Red: return "red";
    case ColorKind::Green: return "green";
    case ColorKind::Blue: return "blue";
    case ColorKind::Yellow: return "yellow";
    case ColorKind::Purple: return "purple";
    case ColorKind::Orange: return "orange";
  }
  return "?";
}

const char* to_string(RelationKind r) {
  switch (r) {
    case RelationKind::LeftOf: return "left_of";
    case RelationKind::RightOf: return "right_of";
    case RelationKind::Above: return "above";
    case RelationKind::Below: return "below";
    case RelationKind::Inside: return "inside";
  }
  return "?";
}

const char* to_string(PromptCategory c) {
  switch (c) {
    case PromptCategory::SingleObject: return "single_object";
    case PromptCategory::TwoObjects: return "two_objects";
    case PromptCategory::Counting: return "counting";
    case PromptCategory::Colors: return "colors";
    case PromptCategory::Position: return "position";
    case PromptCategory::ColorAttribution: return "color_attribution";
    case PromptCategory::Knowledge: return "knowledge";
  }
  return "?";
}

PromptCategory category_from_string(const std::string& name) {
  for (int i = 0; i < kCategories; ++i) {
    if (name == to_string(static_cast<PromptCategory>(i))) return static_cast<PromptCategory>(i);
  }
  fail("unknown prompt category: " + name);
}

std::string Constraint::describe() const {
  std::string col = color < 0 ? std::string("*") : to_string(static_cast<ColorKind>(color));
  switch (kind) {
    case Kind::ObjectPresent:
      return "object_present(" + std::string(to_string(shape)) + "," + col + ")";
    case Kind::Count:
      return "count(" + std::string(to_string(shape)) + "," + std::to_string(count) + ")";
    case Kind::Relation:
      return "relation(" + std::string(to_string(shape)) + "," + to_string(relation) + "," + to_string(object_shape) + ")";
    case Kind::AttributeBound:
      return "attribute_bound(" + std::string(to_string(shape)) + "," + col + ")";
  }
  return "?";
}

// --- vocabulary ----------------------------------------------------------------

Vocabulary::Vocabulary() {
  words_ = {"<pad>", "<bos>", "<eos>",
            "a", "the", "and",
            "one", "two", "three", "four",
            "circle", "square", "triangle",
            "circles", "squares", "triangles",
            "red", "green", "blue", "yellow", "purple", "orange",
            "left", "right", "above", "below", "inside", "of"};
  for (int i = 0; i < kConcepts; ++i) words_.push_back("concept_" + std::to_string(i));
}

const Vocabulary& Vocabulary::instance() {
  static Vocabulary v;
  return v;
}

std::optional<int> Vocabulary::try_id(const std::string& word) const {
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (words_[i] == word) return static_cast<int>(i);
  }
  return std::nullopt;
}

int Vocabulary::id(const std::string& word) const {
  if (auto i = try_id(word)) return *i;
  fail("unknown word: '" + word + "'");
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || id >= size()) fail("token id " + std::to_string(id) + " out of range");
  return words_[static_cast<std::size_t>(id)];
}

std::vector<int> tokenize_prompt(const std::string& text) {
  const Vocabulary& v = Vocabulary::instance();
  std::vector<int> ids = {v.bos()};
  std::istringstream ss(text);
  std::string w;
  while (ss >> w) ids.push_back(v.id(w));
  ids.push_back(v.eos());
  return ids;
}

std::string detokenize(const std::vector<int>& ids) {
  const Vocabulary& v = Vocabulary::instance();
  std::string out;
  for (int id : ids) {
    if (id == v.bos() || id == v.eos() || id == v.pad()) continue;
    if (!out.empty()) out += ' ';
    out += v.word(id);
  }
  return out;
}

// --- shape masks -----------------------------------------------------------------

bool shape_mask_cell(ShapeKind shape, int size, int r, int c) {
  if (r < 0 || c < 0 || r >= size || c >= size) return false;
  switch (shape) {
    case ShapeKind::Square:
      return true;
    case ShapeKind::Circle: {
      const double cx = (size - 1) / 2.0;
      const double rad = size / 2.0;
      const double dr = r - cx, dc = c - cx;
      return dr * dr + dc * dc <= rad * rad + 1e-9;
    }
    case ShapeKind::Triangle: {
      const int lo = (size - r) / 2;
      const int hi = size - 1 - (size - 1 - r) / 2;
      return c >= lo && c <= hi;
    }
  }
  return false;
}

// --- geometry helpers ---------------------------------------------------------

namespace {

bool boxes_gap_ok(const SceneObject& a, const SceneObject& b) {
  // Expanded-by-one disjointness so same-label components never touch.
  return a.row > b.row_end() + 1 || b.row > a.row_end() + 1 || a.col > b.col_end() + 1 ||
         b.col > a.col_end() + 1;
}

bool strictly_inside(const SceneObject& a, const SceneObject& b) {
  return a.row > b.row && a.row_end() < b.row_end() && a.col > b.col && a.col_end() < b.col_end();
}

template <class Box>
bool relation_holds_boxes(const Box& a, const Box& b, RelationKind rel) {
  switch (rel) {
    case RelationKind::LeftOf: return a.col_end() < b.col0_();
    case RelationKind::RightOf: return a.col0_() > b.col_end();
    case RelationKind::Above: return a.row_end() < b.row0_();
    case RelationKind::Below: return a.row0_() > b.row_end();
    case RelationKind::Inside:
      return a.row0_() > b.row0_() && a.row_end() < b.row_end() && a.col0_() > b.col0_() &&
             a.col_end() < b.col_end();
  }
  return false;
}

struct Box {
  int r0, c0, r1, c1;
  int row0_() const { return r0; }
  int col0_() const { return c0; }
  int row_end() const { return r1; }
  int col_end() const { return c1; }
};

Box box_of(const SceneObject& o) { return {o.row, o.col, o.row_end(), o.col_end()}; }
Box box_of(const DetectedObject& o) { return {o.row0, o.col0, o.row_end(), o.col_end()}; }

bool relation_holds(const SceneObject& a, const SceneObject& b, RelationKind rel) {
  return relation_holds_boxes(box_of(a), box_of(b), rel);
}

bool placement_ok(const SceneObject& cand, const std::vector<SceneObject>& placed,
                  const std::vector<std::pair<int, int>>& inside_pairs, int cand_index) {
  if (cand.row < 0 || cand.col < 0 || cand.row_end() >= kGrid || cand.col_end() >= kGrid) return false;
  for (std::size_t i = 0; i < placed.size(); ++i) {
    bool is_inside_pair = false;
    for (auto [s, o] : inside_pairs) {
      if ((s == cand_index && o == static_cast<int>(i)) || (o == cand_index && s == static_cast<int>(i))) {
        is_inside_pair = true;
      }
    }
    if (is_inside_pair) continue;
    if (!boxes_gap_ok(cand, placed[i])) return false;
  }
  return true;
}

ShapeKind random_shape(Rng& rng) { return static_cast<ShapeKind>(rng.range_int(0, 2)); }
ColorKind random_color(Rng& rng) { return static_cast<ColorKind>(rng.range_int(0, 5)); }

// Places `obj` at a random free anchor; dies with an exception only if the
// layout is genuinely unsatisfiable (never happens for <=4 small objects).
void place_random(Rng& rng, SceneObject& obj, const std::vector<SceneObject>& placed) {
  for (int attempt = 0; attempt < 400; ++attempt) {
    obj.row = rng.range_int(0, kGrid - obj.size);
    obj.col = rng.range_int(0, kGrid - obj.size);
    if (placement_ok(obj, placed, {}, -1)) return;
  }
  for (int r = 0; r + obj.size <= kGrid; ++r) {
    for (int c = 0; c + obj.size <= kGrid; ++c) {
      obj.row = r;
      obj.col = c;
      if (placement_ok(obj, placed, {}, -1)) return;
    }
  }
  fail("could not place object in scene");
}

void maybe_add_distractor(Rng& rng, SceneSpec& scene, std::vector<ShapeKind> forbidden) {
  if (scene.objects.size() >= 4 || rng.uniform() >= 0.3) return;
  std::vector<ShapeKind> options;
  for (int s = 0; s < 3; ++s) {
    ShapeKind k = static_cast<ShapeKind>(s);
    if (std::find(forbidden.begin(), forbidden.end(), k) == forbidden.end()) options.push_back(k);
  }
  if (options.empty()) return;
  SceneObject d;
  d.shape = options[static_cast<std::size_t>(rng.below(options.size()))];
  d.color = random_color(rng);
  d.size = rng.range_int(2, 4);
  place_random(rng, d, scene.objects);
  scene.objects.push_back(d);
}

}  // namespace

// --- scene sampling ----------------------------------------------------------

SceneSpec sample_scene(Rng& rng, PromptCategory category, const KnowledgeBase& kb, int variant) {
  SceneSpec scene;
  switch (category) {
    case PromptCategory::SingleObject:
    case PromptCategory::Colors: {
      SceneObject o;
      o.shape = random_shape(rng);
      o.color = random_color(rng);
      o.size = rng.range_int(2, 5);
      place_random(rng, o, scene.objects);
      scene.objects.push_back(o);
      maybe_add_distractor(rng, scene, {o.shape});
      break;
    }
    case PromptCategory::TwoObjects:
    case PromptCategory::ColorAttribution: {
      SceneObject a, b;
      a.shape = random_shape(rng);
      do {
        b.shape = random_shape(rng);
      } while (b.shape == a.shape);
      a.color = random_color(rng);
      if (category == PromptCategory::ColorAttribution) {
        do {
          b.color = random_color(rng);
        } while (b.color == a.color);
      } else {
        b.color = random_color(rng);
      }
      a.size = rng.range_int(2, 5);
      b.size = rng.range_int(2, 5);
      place_random(rng, a, scene.objects);
      scene.objects.push_back(a);
      place_random(rng, b, scene.objects);
      scene.objects.push_back(b);
      break;
    }
    case PromptCategory::Counting: {
      const int n = rng.range_int(2, 4);
      const ShapeKind shape = random_shape(rng);
      const ColorKind color = random_color(rng);
      const int size = rng.range_int(2, 4);
      for (int i = 0; i < n; ++i) {
        SceneObject o;
        o.shape = shape;
        o.color = color;
        o.size = size;
        place_random(rng, o, scene.objects);
        scene.objects.push_back(o);
      }
      maybe_add_distractor(rng, scene, {shape});
      break;
    }
    case PromptCategory::Position: {
      const RelationKind rel =
          variant >= 0 ? static_cast<RelationKind>(variant) : static_cast<RelationKind>(rng.range_int(0, 4));
      SceneObject a, b;
      if (rel == RelationKind::Inside) {
        // Only a square container keeps the visible ring connected once the
        // contained object is painted over it.
        b.shape = ShapeKind::Square;
        a.shape = rng.uniform() < 0.5 ? ShapeKind::Circle : ShapeKind::Triangle;
      } else {
        a.shape = random_shape(rng);
        do {
          b.shape = random_shape(rng);
        } while (b.shape == a.shape);
      }
      a.color = random_color(rng);
      b.color = random_color(rng);
      if (rel == RelationKind::Inside) {
        b.size = rng.range_int(4, 5);
        a.size = rng.range_int(2, b.size - 2);
        b.row = rng.range_int(0, kGrid - b.size);
        b.col = rng.range_int(0, kGrid - b.size);
        a.row = b.row + 1 + rng.range_int(0, b.size - 2 - a.size);
        a.col = b.col + 1 + rng.range_int(0, b.size - 2 - a.size);
      } else {
        a.size = rng.range_int(2, 5);
        b.size = rng.range_int(2, 5);
        bool done = false;
        for (int attempt = 0; attempt < 500 && !done; ++attempt) {
          a.row = rng.range_int(0, kGrid - a.size);
          a.col = rng.range_int(0, kGrid - a.size);
          b.row = rng.range_int(0, kGrid - b.size);
          b.col = rng.range_int(0, kGrid - b.size);
          done = relation_holds(a, b, rel) && boxes_gap_ok(a, b);
        }
        if (!done) {
          // Fixed fallback layout; always representable on the 16x16 grid.
          a.row = 2;
          a.col = 2;
          switch (rel) {
            case RelationKind::LeftOf: b.row = 2; b.col = a.col + a.size + 2; break;
            case RelationKind::RightOf: b.row = 2; b.col = 2; a.col = b.col + b.size + 2; break;
            case RelationKind::Above: b.col = 2; b.row = a.row + a.size + 2; break;
            case RelationKind::Below: b.col = 2; b.row = 2; a.row = b.row + b.size + 2; break;
            case RelationKind::Inside: break;
          }
        }
      }
      scene.objects.push_back(a);
      scene.objects.push_back(b);
      break;
    }
    case PromptCategory::Knowledge: {
      const int concept_id = rng.range_int(0, kConcepts - 1);
      const bool override_color = variant >= 0 ? (variant == 1) : (rng.uniform() < 0.25);
      SceneObject o;
      o.concept_id = concept_id;
      o.shape = kb.canon[static_cast<std::size_t>(concept_id)].canonical_shape;
      if (override_color) {
        do {
          o.color = random_color(rng);
        } while (o.color == kb.canon[static_cast<std::size_t>(concept_id)].canonical_color);
      } else {
        o.color = kb.canon[static_cast<std::size_t>(concept_id)].canonical_color;
      }
      o.size = rng.range_int(2, 5);
      place_random(rng, o, scene.objects);
      scene.objects.push_back(o);
      maybe_add_distractor(rng, scene, {o.shape});
      break;
    }
  }
  return scene;
}

SceneSpec sample_scene(std::uint64_t seed, PromptCategory category, const KnowledgeBase& kb, int variant) {
  Rng rng(tag_seed(seed, "scene"));
  return sample_scene(rng, category, kb, variant);
}

// --- rasterization -------------------------------------------------------------

LatentImage rasterize_scene(const SceneSpec& scene) {
  LatentImage img;
  // Larger boxes first so contained objects overwrite their containers.
  std::vector<const SceneObject*> order;
  for (const auto& o : scene.objects) order.push_back(&o);
  std::stable_sort(order.begin(), order.end(),
                   [](const SceneObject* a, const SceneObject* b) { return a->size > b->size; });
  for (const SceneObject* o : order) {
    for (int r = 0; r < o->size; ++r) {
      for (int c = 0; c < o->size; ++c) {
        if (!shape_mask_cell(o->shape, o->size, r, c)) continue;
        const int gr = o->row + r, gc = o->col + c;
        for (int ch = 0; ch < kChannels; ++ch) img.at(gr, gc, ch) = 0.0f;
        img.at(gr, gc, 0) = 1.0f;
        img.at(gr, gc, 1 + static_cast<int>(o->shape)) = 1.0f;
        img.at(gr, gc, 4 + static_cast<int>(o->color)) = 1.0f;
      }
    }
  }
  return img;
}

// --- prompt rendering -----------------------------------------------------------

namespace {

std::string count_word(int n) {
  switch (n) {
    case 1: return "one";
    case 2: return "two";
    case 3: return "three";
    case 4: return "four";
  }
  fail("count out of range: " + std::to_string(n));
}

std::string plural_shape(ShapeKind s) { return std::string(to_string(s)) + "s"; }

std::string relation_words(RelationKind r) {
  switch (r) {
    case RelationKind::LeftOf: return "left of";
    case RelationKind::RightOf: return "right of";
    case RelationKind::Above: return "above";
    case RelationKind::Below: return "below";
    case RelationKind::Inside: return "inside";
  }
  return "?";
}

// Key tokens are the positions of content words (shape/color/count/relation
// head/concept) inside the rendered token stream.
std::vector<int> key_positions(const std::vector<int>& tokens, const std::vector<std::string>& keys) {
  const Vocabulary& v = Vocabulary::instance();
  std::vector<int> out;
  std::vector<bool> used(tokens.size(), false);
  for (const std::string& k : keys) {
    const int id = v.id(k);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (!used[i] && tokens[i] == id) {
        out.push_back(static_cast<int>(i));
        used[i] = true;
        break;
      }
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

PromptSpec render_prompt(const SceneSpec& scene, PromptCategory category, int template_id,
                         const KnowledgeBase& kb) {
  PromptSpec p;
  p.category = category;
  std::vector<std::string> keys;
  const auto& objs = scene.objects;
  if (objs.empty()) fail("render_prompt: empty scene");

  switch (category) {
    case PromptCategory::SingleObject: {
      const auto& o = objs[0];
      p.text = std::string("a ") + to_string(o.shape);
      p.constraints = {Constraint{Constraint::Kind::ObjectPresent, o.shape, -1}};
      keys = {to_string(o.shape)};
      break;
    }
    case PromptCategory::Colors: {
      const auto& o = objs[0];
      p.text = std::string("a ") + to_string(o.color) + " " + to_string(o.shape);
      p.constraints = {Constraint{Constraint::Kind::ObjectPresent, o.shape, static_cast<int>(o.color)}};
      keys = {to_string(o.color), to_string(o.shape)};
      break;
    }
    case PromptCategory::TwoObjects: {
      if (objs.size() < 2) fail("render_prompt: two_objects template needs two objects");
      p.text = std::string("a ") + to_string(objs[0].shape) + " and a " + to_string(objs[1].shape);
      p.constraints = {Constraint{Constraint::Kind::ObjectPresent, objs[0].shape, -1},
                       Constraint{Constraint::Kind::ObjectPresent, objs[1].shape, -1}};
      keys = {to_string(objs[0].shape), to_string(objs[1].shape)};
      break;
    }
    case PromptCategory::ColorAttribution: {
      if (objs.size() < 2) fail("render_prompt: color_attribution template needs two objects");
      p.text = std::string("a ") + to_string(objs[0].color) + " " + to_string(objs[0].shape) + " and a " +
               to_string(objs[1].color) + " " + to_string(objs[1].shape);
      p.constraints = {
          Constraint{Constraint::Kind::ObjectPresent, objs[0].shape, static_cast<int>(objs[0].color)},
          Constraint{Constraint::Kind::ObjectPresent, objs[1].shape, static_cast<int>(objs[1].color)},
          Constraint{Constraint::Kind::AttributeBound, objs[0].shape, static_cast<int>(objs[0].color)},
          Constraint{Constraint::Kind::AttributeBound, objs[1].shape, static_cast<int>(objs[1].color)}};
      keys = {to_string(objs[0].color), to_string(objs[0].shape), to_string(objs[1].color),
              to_string(objs[1].shape)};
      break;
    }
    case PromptCategory::Counting: {
      const ShapeKind shape = objs[0].shape;
      int n = 0;
      for (const auto& o : objs) {
        if (o.shape == shape) ++n;
      }
      if (n < 2 || n > 4) fail("render_prompt: counting template needs 2..4 objects of one shape");
      const bool colored = template_id == 1;
      if (colored) {
        const ColorKind color = objs[0].color;
        for (const auto& o : objs) {
          if (o.shape == shape && o.color != color) fail("render_prompt: counting template with mixed colors");
        }
        p.text = count_word(n) + " " + to_string(color) + " " + plural_shape(shape);
        p.constraints = {Constraint{Constraint::Kind::Count, shape, -1, n},
                         Constraint{Constraint::Kind::AttributeBound, shape, static_cast<int>(color)}};
        keys = {count_word(n), to_string(color), plural_shape(shape)};
      } else {
        p.text = count_word(n) + " " + plural_shape(shape);
        p.constraints = {Constraint{Constraint::Kind::Count, shape, -1, n}};
        keys = {count_word(n), plural_shape(shape)};
      }
      break;
    }
    case PromptCategory::Position: {
      if (objs.size() < 2) fail("render_prompt: position template needs two objects");
      const RelationKind rel = static_cast<RelationKind>(template_id);
      if (template_id < 0 || template_id > 4) fail("render_prompt: position template id out of range");
      if (!relation_holds(objs[0], objs[1], rel)) {
        fail(std::string("render_prompt: scene does not satisfy relation ") + to_string(rel));
      }
      p.text = std::string("a ") + to_string(objs[0].color) + " " + to_string(objs[0].shape) + " " +
               relation_words(rel) + " a " + to_string(objs[1].color) + " " + to_string(objs[1].shape);
      Constraint r;
      r.kind = Constraint::Kind::Relation;
      r.shape = objs[0].shape;
      r.relation = rel;
      r.object_shape = objs[1].shape;
      p.constraints = {
          Constraint{Constraint::Kind::ObjectPresent, objs[0].shape, static_cast<int>(objs[0].color)},
          Constraint{Constraint::Kind::ObjectPresent, objs[1].shape, static_cast<int>(objs[1].color)}, r};
      const char* relkey = rel == RelationKind::LeftOf ? "left"
                           : rel == RelationKind::RightOf ? "right"
                                                          : to_string(rel);
      keys = {to_string(objs[0].color), to_string(objs[0].shape), relkey, to_string(objs[1].color),
              to_string(objs[1].shape)};
      break;
    }
    case PromptCategory::Knowledge: {
      const auto& o = objs[0];
      if (o.concept_id < 0) fail("render_prompt: knowledge template needs a concept object");
      const auto& entry = kb.canon[static_cast<std::size_t>(o.concept_id)];
      const std::string cname = "concept_" + std::to_string(o.concept_id);
      const bool overridden = o.color != entry.canonical_color;
      if (template_id == 0 && overridden) fail("render_prompt: plain knowledge template on overridden scene");
      if (overridden) {
        p.text = std::string("a ") + to_string(o.color) + " " + cname;
        p.constraints = {
            Constraint{Constraint::Kind::ObjectPresent, entry.canonical_shape, static_cast<int>(o.color)}};
        p.fact_refs = {FactRef{o.concept_id, "color", true}};
        keys = {to_string(o.color), cname};
      } else {
        p.text = std::string("a ") + cname;
        p.constraints = {Constraint{Constraint::Kind::ObjectPresent, entry.canonical_shape, -1}};
        p.fact_refs = {FactRef{o.concept_id, "color", false}};
        keys = {cname};
      }
      break;
    }
  }

  p.tokens = tokenize_prompt(p.text);
  p.key_tokens = key_positions(p.tokens, keys);
  return p;
}

// --- constraint extraction ---------------------------------------------------

namespace {

struct NounPhrase {
  ShapeKind shape;
  int color = -1;
  int concept_id = -1;
};

class TokenCursor {
 public:
  TokenCursor(const std::vector<int>& tokens) : toks_(tokens) {}
  bool done() const { return pos_ >= toks_.size(); }
  const std::string& peek() const {
    static const std::string empty;
    return done() ? empty : Vocabulary::instance().word(toks_[pos_]);
  }
  std::string take() {
    std::string w = peek();
    ++pos_;
    return w;
  }
  bool accept(const std::string& w) {
    if (!done() && peek() == w) {
      ++pos_;
      return true;
    }
    return false;
  }

 private:
  std::vector<int> toks_;
  std::size_t pos_ = 0;
};

std::optional<int> color_of(const std::string& w) {
  for (int c = 0; c < 6; ++c) {
    if (w == to_string(static_cast<ColorKind>(c))) return c;
  }
  return std::nullopt;
}

std::optional<ShapeKind> shape_of(const std::string& w) {
  for (int s = 0; s < 3; ++s) {
    if (w == to_string(static_cast<ShapeKind>(s))) return static_cast<ShapeKind>(s);
  }
  return std::nullopt;
}

std::optional<ShapeKind> plural_shape_of(const std::string& w) {
  for (int s = 0; s < 3; ++s) {
    if (w == std::string(to_string(static_cast<ShapeKind>(s))) + "s") return static_cast<ShapeKind>(s);
  }
  return std::nullopt;
}

std::optional<int> concept_of(const std::string& w) {
  for (int k = 0; k < kConcepts; ++k) {
    if (w == "concept_" + std::to_string(k)) return k;
  }
  return std::nullopt;
}

std::optional<int> count_of(const std::string& w) {
  if (w == "one") return 1;
  if (w == "two") return 2;
  if (w == "three") return 3;
  if (w == "four") return 4;
  return std::nullopt;
}

std::optional<NounPhrase> parse_np(TokenCursor& cur) {
  if (!cur.accept("a") && !cur.accept("the")) return std::nullopt;
  NounPhrase np;
  if (auto c = color_of(cur.peek())) {
    np.color = *c;
    cur.take();
  }
  if (auto s = shape_of(cur.peek())) {
    np.shape = *s;
    cur.take();
    return np;
  }
  if (auto k = concept_of(cur.peek())) {
    np.concept_id = *k;
    cur.take();
    return np;
  }
  return std::nullopt;
}

std::optional<RelationKind> parse_relation(TokenCursor& cur) {
  if (cur.accept("left")) {
    if (!cur.accept("of")) return std::nullopt;
    return RelationKind::LeftOf;
  }
  if (cur.accept("right")) {
    if (!cur.accept("of")) return std::nullopt;
    return RelationKind::RightOf;
  }
  if (cur.accept("above")) return RelationKind::Above;
  if (cur.accept("below")) return RelationKind::Below;
  if (cur.accept("inside")) return RelationKind::Inside;
  return std::nullopt;
}

std::optional<ConstraintSet> parse_tokens(const std::vector<int>& tokens, const KnowledgeBase& kb) {
  const Vocabulary& v = Vocabulary::instance();
  std::vector<int> body;
  for (int id : tokens) {
    if (id == v.bos() || id == v.eos() || id == v.pad()) continue;
    if (id < 0 || id >= v.size()) return std::nullopt;
    body.push_back(id);
  }
  if (body.empty()) return std::nullopt;
  TokenCursor cur(body);

  // Counting: "<count> [color] <shape_plural>"
  if (auto n = count_of(cur.peek())) {
    cur.take();
    int color = -1;
    if (auto c = color_of(cur.peek())) {
      color = *c;
      cur.take();
    }
    auto s = plural_shape_of(cur.peek());
    if (!s) return std::nullopt;
    cur.take();
    if (!cur.done()) return std::nullopt;
    ConstraintSet out = {Constraint{Constraint::Kind::Count, *s, -1, *n}};
    if (color >= 0) out.push_back(Constraint{Constraint::Kind::AttributeBound, *s, color});
    return out;
  }

  auto np1 = parse_np(cur);
  if (!np1) return std::nullopt;

  if (cur.done()) {
    if (np1->concept_id >= 0) {
      const auto& e = kb.canon[static_cast<std::size_t>(np1->concept_id)];
      return ConstraintSet{Constraint{Constraint::Kind::ObjectPresent, e.canonical_shape, np1->color}};
    }
    return ConstraintSet{Constraint{Constraint::Kind::ObjectPresent, np1->shape, np1->color}};
  }

  if (cur.accept("and")) {
    auto np2 = parse_np(cur);
    if (!np2 || !cur.done()) return std::nullopt;
    if (np1->concept_id >= 0 || np2->concept_id >= 0) return std::nullopt;
    ConstraintSet out = {Constraint{Constraint::Kind::ObjectPresent, np1->shape, np1->color},
                         Constraint{Constraint::Kind::ObjectPresent, np2->shape, np2->color}};
    if (np1->color >= 0) out.push_back(Constraint{Constraint::Kind::AttributeBound, np1->shape, np1->color});
    if (np2->color >= 0) out.push_back(Constraint{Constraint::Kind::AttributeBound, np2->shape, np2->color});
    return out;
  }

  auto rel = parse_relation(cur);
  if (!rel) return std::nullopt;
  auto np2 = parse_np(cur);
  if (!np2 || !cur.done()) return std::nullopt;
  if (np1->concept_id >= 0 || np2->concept_id >= 0) return std::nullopt;
  Constraint r;
  r.kind = Constraint::Kind::Relation;
  r.shape = np1->shape;
  r.relation = *rel;
  r.object_shape = np2->shape;
  return ConstraintSet{Constraint{Constraint::Kind::ObjectPresent, np1->shape, np1->color},
                       Constraint{Constraint::Kind::ObjectPresent, np2->shape, np2->color}, r};
}

}  // namespace

ConstraintSet extract_constraints(const std::vector<int>& tokens, const KnowledgeBase& kb) {
  auto out = parse_tokens(tokens, kb);
  if (!out) fail("unparseable token sequence: '" + detokenize(tokens) + "'");
  return *out;
}

std::optional<ConstraintSet> try_extract_constraints(const std::vector<int>& tokens, const KnowledgeBase& kb) {
  return parse_tokens(tokens, kb);
}

// --- detection ------------------------------------------------------------------

DetectedScene detect_objects(const LatentImage& latent, float threshold) {
  struct CellLabel {
    bool occupied;
    int shape;
    int color;
  };
  std::array<CellLabel, kPatches> labels{};
  for (int r = 0; r < kGrid; ++r) {
    for (int c = 0; c < kGrid; ++c) {
      CellLabel& l = labels[static_cast<std::size_t>(r * kGrid + c)];
      l.occupied = latent.at(r, c, 0) > threshold;
      if (!l.occupied) continue;
      int bs = 0;
      for (int s = 1; s < 3; ++s) {
        if (latent.at(r, c, 1 + s) > latent.at(r, c, 1 + bs)) bs = s;
      }
      l.shape = bs;
      int bc = 0;
      for (int s = 1; s < 6; ++s) {
        if (latent.at(r, c, 4 + s) > latent.at(r, c, 4 + bc)) bc = s;
      }
      l.color = bc;
    }
  }

  DetectedScene out;
  std::array<bool, kPatches> seen{};
  for (int start = 0; start < kPatches; ++start) {
    if (seen[static_cast<std::size_t>(start)] || !labels[static_cast<std::size_t>(start)].occupied) continue;
    const CellLabel ref = labels[static_cast<std::size_t>(start)];
    std::vector<int> stack = {start};
    seen[static_cast<std::size_t>(start)] = true;
    int r0 = kGrid, c0 = kGrid, r1 = -1, c1 = -1, cells = 0;
    double occ_sum = 0.0;
    while (!stack.empty()) {
      const int cell = stack.back();
      stack.pop_back();
      const int r = cell / kGrid, c = cell % kGrid;
      ++cells;
      occ_sum += latent.at(r, c, 0);
      r0 = std::min(r0, r);
      c0 = std::min(c0, c);
      r1 = std::max(r1, r);
      c1 = std::max(c1, c);
      const int dr[4] = {-1, 1, 0, 0};
      const int dc[4] = {0, 0, -1, 1};
      for (int k = 0; k < 4; ++k) {
        const int nr = r + dr[k], nc = c + dc[k];
        if (nr < 0 || nc < 0 || nr >= kGrid || nc >= kGrid) continue;
        const int idx = nr * kGrid + nc;
        if (seen[static_cast<std::size_t>(idx)]) continue;
        const CellLabel& l = labels[static_cast<std::size_t>(idx)];
        if (!l.occupied || l.shape != ref.shape || l.color != ref.color) continue;
        seen[static_cast<std::size_t>(idx)] = true;
        stack.push_back(idx);
      }
    }
    DetectedObject obj;
    obj.shape = static_cast<ShapeKind>(ref.shape);
    obj.color = static_cast<ColorKind>(ref.color);
    obj.row0 = r0;
    obj.col0 = c0;
    obj.rows = r1 - r0 + 1;
    obj.cols = c1 - c0 + 1;
    obj.cells = cells;
    const float mean_occ = static_cast<float>(occ_sum / cells);
    obj.confidence = std::clamp(2.0f * (mean_occ - 0.5f), 0.0f, 1.0f);
    out.objects.push_back(obj);
  }
  std::sort(out.objects.begin(), out.objects.end(), [](const DetectedObject& a, const DetectedObject& b) {
    if (a.row0 != b.row0) return a.row0 < b.row0;
    if (a.col0 != b.col0) return a.col0 < b.col0;
    if (a.shape != b.shape) return a.shape < b.shape;
    return a.color < b.color;
  });
  return out;
}

SceneSpec DetectedScene::as_scene_spec() const {
  SceneSpec s;
  for (const auto& o : objects) {
    SceneObject so;
    so.shape = o.shape;
    so.color = o.color;
    so.row = o.row0;
    so.col = o.col0;
    so.size = std::max(o.rows, o.cols);
    s.objects.push_back(so);
  }
  return s;
}

bool constraint_satisfied(const Constraint& c, const DetectedScene& scene) {
  switch (c.kind) {
    case Constraint::Kind::ObjectPresent:
      for (const auto& o : scene.objects) {
        if (o.shape == c.shape && (c.color < 0 || static_cast<int>(o.color) == c.color)) return true;
      }
      return false;
    case Constraint::Kind::Count: {
      int n = 0;
      for (const auto& o : scene.objects) {
        if (o.shape == c.shape) ++n;
      }
      return n == c.count;
    }
    case Constraint::Kind::AttributeBound:
      for (const auto& o : scene.objects) {
        if (o.shape == c.shape && static_cast<int>(o.color) != c.color) return false;
      }
      return true;
    case Constraint::Kind::Relation:
      for (std::size_t i = 0; i < scene.objects.size(); ++i) {
        for (std::size_t j = 0; j < scene.objects.size(); ++j) {
          if (i == j) continue;
          const auto& a = scene.objects[i];
          const auto& b = scene.objects[j];
          if (a.shape != c.shape || b.shape != c.object_shape) continue;
          if (relation_holds_boxes(box_of(a), box_of(b), c.relation)) return true;
        }
      }
      return false;
  }
  return false;
}

bool same_visual_scene(const SceneSpec& a, const SceneSpec& b) {
  if (a.objects.size() != b.objects.size()) return false;
  auto key = [](const SceneObject& o) {
    return std::array<int, 5>{static_cast<int>(o.shape), static_cast<int>(o.color), o.row, o.col, o.size};
  };
  std::vector<std::array<int, 5>> ka, kb;
  for (const auto& o : a.objects) ka.push_back(key(o));
  for (const auto& o : b.objects) kb.push_back(key(o));
  std::sort(ka.begin(), ka.end());
  std::sort(kb.begin(), kb.end());
  return ka == kb;
}

KnowledgeBase build_knowledge_base(std::uint64_t seed) {
  KnowledgeBase kb;
  Rng rng(tag_seed(seed, "knowledge-base"));
  for (int i = 0; i < kConcepts; ++i) {
    kb.canon[static_cast<std::size_t>(i)].canonical_shape = random_shape(rng);
    kb.canon[static_cast<std::size_t>(i)].canonical_color = random_color(rng);
  }
  return kb;
}

// --- dataset --------------------------------------------------------------------

namespace {

std::pair<SceneSpec, PromptSpec> make_record(Rng& rng, PromptCategory cat, const KnowledgeBase& kb) {
  int variant = 0;
  switch (cat) {
    case PromptCategory::Counting: variant = rng.uniform() < 0.5 ? 1 : 0; break;
    case PromptCategory::Position: variant = rng.range_int(0, 4); break;
    case PromptCategory::Knowledge: variant = rng.uniform() < 0.25 ? 1 : 0; break;
    default: variant = 0; break;
  }
  SceneSpec scene = sample_scene(rng, cat, kb, variant);
  PromptSpec prompt = render_prompt(scene, cat, variant, kb);
  return {scene, prompt};
}

ordered_json constraint_to_json(const Constraint& c) {
  ordered_json j;
  switch (c.kind) {
    case Constraint::Kind::ObjectPresent: j["kind"] = "object_present"; break;
    case Constraint::Kind::Count: j["kind"] = "count"; break;
    case Constraint::Kind::Relation: j["kind"] = "relation"; break;
    case Constraint::Kind::AttributeBound: j["kind"] = "attribute_bound"; break;
  }
  j["shape"] = to_string(c.shape);
  if (c.color >= 0) {
    j["color"] = to_string(static_cast<ColorKind>(c.color));
  } else {
    j["color"] = nullptr;
  }
  if (c.kind == Constraint::Kind::Count) j["count"] = c.count;
  if (c.kind == Constraint::Kind::Relation) {
    j["relation"] = to_string(c.relation);
    j["object_shape"] = to_string(c.object_shape);
  }
  return j;
}

Constraint constraint_from_json(const ordered_json& j) {
  Constraint c;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "object_present") c.kind = Constraint::Kind::ObjectPresent;
  else if (kind == "count") c.kind = Constraint::Kind::Count;
  else if (kind == "relation") c.kind = Constraint::Kind::Relation;
  else if (kind == "attribute_bound") c.kind = Constraint::Kind::AttributeBound;
  else fail("unknown constraint kind: " + kind);
  const std::string shape = j.at("shape").get<std::string>();
  for (int s = 0; s < 3; ++s) {
    if (shape == to_string(static_cast<ShapeKind>(s))) c.shape = static_cast<ShapeKind>(s);
  }
  if (!j.at("color").is_null()) {
    const std::string color = j.at("color").get<std::string>();
    for (int k = 0; k < 6; ++k) {
      if (color == to_string(static_cast<ColorKind>(k))) c.color = k;
    }
  }
  if (c.kind == Constraint::Kind::Count) c.count = j.at("count").get<int>();
  if (c.kind == Constraint::Kind::Relation) {
    const std::string rel = j.at("relation").get<std::string>();
    for (int r = 0; r < 5; ++r) {
      if (rel == to_string(static_cast<RelationKind>(r))) c.relation = static_cast<RelationKind>(r);
    }
    const std::string os = j.at("object_shape").get<std::string>();
    for (int s = 0; s < 3; ++s) {
      if (os == to_string(static_cast<ShapeKind>(s))) c.object_shape = static_cast<ShapeKind>(s);
    }
  }
  return c;
}

ordered_json record_to_json(const DatasetRecord& r) {
  ordered_json j;
  j["id"] = r.id;
  j["text"] = r.prompt.text;
  j["tokens"] = r.prompt.tokens;
  j["category"] = to_string(r.prompt.category);
  ordered_json cons = ordered_json::array();
  for (const auto& c : r.prompt.constraints) cons.push_back(constraint_to_json(c));
  j["constraints"] = cons;
  ordered_json facts = ordered_json::array();
  for (const auto& f : r.prompt.fact_refs) {
    facts.push_back(ordered_json{{"concept_id", f.concept_id}, {"attribute", f.attribute}, {"suppressed", f.suppressed}});
  }
  j["fact_refs"] = facts;
  j["key_tokens"] = r.prompt.key_tokens;
  return j;
}

DatasetRecord record_from_json(const ordered_json& j, int latent_index) {
  DatasetRecord r;
  r.id = j.at("id").get<std::string>();
  r.latent_index = latent_index;
  r.prompt.text = j.at("text").get<std::string>();
  r.prompt.tokens = j.at("tokens").get<std::vector<int>>();
  r.prompt.category = category_from_string(j.at("category").get<std::string>());
  for (const auto& c : j.at("constraints")) r.prompt.constraints.push_back(constraint_from_json(c));
  for (const auto& f : j.at("fact_refs")) {
    r.prompt.fact_refs.push_back(
        FactRef{f.at("concept_id").get<int>(), f.at("attribute").get<std::string>(), f.at("suppressed").get<bool>()});
  }
  r.prompt.key_tokens = j.at("key_tokens").get<std::vector<int>>();
  return r;
}

void write_latents(const std::string& path, const std::vector<LatentImage>& latents) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail("cannot write " + path);
  for (const auto& img : latents) {
    f.write(reinterpret_cast<const char*>(img.grid.data()),
            static_cast<std::streamsize>(img.grid.size() * sizeof(float)));
  }
  if (!f) fail("short write to " + path);
}

std::vector<LatentImage> read_latents(const std::string& path, std::size_t count) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail("cannot read " + path);
  std::vector<LatentImage> out(count);
  for (auto& img : out) {
    f.read(reinterpret_cast<char*>(img.grid.data()), static_cast<std::streamsize>(img.grid.size() * sizeof(float)));
    if (!f) fail("latent file " + path + " truncated");
  }
  return out;
}

}  // namespace

Dataset build_dataset(std::uint64_t seed, int n_per_category, int n_eval_per_category) {
  if (n_per_category < 1) fail("build_dataset requires n_per_category >= 1");
  if (n_eval_per_category < 0) n_eval_per_category = std::max(4, n_per_category / 5);
  Dataset ds;
  ds.seed = seed;
  ds.n_per_category = n_per_category;
  ds.n_eval_per_category = n_eval_per_category;
  ds.kb = build_knowledge_base(seed);

  auto build_split = [&](bool eval_split, int n, std::vector<DatasetRecord>& records,
                         std::vector<LatentImage>& latents) {
    const std::uint64_t split_seed = tag_seed(seed, eval_split ? "eval" : "train");
    for (int cat = 0; cat < kCategories; ++cat) {
      for (int i = 0; i < n; ++i) {
        Rng rng(mix_seed(split_seed, static_cast<std::uint64_t>(cat), static_cast<std::uint64_t>(i)));
        auto [scene, prompt] = make_record(rng, static_cast<PromptCategory>(cat), ds.kb);
        DatasetRecord r;
        char idbuf[16];
        std::snprintf(idbuf, sizeof(idbuf), "%c%06d", eval_split ? 'e' : 't',
                      static_cast<int>(records.size()));
        r.id = idbuf;
        r.prompt = std::move(prompt);
        r.latent_index = static_cast<int>(latents.size());
        records.push_back(std::move(r));
        latents.push_back(rasterize_scene(scene));
      }
    }
  };
  build_split(false, n_per_category, ds.train, ds.train_latents);
  build_split(true, n_eval_per_category, ds.eval, ds.eval_latents);
  return ds;
}

void write_dataset(const Dataset& ds, const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail("cannot create dataset directory " + dir + ": " + ec.message());

  auto write_jsonl = [](const std::string& path, const std::vector<DatasetRecord>& records) {
    std::ofstream f(path);
    if (!f) fail("cannot write " + path);
    for (const auto& r : records) f << record_to_json(r).dump() << "\n";
    if (!f) fail("short write to " + path);
  };
  write_jsonl(dir + "/prompts.jsonl", ds.train);
  write_jsonl(dir + "/eval_prompts.jsonl", ds.eval);
  write_latents(dir + "/latents.bin", ds.train_latents);
  write_latents(dir + "/eval_latents.bin", ds.eval_latents);

  ordered_json kb;
  ordered_json concepts = ordered_json::array();
  for (int i = 0; i < kConcepts; ++i) {
    concepts.push_back(ordered_json{{"id", i},
                                    {"color", to_string(ds.kb.canon[static_cast<std::size_t>(i)].canonical_color)},
                                    {"shape", to_string(ds.kb.canon[static_cast<std::size_t>(i)].canonical_shape)}});
  }
  kb["concepts"] = concepts;
  std::ofstream kf(dir + "/knowledge.json");
  if (!kf) fail("cannot write " + dir + "/knowledge.json");
  kf << kb.dump() << "\n";

  ordered_json manifest;
  manifest["format_version"] = 1;
  manifest["seed"] = ds.seed;
  manifest["n_per_category"] = ds.n_per_category;
  manifest["n_eval_per_category"] = ds.n_eval_per_category;
  manifest["train_records"] = ds.train.size();
  manifest["eval_records"] = ds.eval.size();
  manifest["vocab_size"] = Vocabulary::instance().size();
  manifest["grid"] = ordered_json{{"size", kGrid}, {"channels", kChannels}};
  std::ofstream mf(dir + "/manifest.json");
  if (!mf) fail("cannot write " + dir + "/manifest.json");
  mf << manifest.dump(2) << "\n";
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream mf(dir + "/manifest.json");
  if (!mf) fail("missing dataset manifest: " + dir + "/manifest.json");
  ordered_json manifest = ordered_json::parse(mf);
  if (manifest.at("format_version").get<int>() != 1) fail("unsupported dataset format version");

  Dataset ds;
  ds.seed = manifest.at("seed").get<std::uint64_t>();
  ds.n_per_category = manifest.at("n_per_category").get<int>();
  ds.n_eval_per_category = manifest.at("n_eval_per_category").get<int>();

  std::ifstream kf(dir + "/knowledge.json");
  if (!kf) fail("missing knowledge base: " + dir + "/knowledge.json");
  ordered_json kb = ordered_json::parse(kf);
  for (const auto& e : kb.at("concepts")) {
    const int id = e.at("id").get<int>();
    auto& entry = ds.kb.canon.at(static_cast<std::size_t>(id));
    const std::string color = e.at("color").get<std::string>();
    for (int c = 0; c < 6; ++c) {
      if (color == to_string(static_cast<ColorKind>(c))) entry.canonical_color = static_cast<ColorKind>(c);
    }
    const std::string shape = e.at("shape").get<std::string>();
    for (int s = 0; s < 3; ++s) {
      if (shape == to_string(static_cast<ShapeKind>(s))) entry.canonical_shape = static_cast<ShapeKind>(s);
    }
  }

  auto read_jsonl = [](const std::string& path, std::vector<DatasetRecord>& records) {
    std::ifstream f(path);
    if (!f) fail("missing dataset file: " + path);
    std::string line;
    int idx = 0;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      records.push_back(record_from_json(ordered_json::parse(line), idx++));
    }
  };
  read_jsonl(dir + "/prompts.jsonl", ds.train);
  read_jsonl(dir + "/eval_prompts.jsonl", ds.eval);
  ds.train_latents = read_latents(dir + "/latents.bin", ds.train.size());
  ds.eval_latents = read_latents(dir + "/eval_latents.bin", ds.eval.size());
  return ds;
}

}  // namespace lvrpo
