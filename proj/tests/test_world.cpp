#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "lvrpo/world.hpp"

using namespace lvrpo;

namespace {

KnowledgeBase kb0() { return build_knowledge_base(0); }

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("tokenizer round trip") {
  auto ids = tokenize_prompt("a red square");
  const Vocabulary& v = Vocabulary::instance();
  REQUIRE(ids.size() == 5);
  CHECK(ids.front() == v.bos());
  CHECK(ids.back() == v.eos());
  CHECK(detokenize(ids) == "a red square");

  CHECK(tokenize_prompt("").size() == 2);
  CHECK(detokenize(tokenize_prompt("")) == "");
  CHECK_THROWS_WITH_AS(tokenize_prompt("a zebra"), doctest::Contains("zebra"), std::runtime_error);
}

TEST_CASE("scene sampling per category") {
  auto kb = kb0();
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    auto single = sample_scene(seed, PromptCategory::SingleObject, kb);
    CHECK(single.objects.size() >= 1);

    Rng rng(seed);
    auto counting = sample_scene(rng, PromptCategory::Counting, kb, 0);
    int n = 0;
    for (const auto& o : counting.objects) {
      if (o.shape == counting.objects[0].shape) ++n;
    }
    CHECK(n >= 2);
    CHECK(n <= 4);
  }
  // determinism
  auto a = sample_scene(std::uint64_t(7), PromptCategory::Position, kb);
  auto b = sample_scene(std::uint64_t(7), PromptCategory::Position, kb);
  CHECK(same_visual_scene(a, b));
}

TEST_CASE("rasterize: 2x2 square covers exactly 4 cells, channels one-hot") {
  SceneSpec s;
  s.objects.push_back(SceneObject{ShapeKind::Square, ColorKind::Blue, 3, 5, 2, -1});
  auto img = rasterize_scene(s);
  int occupied = 0;
  for (int r = 0; r < kGrid; ++r) {
    for (int c = 0; c < kGrid; ++c) {
      const float occ = img.at(r, c, 0);
      CHECK((occ == 0.0f || occ == 1.0f));
      if (occ == 1.0f) ++occupied;
      for (int ch = 0; ch < kChannels; ++ch) {
        const float v = img.at(r, c, ch);
        CHECK((v == 0.0f || v == 1.0f));
      }
    }
  }
  CHECK(occupied == 4);
  CHECK(img.at(3, 5, 1 + static_cast<int>(ShapeKind::Square)) == 1.0f);
  CHECK(img.at(3, 5, 4 + static_cast<int>(ColorKind::Blue)) == 1.0f);
}

TEST_CASE("detect/rasterize round trip over random scenes") {
  auto kb = kb0();
  int checked = 0;
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    const auto cat = static_cast<PromptCategory>(seed % kCategories);
    Rng rng(mix_seed(99, seed));
    auto scene = sample_scene(rng, cat, kb, -1);
    auto latent = rasterize_scene(scene);
    auto detected = detect_objects(latent);
    CHECK(same_visual_scene(detected.as_scene_spec(), scene));
    for (const auto& o : detected.objects) CHECK(o.confidence == doctest::Approx(1.0f));
    ++checked;
  }
  CHECK(checked == 300);
}

TEST_CASE("detect on empty and soft grids") {
  LatentImage zero;
  CHECK(detect_objects(zero).objects.empty());

  LatentImage soft;
  for (int r = 4; r < 6; ++r) {
    for (int c = 4; c < 6; ++c) {
      soft.at(r, c, 0) = 0.75f;
      soft.at(r, c, 1) = 1.0f;
      soft.at(r, c, 4) = 1.0f;
    }
  }
  auto det = detect_objects(soft);
  REQUIRE(det.objects.size() == 1);
  CHECK(det.objects[0].confidence == doctest::Approx(0.5f));
}

TEST_CASE("render_prompt produces paper-style constraint sets") {
  auto kb = kb0();
  // "a blue circle inside a red square"
  SceneSpec s;
  s.objects.push_back(SceneObject{ShapeKind::Circle, ColorKind::Blue, 5, 5, 2, -1});
  s.objects.push_back(SceneObject{ShapeKind::Square, ColorKind::Red, 4, 4, 5, -1});
  auto p = render_prompt(s, PromptCategory::Position, static_cast<int>(RelationKind::Inside), kb);
  CHECK(p.text == "a blue circle inside a red square");
  REQUIRE(p.constraints.size() == 3);
  CHECK(p.constraints[0] == Constraint{Constraint::Kind::ObjectPresent, ShapeKind::Circle,
                                       static_cast<int>(ColorKind::Blue)});
  CHECK(p.constraints[1] == Constraint{Constraint::Kind::ObjectPresent, ShapeKind::Square,
                                       static_cast<int>(ColorKind::Red)});
  CHECK(p.constraints[2].kind == Constraint::Kind::Relation);
  CHECK(p.constraints[2].relation == RelationKind::Inside);

  // single red square
  SceneSpec s2;
  s2.objects.push_back(SceneObject{ShapeKind::Square, ColorKind::Red, 0, 0, 3, -1});
  auto p2 = render_prompt(s2, PromptCategory::Colors, 0, kb);
  CHECK(p2.text == "a red square");
  REQUIRE(p2.key_tokens.size() == 2);
  const Vocabulary& v = Vocabulary::instance();
  CHECK(p2.tokens[static_cast<std::size_t>(p2.key_tokens[0])] == v.id("red"));
  CHECK(p2.tokens[static_cast<std::size_t>(p2.key_tokens[1])] == v.id("square"));

  // concept prompt, plain: fact ref + canonical-shape constraint
  SceneSpec s3;
  SceneObject o3;
  o3.concept_id = 3;
  o3.shape = kb.canon[3].canonical_shape;
  o3.color = kb.canon[3].canonical_color;
  o3.size = 3;
  s3.objects.push_back(o3);
  auto p3 = render_prompt(s3, PromptCategory::Knowledge, 0, kb);
  REQUIRE(p3.fact_refs.size() == 1);
  CHECK(p3.fact_refs[0].concept_id == 3);
  CHECK_FALSE(p3.fact_refs[0].suppressed);
  REQUIRE(p3.constraints.size() == 1);
  CHECK(p3.constraints[0].shape == kb.canon[3].canonical_shape);
  CHECK(p3.constraints[0].color == -1);

  // incompatible template
  CHECK_THROWS_AS(render_prompt(s2, PromptCategory::TwoObjects, 0, kb), std::runtime_error);
}

TEST_CASE("extract_constraints matches templates and parses hand cases") {
  auto kb = kb0();
  auto cs = extract_constraints(tokenize_prompt("two green triangles"), kb);
  REQUIRE(cs.size() == 2);
  CHECK(cs[0] == Constraint{Constraint::Kind::Count, ShapeKind::Triangle, -1, 2});
  CHECK(cs[1] == Constraint{Constraint::Kind::AttributeBound, ShapeKind::Triangle,
                            static_cast<int>(ColorKind::Green)});

  auto cs2 = extract_constraints(tokenize_prompt("a circle"), kb);
  REQUIRE(cs2.size() == 1);
  CHECK(cs2[0] == Constraint{Constraint::Kind::ObjectPresent, ShapeKind::Circle, -1});

  CHECK_THROWS_WITH_AS(extract_constraints(tokenize_prompt("and and and"), kb),
                       doctest::Contains("unparseable"), std::runtime_error);
  CHECK_FALSE(try_extract_constraints(tokenize_prompt("red red"), kb).has_value());
}

TEST_CASE("parser equals template constraints corpus-wide") {
  auto ds = build_dataset(11, 12, 4);
  int n = 0;
  auto check_split = [&](const std::vector<DatasetRecord>& recs) {
    for (const auto& r : recs) {
      auto parsed = extract_constraints(r.prompt.tokens, ds.kb);
      REQUIRE(parsed.size() == r.prompt.constraints.size());
      for (std::size_t i = 0; i < parsed.size(); ++i) CHECK(parsed[i] == r.prompt.constraints[i]);
      ++n;
    }
  };
  check_split(ds.train);
  check_split(ds.eval);
  CHECK(n == 12 * kCategories + 4 * kCategories);
}

TEST_CASE("vocabulary closure over a built corpus") {
  auto ds = build_dataset(5, 10, 4);
  for (const auto& r : ds.train) {
    auto ids = tokenize_prompt(r.prompt.text);  // must not throw
    CHECK(detokenize(ids) == r.prompt.text);
    CHECK(ids == r.prompt.tokens);
    for (int k : r.prompt.key_tokens) {
      CHECK(k >= 0);
      CHECK(k < static_cast<int>(r.prompt.tokens.size()));
    }
  }
}

TEST_CASE("dataset build counts, determinism, self-consistency") {
  auto ds = build_dataset(0, 10, 4);
  CHECK(ds.train.size() == static_cast<std::size_t>(10 * kCategories));
  CHECK(ds.eval.size() == static_cast<std::size_t>(4 * kCategories));

  // every record's constraints hold on its own rasterized latent
  for (const auto& r : ds.train) {
    auto det = detect_objects(ds.latent_of(r, false));
    for (const auto& c : r.prompt.constraints) CHECK(constraint_satisfied(c, det));
  }

  namespace fs = std::filesystem;
  const std::string d1 = (fs::temp_directory_path() / "lvrpo_ds_a").string();
  const std::string d2 = (fs::temp_directory_path() / "lvrpo_ds_b").string();
  fs::remove_all(d1);
  fs::remove_all(d2);
  write_dataset(ds, d1);
  write_dataset(build_dataset(0, 10, 4), d2);
  for (const char* name : {"/prompts.jsonl", "/eval_prompts.jsonl", "/latents.bin", "/eval_latents.bin",
                           "/knowledge.json", "/manifest.json"}) {
    CHECK(read_file(d1 + name) == read_file(d2 + name));
  }

  auto loaded = load_dataset(d1);
  CHECK(loaded.train.size() == ds.train.size());
  CHECK(loaded.eval.size() == ds.eval.size());
  CHECK(loaded.train[5].prompt.text == ds.train[5].prompt.text);
  CHECK(loaded.train[5].prompt.constraints.size() == ds.train[5].prompt.constraints.size());
  CHECK(loaded.train_latents[5].grid == ds.train_latents[5].grid);
  for (int i = 0; i < kConcepts; ++i) {
    CHECK(loaded.kb.canon[static_cast<std::size_t>(i)].canonical_color ==
          ds.kb.canon[static_cast<std::size_t>(i)].canonical_color);
    CHECK(loaded.kb.canon[static_cast<std::size_t>(i)].canonical_shape ==
          ds.kb.canon[static_cast<std::size_t>(i)].canonical_shape);
  }
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("knowledge override prompts suppress the fact") {
  auto kb = kb0();
  int seen_override = 0;
  for (std::uint64_t i = 0; i < 40; ++i) {
    Rng rng(mix_seed(4242, i));
    auto scene = sample_scene(rng, PromptCategory::Knowledge, kb, 1);
    auto p = render_prompt(scene, PromptCategory::Knowledge, 1, kb);
    REQUIRE(p.fact_refs.size() == 1);
    CHECK(p.fact_refs[0].suppressed);
    REQUIRE(p.constraints.size() == 1);
    CHECK(p.constraints[0].color >= 0);  // stated color beats the prior
    const int cid = p.fact_refs[0].concept_id;
    CHECK(p.constraints[0].color != static_cast<int>(kb.canon[static_cast<std::size_t>(cid)].canonical_color));
    ++seen_override;
  }
  CHECK(seen_override == 40);
}

TEST_CASE("constraint satisfaction on detected scenes") {
  SceneSpec s;
  s.objects.push_back(SceneObject{ShapeKind::Circle, ColorKind::Green, 2, 2, 2, -1});
  s.objects.push_back(SceneObject{ShapeKind::Square, ColorKind::Red, 2, 8, 3, -1});
  auto det = detect_objects(rasterize_scene(s));

  CHECK(constraint_satisfied(Constraint{Constraint::Kind::ObjectPresent, ShapeKind::Circle, -1}, det));
  CHECK_FALSE(constraint_satisfied(Constraint{Constraint::Kind::ObjectPresent, ShapeKind::Triangle, -1}, det));
  CHECK(constraint_satisfied(Constraint{Constraint::Kind::Count, ShapeKind::Square, -1, 1}, det));
  CHECK_FALSE(constraint_satisfied(Constraint{Constraint::Kind::Count, ShapeKind::Square, -1, 2}, det));
  Constraint rel;
  rel.kind = Constraint::Kind::Relation;
  rel.shape = ShapeKind::Circle;
  rel.relation = RelationKind::LeftOf;
  rel.object_shape = ShapeKind::Square;
  CHECK(constraint_satisfied(rel, det));
  rel.relation = RelationKind::RightOf;
  CHECK_FALSE(constraint_satisfied(rel, det));

  CHECK(constraint_satisfied(
      Constraint{Constraint::Kind::AttributeBound, ShapeKind::Circle, static_cast<int>(ColorKind::Green)}, det));
  CHECK_FALSE(constraint_satisfied(
      Constraint{Constraint::Kind::AttributeBound, ShapeKind::Circle, static_cast<int>(ColorKind::Red)}, det));
}
