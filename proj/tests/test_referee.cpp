#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "lvrpo/optim.hpp"
#include "lvrpo/model.hpp"
#include "lvrpo/referee.hpp"

using namespace lvrpo;

namespace {

Referee tiny_referee(std::uint64_t seed = 0) { return Referee::init(RefereeConfig{}, seed); }

double unit_norm_error(const Tensor<float>& rows) {
  double worst = 0.0;
  for (int i = 0; i < rows.rows(); ++i) {
    double ss = 0.0;
    for (int j = 0; j < rows.cols(); ++j) ss += static_cast<double>(rows.at(i, j)) * rows.at(i, j);
    worst = std::max(worst, std::abs(std::sqrt(ss) - 1.0));
  }
  return worst;
}

}  // namespace

TEST_CASE("embeddings are unit norm and deterministic") {
  Referee r = tiny_referee(1);
  auto kb = build_knowledge_base(0);
  Rng rng(2);
  auto scene = sample_scene(rng, PromptCategory::ColorAttribution, kb, 0);
  auto latent = rasterize_scene(scene);
  auto prompt = render_prompt(scene, PromptCategory::ColorAttribution, 0, kb);

  auto semb = encode_scene(r, latent);
  auto pemb = encode_prompt(r, prompt.tokens);
  CHECK(unit_norm_error(semb) < 1e-5);
  CHECK(unit_norm_error(pemb) < 1e-5);

  auto patches = encode_patches(r, latent);
  auto tokens = encode_tokens(r, prompt.tokens);
  CHECK(patches.rows() == kPatches);
  CHECK(tokens.rows() == static_cast<int>(prompt.tokens.size()));
  CHECK(unit_norm_error(patches) < 1e-5);
  CHECK(unit_norm_error(tokens) < 1e-5);

  auto semb2 = encode_scene(r, latent);
  for (std::size_t i = 0; i < semb.numel(); ++i) REQUIRE(semb.v()[i] == semb2.v()[i]);

  double dot = 0.0;
  for (std::size_t i = 0; i < semb.numel(); ++i) dot += static_cast<double>(semb.v()[i]) * semb.v()[i];
  CHECK(dot == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("sigmoid contrastive loss hand values") {
  // orthogonal rows: every similarity is zero, bias 0 -> ln 2 per pair
  auto scene = Tensor<float>::from({2, 4}, {1, 0, 0, 0, 0, 1, 0, 0});
  auto prompt = Tensor<float>::from({2, 4}, {0, 0, 1, 0, 0, 0, 0, 1});
  std::vector<std::vector<std::uint8_t>> matched = {{1, 0}, {0, 1}};
  auto temp = Tensor<float>::from({1}, {1.0f});
  auto bias = Tensor<float>::from({1}, {0.0f});
  auto loss = sigmoid_contrastive_loss<float>(scene, prompt, matched, temp, bias, nullptr);
  CHECK(loss.item() == doctest::Approx(std::log(2.0)).epsilon(1e-6));

  // perfectly separated pairs saturate to zero loss at a large temperature
  auto u = Tensor<float>::from({2, 4}, {1, 0, 0, 0, -1, 0, 0, 0});
  auto v = Tensor<float>::from({2, 4}, {1, 0, 0, 0, -1, 0, 0, 0});
  auto hot = Tensor<float>::from({1}, {60.0f});
  auto sat = sigmoid_contrastive_loss<float>(u, v, matched, hot, bias, nullptr);
  CHECK(sat.item() < 1e-6);

  CHECK_THROWS_AS(sigmoid_contrastive_loss<float>(Tensor<float>::zeros({1, 4}),
                                                  Tensor<float>::zeros({1, 4}), {{1}}, temp, bias, nullptr),
                  std::runtime_error);
}

TEST_CASE("tower and loss gradients match finite differences") {
  RefereeT<double> r = tiny_referee(3).cast<double>();
  auto kb = build_knowledge_base(0);
  Rng rng(4);
  auto scene = sample_scene(rng, PromptCategory::Colors, kb, 0);
  auto latent = rasterize_scene(scene);
  auto prompt = render_prompt(scene, PromptCategory::Colors, 0, kb);
  auto patches = latent_patches<double>(latent);

  auto f = [&](Tape<double>* tape) {
    auto semb = encode_scene_t<double>(r, patches, tape);
    auto pemb = encode_prompt_t<double>(r, prompt.tokens, tape);
    std::vector<std::vector<std::uint8_t>> matched = {{1, 0}, {0, 1}};
    auto sc = concat_rows<double>({semb, semb}, tape);
    auto pr = concat_rows<double>({pemb, pemb}, tape);
    return sigmoid_contrastive_loss<double>(sc, pr, matched, r.params.at("pair_temp"),
                                            r.params.at("pair_bias"), tape);
  };
  CHECK(check_gradients_fd(f, {&r.params.at("scene.patch_w"), &r.params.at("scene.head_w"),
                               &r.params.at("text.tok_emb"), &r.params.at("scene.layer0.wq"),
                               &r.params.at("pair_temp"), &r.params.at("pair_bias")}) < 1e-4);

  auto fd = [&](Tape<double>* tape) {
    auto pf = encode_patches_t<double>(r, patches, tape);
    auto tf = encode_tokens_t<double>(r, prompt.tokens, tape);
    auto keys = gather_rows(tf, prompt.key_tokens, tape);
    auto sims = matmul_nt(pf, keys, tape);
    return mean_all(col_max(sims, tape), tape);
  };
  CHECK(check_gradients_fd(fd, {&r.params.at("scene.dense_head_w"), &r.params.at("text.dense_head_w")}) <
        1e-4);
}

TEST_CASE("dense grounding reward equals the brute-force enumeration") {
  Referee r = tiny_referee(5);
  auto kb = build_knowledge_base(0);
  int checked = 0;
  for (std::uint64_t s = 0; s < 40; ++s) {
    Rng rng(mix_seed(900, s));
    const auto cat = static_cast<PromptCategory>(s % kCategories);
    const int variant = cat == PromptCategory::Position ? static_cast<int>(s / kCategories) % 5 : 0;
    auto scene = sample_scene(rng, cat, kb, variant);
    auto latent = rasterize_scene(scene);
    auto prompt = render_prompt(scene, cat, variant, kb);
    if (prompt.key_tokens.empty()) continue;
    const double got = dense_grounding_reward(latent, prompt, r);

    auto pf = encode_patches(r, latent);
    auto tf = encode_tokens(r, prompt.tokens);
    double acc = 0.0;
    for (int key : prompt.key_tokens) {
      double best = -2.0;
      for (int p = 0; p < kPatches; ++p) {
        double dot = 0.0;
        for (int j = 0; j < r.cfg.dim; ++j) dot += static_cast<double>(pf.at(p, j)) * tf.at(key, j);
        best = std::max(best, dot);
      }
      acc += std::clamp(best, -1.0, 1.0);
    }
    const double oracle = std::clamp(acc / prompt.key_tokens.size(), -1.0, 1.0);
    REQUIRE(got == oracle);  // bit-exact
    CHECK(got >= -1.0);
    CHECK(got <= 1.0);
    ++checked;
  }
  CHECK(checked >= 30);

  PromptSpec empty_keys;
  empty_keys.tokens = tokenize_prompt("a circle");
  CHECK_THROWS_AS(dense_grounding_reward(LatentImage{}, empty_keys, r), std::runtime_error);
}

TEST_CASE("short pretraining run improves the contrastive loss and retrieval") {
  auto ds = build_dataset(7, 12, 6);
  Referee r = tiny_referee(8);
  const double acc_before = referee_retrieval_accuracy(r, ds, 8, 1);

  auto params = r.params.all();
  auto state = OptimizerState::make(params, 2e-3f, 0.01f);
  Rng rng(9);
  std::vector<double> losses;
  for (int step = 0; step < 120; ++step) {
    std::vector<const DatasetRecord*> recs;
    for (int i = 0; i < 8; ++i) recs.push_back(&ds.train[rng.below(ds.train.size())]);
    Tape<float> tape;
    std::vector<Tensor<float>> sembs, pembs;
    for (const auto* rec : recs) {
      auto patches = latent_patches<float>(ds.latent_of(*rec, false));
      sembs.push_back(encode_scene_t<float>(r, patches, &tape));
      pembs.push_back(encode_prompt_t<float>(r, rec->prompt.tokens, &tape));
    }
    std::vector<std::vector<std::uint8_t>> matched(8, std::vector<std::uint8_t>(8, 0));
    for (int i = 0; i < 8; ++i) {
      for (int j = 0; j < 8; ++j) matched[i][j] = recs[i]->prompt.text == recs[j]->prompt.text;
      matched[i][i] = 1;
    }
    auto loss = sigmoid_contrastive_loss<float>(concat_rows(sembs, &tape), concat_rows(pembs, &tape),
                                                matched, r.params.at("pair_temp"), r.params.at("pair_bias"),
                                                &tape);
    losses.push_back(loss.item());
    tape.backward(loss);
    clip_global_grad_norm(params, 1.0);
    adamw_step(params, state);
  }
  auto window = [&](int a, int b) {
    double s = 0;
    for (int i = a; i < b; ++i) s += losses[static_cast<std::size_t>(i)];
    return s / (b - a);
  };
  CHECK(window(60, 120) < window(0, 60));
  CHECK(referee_retrieval_accuracy(r, ds, 8, 1) > acc_before);
}

TEST_CASE("freeze and checksum") {
  Referee r = tiny_referee(11);
  CHECK_FALSE(referee_checksum_valid(r));  // not frozen yet
  freeze_referee(r);
  CHECK(referee_checksum_valid(r));
  r.params.at("pair_bias").v()[0] += 1e-3f;
  CHECK_FALSE(referee_checksum_valid(r));
}

TEST_CASE("semantic ascent raises similarity for targeted outputs") {
  Referee r = tiny_referee(13);
  auto kb = build_knowledge_base(0);
  Rng rng(14);
  auto scene = sample_scene(rng, PromptCategory::Colors, kb, 0);
  auto latent = rasterize_scene(scene);
  auto prompt = render_prompt(scene, PromptCategory::Colors, 0, kb);

  const double before = semantic_reward(latent, prompt.tokens, r);
  std::vector<const LatentImage*> lats = {&latent};
  std::vector<const std::vector<int>*> prompts = {&prompt.tokens};
  for (int i = 0; i < 25; ++i) referee_ascend_semantic(r, lats, prompts, 1e-3f);
  CHECK(semantic_reward(latent, prompt.tokens, r) > before);
}
