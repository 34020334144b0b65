#include "lvrpo/referee.hpp"

#include <algorithm>
#include <cmath>

#include "lvrpo/model.hpp"
#include "lvrpo/optim.hpp"

namespace lvrpo {

// --- parameters -----------------------------------------------------------------

template <class S>
RefereeT<S> RefereeT<S>::init(const RefereeConfig& cfg, std::uint64_t seed) {
  RefereeT<S> r;
  r.cfg = cfg;
  Rng rng(tag_seed(seed, "referee-init"));
  const int d = cfg.dim, h = cfg.ffn_hidden;
  const S w0 = S(0.05);
  auto& ps = r.params;
  auto add_tower = [&](const std::string& tower) {
    for (int i = 0; i < cfg.n_layers; ++i) {
      const std::string pre = tower + ".layer" + std::to_string(i) + ".";
      ps.add(pre + "ln1_g", Tensor<S>::full({d}, S(1)));
      ps.add(pre + "ln1_b", Tensor<S>::zeros({d}));
      ps.add(pre + "wq", Tensor<S>::randn({d, d}, rng, w0));
      ps.add(pre + "bq", Tensor<S>::zeros({d}));
      ps.add(pre + "wk", Tensor<S>::randn({d, d}, rng, w0));
      ps.add(pre + "bk", Tensor<S>::zeros({d}));
      ps.add(pre + "wv", Tensor<S>::randn({d, d}, rng, w0));
      ps.add(pre + "bv", Tensor<S>::zeros({d}));
      ps.add(pre + "wo", Tensor<S>::randn({d, d}, rng, w0));
      ps.add(pre + "bo", Tensor<S>::zeros({d}));
      ps.add(pre + "ln2_g", Tensor<S>::full({d}, S(1)));
      ps.add(pre + "ln2_b", Tensor<S>::zeros({d}));
      ps.add(pre + "ffn_w1", Tensor<S>::randn({d, h}, rng, w0));
      ps.add(pre + "ffn_b1", Tensor<S>::zeros({h}));
      ps.add(pre + "ffn_w2", Tensor<S>::randn({h, d}, rng, w0));
      ps.add(pre + "ffn_b2", Tensor<S>::zeros({d}));
    }
    ps.add(tower + ".ln_f_g", Tensor<S>::full({d}, S(1)));
    ps.add(tower + ".ln_f_b", Tensor<S>::zeros({d}));
    ps.add(tower + ".head_w", Tensor<S>::randn({d, d}, rng, w0));
    ps.add(tower + ".head_b", Tensor<S>::zeros({d}));
    ps.add(tower + ".dense_head_w", Tensor<S>::randn({d, d}, rng, w0));
    ps.add(tower + ".dense_head_b", Tensor<S>::zeros({d}));
  };
  ps.add("scene.patch_w", Tensor<S>::randn({kChannels, d}, rng, S(0.3)));
  ps.add("scene.patch_b", Tensor<S>::zeros({d}));
  ps.add("scene.pos", Tensor<S>::randn({kPatches, d}, rng, w0));
  add_tower("scene");
  ps.add("text.tok_emb", Tensor<S>::randn({Vocabulary::instance().size(), d}, rng, w0));
  ps.add("text.pos", Tensor<S>::randn({cfg.max_text, d}, rng, w0));
  add_tower("text");
  ps.add("pair_temp", Tensor<S>::full({1}, S(10)));
  ps.add("pair_bias", Tensor<S>::full({1}, S(-10)));
  ps.add("dense_temp", Tensor<S>::full({1}, S(10)));
  ps.add("dense_bias", Tensor<S>::full({1}, S(-10)));
  return r;
}

void freeze_referee(Referee& r) {
  r.frozen = true;
  r.frozen_checksum = params_checksum(r.params);
}

bool referee_checksum_valid(const Referee& r) {
  return r.frozen && params_checksum(r.params) == r.frozen_checksum;
}

// --- towers ---------------------------------------------------------------------

namespace {

template <class S>
Tensor<S> tower_block(const RefereeT<S>& r, const std::string& tower, Tensor<S> x, Tape<S>* tape) {
  const auto& ps = r.params;
  const int d = r.cfg.dim;
  const int heads = r.cfg.n_heads;
  const int dh = d / heads;
  const S inv_sqrt_dh = S(1) / std::sqrt(static_cast<S>(dh));
  for (int i = 0; i < r.cfg.n_layers; ++i) {
    const std::string pre = tower + ".layer" + std::to_string(i) + ".";
    auto h = layer_norm(x, ps.at(pre + "ln1_g"), ps.at(pre + "ln1_b"), tape);
    auto q = add_rowvec(matmul(h, ps.at(pre + "wq"), tape), ps.at(pre + "bq"), tape);
    auto k = add_rowvec(matmul(h, ps.at(pre + "wk"), tape), ps.at(pre + "bk"), tape);
    auto v = add_rowvec(matmul(h, ps.at(pre + "wv"), tape), ps.at(pre + "bv"), tape);
    std::vector<Tensor<S>> heads_out;
    for (int hd = 0; hd < heads; ++hd) {
      auto qh = slice_cols(q, hd * dh, (hd + 1) * dh, tape);
      auto kh = slice_cols(k, hd * dh, (hd + 1) * dh, tape);
      auto vh = slice_cols(v, hd * dh, (hd + 1) * dh, tape);
      auto scores = scale(matmul_nt(qh, kh, tape), inv_sqrt_dh, tape);
      auto probs = softmax_rows(scores, tape);
      heads_out.push_back(matmul(probs, vh, tape));
    }
    auto ctx = heads == 1 ? heads_out[0] : concat_cols(heads_out, tape);
    auto attn = add_rowvec(matmul(ctx, ps.at(pre + "wo"), tape), ps.at(pre + "bo"), tape);
    x = add(x, attn, tape);
    auto h2 = layer_norm(x, ps.at(pre + "ln2_g"), ps.at(pre + "ln2_b"), tape);
    auto f = add_rowvec(matmul(h2, ps.at(pre + "ffn_w1"), tape), ps.at(pre + "ffn_b1"), tape);
    f = gelu(f, tape);
    f = add_rowvec(matmul(f, ps.at(pre + "ffn_w2"), tape), ps.at(pre + "ffn_b2"), tape);
    x = add(x, f, tape);
  }
  return layer_norm(x, ps.at(tower + ".ln_f_g"), ps.at(tower + ".ln_f_b"), tape);
}

template <class S>
Tensor<S> mean_pool(const Tensor<S>& rows, Tape<S>* tape) {
  Tensor<S> ones = Tensor<S>::full({1, rows.rows()}, S(1));
  return scale(matmul(ones, rows, tape), S(1) / static_cast<S>(rows.rows()), tape);
}

template <class S>
Tensor<S> pooled_head(const RefereeT<S>& r, const std::string& tower, const Tensor<S>& feats,
                      Tape<S>* tape) {
  auto pooled = mean_pool(feats, tape);
  auto head = add_rowvec(matmul(pooled, r.params.at(tower + ".head_w"), tape),
                         r.params.at(tower + ".head_b"), tape);
  return row_l2_normalize(head, tape);
}

template <class S>
Tensor<S> dense_head(const RefereeT<S>& r, const std::string& tower, const Tensor<S>& feats,
                     Tape<S>* tape) {
  auto head = add_rowvec(matmul(feats, r.params.at(tower + ".dense_head_w"), tape),
                         r.params.at(tower + ".dense_head_b"), tape);
  return row_l2_normalize(head, tape);
}

double cosine_clamped(const Tensor<float>& a, const Tensor<float>& b) {
  double dot = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) dot += static_cast<double>(a.v()[i]) * b.v()[i];
  return std::clamp(dot, -1.0, 1.0);
}

}  // namespace

template <class S>
Tensor<S> scene_tower(const RefereeT<S>& r, const Tensor<S>& patches, Tape<S>* tape) {
  auto x = add_rowvec(matmul(patches, r.params.at("scene.patch_w"), tape), r.params.at("scene.patch_b"), tape);
  x = add(x, r.params.at("scene.pos"), tape);
  return tower_block(r, "scene", x, tape);
}

template <class S>
Tensor<S> prompt_tower(const RefereeT<S>& r, const std::vector<int>& tokens, Tape<S>* tape) {
  if (static_cast<int>(tokens.size()) > r.cfg.max_text) fail("prompt too long for the referee tower");
  auto x = gather_rows(r.params.at("text.tok_emb"), tokens, tape);
  auto pos = slice_rows(r.params.at("text.pos"), 0, static_cast<int>(tokens.size()), tape);
  x = add(x, pos, tape);
  return tower_block(r, "text", x, tape);
}

template <class S>
Tensor<S> encode_scene_t(const RefereeT<S>& r, const Tensor<S>& patches, Tape<S>* tape) {
  return pooled_head(r, "scene", scene_tower(r, patches, tape), tape);
}

template <class S>
Tensor<S> encode_prompt_t(const RefereeT<S>& r, const std::vector<int>& tokens, Tape<S>* tape) {
  return pooled_head(r, "text", prompt_tower(r, tokens, tape), tape);
}

Tensor<float> encode_scene(const Referee& r, const LatentImage& latent) {
  auto patches = latent_patches<float>(latent);
  return encode_scene_t<float>(r, patches, nullptr);
}

Tensor<float> encode_prompt(const Referee& r, const std::vector<int>& tokens) {
  return encode_prompt_t<float>(r, tokens, nullptr);
}

template <class S>
Tensor<S> encode_patches_t(const RefereeT<S>& r, const Tensor<S>& patches, Tape<S>* tape) {
  return dense_head(r, "scene", scene_tower(r, patches, tape), tape);
}

template <class S>
Tensor<S> encode_tokens_t(const RefereeT<S>& r, const std::vector<int>& tokens, Tape<S>* tape) {
  return dense_head(r, "text", prompt_tower(r, tokens, tape), tape);
}

Tensor<float> encode_patches(const Referee& r, const LatentImage& latent) {
  auto patches = latent_patches<float>(latent);
  return encode_patches_t<float>(r, patches, nullptr);
}

Tensor<float> encode_tokens(const Referee& r, const std::vector<int>& tokens) {
  return encode_tokens_t<float>(r, tokens, nullptr);
}

// --- losses and rewards -------------------------------------------------------------

template <class S>
Tensor<S> sigmoid_contrastive_loss(const Tensor<S>& scene_embs, const Tensor<S>& prompt_embs,
                                   const std::vector<std::vector<std::uint8_t>>& matched,
                                   const Tensor<S>& temperature, const Tensor<S>& bias, Tape<S>* tape) {
  const int n = scene_embs.rows();
  if (n < 2) fail("sigmoid_contrastive_loss requires a batch of at least 2");
  if (prompt_embs.rows() != n) fail("sigmoid_contrastive_loss batch mismatch");
  Tensor<S> labels = Tensor<S>::zeros({n, n});
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      labels.at(i, j) = matched[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] ? S(1) : S(-1);
    }
  }
  auto sims = matmul_nt(scene_embs, prompt_embs, tape);
  auto z = add_scalar_t(mul_scalar_t(sims, temperature, tape), bias, tape);
  auto neg = scale(mul(z, labels, tape), S(-1), tape);
  return mean_all(softplus(neg, tape), tape);
}

double semantic_reward(const LatentImage& latent, const std::vector<int>& prompt_tokens, const Referee& r) {
  return cosine_clamped(encode_scene(r, latent), encode_prompt(r, prompt_tokens));
}

double dense_grounding_reward(const LatentImage& latent, const PromptSpec& prompt, const Referee& r) {
  if (prompt.key_tokens.empty()) fail("dense_grounding_reward: prompt has no key tokens");
  auto patch_feats = encode_patches(r, latent);
  auto token_feats = encode_tokens(r, prompt.tokens);
  const int d = r.cfg.dim;
  double acc = 0.0;
  for (int key : prompt.key_tokens) {
    double best = -2.0;
    for (int p = 0; p < kPatches; ++p) {
      double dot = 0.0;
      for (int j = 0; j < d; ++j) {
        dot += static_cast<double>(patch_feats.at(p, j)) * token_feats.at(key, j);
      }
      best = std::max(best, dot);
    }
    acc += std::clamp(best, -1.0, 1.0);
  }
  return std::clamp(acc / static_cast<double>(prompt.key_tokens.size()), -1.0, 1.0);
}

// --- pretraining ----------------------------------------------------------------------

namespace {

std::vector<std::vector<std::uint8_t>> text_match_labels(const std::vector<const DatasetRecord*>& recs) {
  const std::size_t n = recs.size();
  std::vector<std::vector<std::uint8_t>> m(n, std::vector<std::uint8_t>(n, 0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      m[i][j] = recs[i]->prompt.text == recs[j]->prompt.text ? 1 : 0;
    }
  }
  for (std::size_t i = 0; i < n; ++i) m[i][i] = 1;
  return m;
}

// Dense grounding similarity matrix as tape ops: D[i][j] = mean over key
// tokens of prompt j of the max patch similarity against scene i.
Tensor<float> dense_similarity_matrix(const std::vector<Tensor<float>>& patch_feats,
                                      const std::vector<Tensor<float>>& token_feats,
                                      const std::vector<const DatasetRecord*>& recs, Tape<float>* tape) {
  const int n = static_cast<int>(patch_feats.size());
  std::vector<Tensor<float>> rows;
  for (int i = 0; i < n; ++i) {
    std::vector<Tensor<float>> cells;
    for (int j = 0; j < n; ++j) {
      const auto& keys = recs[static_cast<std::size_t>(j)]->prompt.key_tokens;
      auto key_feats = gather_rows(token_feats[static_cast<std::size_t>(j)], keys, tape);
      auto sims = matmul_nt(patch_feats[static_cast<std::size_t>(i)], key_feats, tape);  // 256 x |K|
      auto best = col_max(sims, tape);                                                   // 1 x |K|
      cells.push_back(mean_all(best, tape));
    }
    rows.push_back(concat_cols(cells, tape));
  }
  return concat_rows(rows, tape);
}

}  // namespace

double referee_retrieval_accuracy(const Referee& r, const Dataset& ds, int batch, std::uint64_t seed) {
  if (ds.eval.empty()) fail("referee_retrieval_accuracy: empty eval split");
  Rng rng(tag_seed(seed, "referee-eval"));
  int correct = 0, total = 0;
  const int n_batches = std::max<int>(4, static_cast<int>(ds.eval.size()) / batch);
  for (int b = 0; b < n_batches; ++b) {
    // unique prompt texts inside a batch so top-1 is well defined
    std::vector<const DatasetRecord*> recs;
    std::vector<std::string> texts;
    int guard = 0;
    while (static_cast<int>(recs.size()) < batch && guard < 4000) {
      ++guard;
      const auto& rec = ds.eval[rng.below(ds.eval.size())];
      if (std::find(texts.begin(), texts.end(), rec.prompt.text) != texts.end()) continue;
      recs.push_back(&rec);
      texts.push_back(rec.prompt.text);
    }
    if (static_cast<int>(recs.size()) < 2) continue;
    std::vector<Tensor<float>> sembs, pembs;
    for (const auto* rec : recs) {
      sembs.push_back(encode_scene(r, ds.latent_of(*rec, true)));
      pembs.push_back(encode_prompt(r, rec->prompt.tokens));
    }
    for (std::size_t i = 0; i < recs.size(); ++i) {
      double best = -2.0;
      std::size_t bj = 0;
      for (std::size_t j = 0; j < recs.size(); ++j) {
        const double sim = cosine_clamped(sembs[i], pembs[j]);
        if (sim > best) {
          best = sim;
          bj = j;
        }
      }
      if (recs[bj]->prompt.text == recs[i]->prompt.text) ++correct;
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / total;
}

Referee pretrain_referee(const Dataset& ds, const RefereePretrainOptions& opt, std::uint64_t seed) {
  Referee r = Referee::init(RefereeConfig{}, seed);
  auto params = r.params.all();
  auto state = OptimizerState::make(params, opt.lr, opt.weight_decay);
  Rng rng(tag_seed(seed, "referee-pretrain"));

  double last_acc = 0.0;
  for (long step = 0; step < opt.steps; ++step) {
    std::vector<const DatasetRecord*> recs;
    while (static_cast<int>(recs.size()) < opt.batch) {
      recs.push_back(&ds.train[rng.below(ds.train.size())]);
    }
    Tape<float> tape;
    std::vector<Tensor<float>> scene_feats, patch_feats, token_feats;
    std::vector<Tensor<float>> sembs, pembs;
    for (const auto* rec : recs) {
      auto patches = latent_patches<float>(ds.latent_of(*rec, false));
      auto sfeat = scene_tower<float>(r, patches, &tape);
      auto tfeat = prompt_tower<float>(r, rec->prompt.tokens, &tape);
      sembs.push_back(pooled_head(r, "scene", sfeat, &tape));
      pembs.push_back(pooled_head(r, "text", tfeat, &tape));
      patch_feats.push_back(dense_head(r, "scene", sfeat, &tape));
      token_feats.push_back(dense_head(r, "text", tfeat, &tape));
    }
    auto labels = text_match_labels(recs);
    auto scene_mat = concat_rows(sembs, &tape);
    auto prompt_mat = concat_rows(pembs, &tape);
    auto loss = sigmoid_contrastive_loss(scene_mat, prompt_mat, labels, r.params.at("pair_temp"),
                                         r.params.at("pair_bias"), &tape);
    if (opt.dense_weight > 0.0) {
      auto dsim = dense_similarity_matrix(patch_feats, token_feats, recs, &tape);
      Tensor<float> lab = Tensor<float>::zeros({opt.batch, opt.batch});
      for (int i = 0; i < opt.batch; ++i) {
        for (int j = 0; j < opt.batch; ++j) {
          lab.at(i, j) = labels[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] ? 1.0f : -1.0f;
        }
      }
      auto z = add_scalar_t(mul_scalar_t(dsim, r.params.at("dense_temp"), &tape), r.params.at("dense_bias"),
                            &tape);
      auto dloss = mean_all(softplus(scale(mul(z, lab, &tape), -1.0f, &tape), &tape), &tape);
      loss = add(loss, scale(dloss, static_cast<float>(opt.dense_weight), &tape), &tape);
    }
    tape.backward(loss);
    clip_global_grad_norm(params, 1.0);
    adamw_step(params, state);

    if ((step + 1) % opt.eval_every == 0 && step + 1 >= opt.min_steps) {
      last_acc = referee_retrieval_accuracy(r, ds, opt.batch, seed);
      if (last_acc >= std::min(0.99, opt.target_accuracy + 0.02)) break;
    }
  }
  last_acc = referee_retrieval_accuracy(r, ds, opt.batch, seed);
  if (last_acc < opt.target_accuracy) {
    fail("referee accuracy " + std::to_string(last_acc) + " below the required " +
         std::to_string(opt.target_accuracy) + "; refusing to freeze");
  }
  freeze_referee(r);
  return r;
}

void referee_ascend_semantic(Referee& r, const std::vector<const LatentImage*>& latents,
                             const std::vector<const std::vector<int>*>& prompts, float lr) {
  if (latents.empty()) return;
  Tape<float> tape;
  std::vector<Tensor<float>> sims;
  for (std::size_t i = 0; i < latents.size(); ++i) {
    auto patches = latent_patches<float>(*latents[i]);
    auto semb = encode_scene_t<float>(r, patches, &tape);
    auto pemb = encode_prompt_t<float>(r, *prompts[i], &tape);
    sims.push_back(sum_all(mul(semb, pemb, &tape), &tape));
  }
  auto stacked = concat_cols(sims, &tape);
  auto loss = scale(mean_all(stacked, &tape), -1.0f, &tape);  // ascend similarity
  tape.backward(loss);
  auto params = r.params.all();
  for (auto* p : params) {
    for (std::size_t i = 0; i < p->numel(); ++i) {
      p->v()[i] -= lr * (*p->grad)[i];
    }
    p->zero_grad();
  }
}

// --- explicit instantiation -------------------------------------------------------------

#define LVRPO_INSTANTIATE_REFEREE(S)                                                                    \
  template struct RefereeT<S>;                                                                          \
  template Tensor<S> scene_tower<S>(const RefereeT<S>&, const Tensor<S>&, Tape<S>*);                    \
  template Tensor<S> prompt_tower<S>(const RefereeT<S>&, const std::vector<int>&, Tape<S>*);            \
  template Tensor<S> encode_scene_t<S>(const RefereeT<S>&, const Tensor<S>&, Tape<S>*);                 \
  template Tensor<S> encode_prompt_t<S>(const RefereeT<S>&, const std::vector<int>&, Tape<S>*);         \
  template Tensor<S> encode_patches_t<S>(const RefereeT<S>&, const Tensor<S>&, Tape<S>*);               \
  template Tensor<S> encode_tokens_t<S>(const RefereeT<S>&, const std::vector<int>&, Tape<S>*);         \
  template Tensor<S> sigmoid_contrastive_loss<S>(const Tensor<S>&, const Tensor<S>&,                    \
                                                 const std::vector<std::vector<std::uint8_t>>&,         \
                                                 const Tensor<S>&, const Tensor<S>&, Tape<S>*);

LVRPO_INSTANTIATE_REFEREE(float)
LVRPO_INSTANTIATE_REFEREE(double)

}  // namespace lvrpo
