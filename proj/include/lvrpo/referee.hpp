#pragma once

#include <cstdint>
#include <vector>

#include "lvrpo/params.hpp"
#include "lvrpo/tensor.hpp"
#include "lvrpo/world.hpp"

namespace lvrpo {

struct RefereeConfig {
  int dim = 32;  // shared embedding dim of both towers
  int n_layers = 2;
  int n_heads = 4;
  int ffn_hidden = 64;
  int max_text = 24;
};

template <class S>
struct RefereeT {
  RefereeConfig cfg;
  ParamStore<S> params;
  bool frozen = false;
  std::uint64_t frozen_checksum = 0;

  static RefereeT init(const RefereeConfig& cfg, std::uint64_t seed);
  RefereeT clone() const {
    RefereeT out;
    out.cfg = cfg;
    out.params = params.clone();
    out.frozen = frozen;
    out.frozen_checksum = frozen_checksum;
    return out;
  }
  template <class D>
  RefereeT<D> cast() const {
    RefereeT<D> out;
    out.cfg = cfg;
    out.params = params.template cast<D>();
    return out;
  }
};

using Referee = RefereeT<float>;

void freeze_referee(Referee& r);
bool referee_checksum_valid(const Referee& r);

// Tower features before pooling; rows are patches or tokens.
template <class S>
Tensor<S> scene_tower(const RefereeT<S>& r, const Tensor<S>& patches, Tape<S>* tape);
template <class S>
Tensor<S> prompt_tower(const RefereeT<S>& r, const std::vector<int>& tokens, Tape<S>* tape);

// Pooled, L2-normalized global embeddings (1 x dim).
template <class S>
Tensor<S> encode_scene_t(const RefereeT<S>& r, const Tensor<S>& patches, Tape<S>* tape);
template <class S>
Tensor<S> encode_prompt_t(const RefereeT<S>& r, const std::vector<int>& tokens, Tape<S>* tape);

Tensor<float> encode_scene(const Referee& r, const LatentImage& latent);
Tensor<float> encode_prompt(const Referee& r, const std::vector<int>& tokens);

// Per-patch / per-token unit vectors from the pre-pool features.
template <class S>
Tensor<S> encode_patches_t(const RefereeT<S>& r, const Tensor<S>& patches, Tape<S>* tape);
template <class S>
Tensor<S> encode_tokens_t(const RefereeT<S>& r, const std::vector<int>& tokens, Tape<S>* tape);

Tensor<float> encode_patches(const Referee& r, const LatentImage& latent);
Tensor<float> encode_tokens(const Referee& r, const std::vector<int>& tokens);

// Pairwise sigmoid loss over a batch of matched rows: label +1 where
// `matched[i][j]`, -1 elsewhere.
template <class S>
Tensor<S> sigmoid_contrastive_loss(const Tensor<S>& scene_embs, const Tensor<S>& prompt_embs,
                                   const std::vector<std::vector<std::uint8_t>>& matched,
                                   const Tensor<S>& temperature, const Tensor<S>& bias, Tape<S>* tape);

double semantic_reward(const LatentImage& latent, const std::vector<int>& prompt_tokens, const Referee& r);
double dense_grounding_reward(const LatentImage& latent, const PromptSpec& prompt, const Referee& r);

// Scene->prompt top-1 retrieval accuracy over held-out batches; prompts with
// identical text count as correct matches for each other.
double referee_retrieval_accuracy(const Referee& r, const Dataset& ds, int batch, std::uint64_t seed);

struct RefereePretrainOptions {
  long steps = 2000;
  int batch = 32;
  float lr = 2e-3f;
  float weight_decay = 0.01f;
  double target_accuracy = 0.95;
  double dense_weight = 0.5;
  long eval_every = 100;
  long min_steps = 200;
};

Referee pretrain_referee(const Dataset& ds, const RefereePretrainOptions& opt, std::uint64_t seed);

// One ascent step on mean semantic reward of the given outputs; the
// co-adaptation rule used by the reward-hacking ablation.
void referee_ascend_semantic(Referee& r, const std::vector<const LatentImage*>& latents,
                             const std::vector<const std::vector<int>*>& prompts, float lr);

}  // namespace lvrpo
