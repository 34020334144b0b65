#pragma once

#include <memory>
#include <optional>
#include <vector>

#include "lvrpo/params.hpp"
#include "lvrpo/tensor.hpp"
#include "lvrpo/world.hpp"

namespace lvrpo {

enum class RouterMode : int { LearnedTop2 = 0, ModalityHard = 1 };

struct ModelConfig {
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int vocab_size = 0;  // 0 -> vocabulary size
  int n_visual_tokens = kPatches;
  int max_seq_len = 304;
  int expert_hidden = 0;  // 0 -> 2 * d_model
  RouterMode router_mode = RouterMode::LearnedTop2;

  int hidden() const { return expert_hidden > 0 ? expert_hidden : 2 * d_model; }
  int vocab() const;
  void validate() const;
};

enum class TokenModality : int { Text = 0, Visual = 1, Timestep = 2 };

struct MixedLayout {
  struct Segment {
    TokenModality modality;
    int begin;
    int count;
  };
  std::vector<Segment> segments;
  int rows = 0;
  int n_text = 0;
  int text_begin = -1;
  int visual_begin = -1;
  int timestep_row = -1;
  std::shared_ptr<std::vector<int>> rope_pos;              // per row; -1 = no rotation
  std::shared_ptr<std::vector<std::uint8_t>> attn_mask;    // rows x rows, 1 = may attend
};

// Understanding: [visual..., text...]; text is causal and sees all patches,
// patches see only each other. Generation: [text..., timestep, visual...];
// text is causal, timestep/visual rows attend everywhere.
MixedLayout understanding_layout(int n_text, int n_visual);
MixedLayout generation_layout(int n_text, int n_visual);
MixedLayout text_only_layout(int n_text);

template <class S>
struct MixedSequence {
  Tensor<S> rows;  // (layout.rows x d_model)
  MixedLayout layout;
};

template <class S>
struct PolicyT {
  ModelConfig cfg;
  ParamStore<S> params;

  static PolicyT init(const ModelConfig& cfg, std::uint64_t seed);
  PolicyT clone() const {
    PolicyT out;
    out.cfg = cfg;
    out.params = params.clone();
    return out;
  }
  template <class D>
  PolicyT<D> cast() const {
    PolicyT<D> out;
    out.cfg = cfg;
    out.params = params.template cast<D>();
    return out;
  }
};

using Policy = PolicyT<float>;

template <class S>
Tensor<S> latent_patches(const LatentImage& img);  // (256 x 10) constant

// Sinusoidal timestep features, injected as one extra token.
template <class S>
Tensor<S> timestep_embedding(double t, int d);

template <class S>
MixedSequence<S> embed_mixed_sequence(const PolicyT<S>& policy, const std::vector<int>& text_tokens,
                                      const Tensor<S>* visual_patches, std::optional<double> t,
                                      Tape<S>* tape);

// Router gate for one hidden row; returns {g_und, g_gen}.
template <class S>
std::pair<S, S> router_gate(const Tensor<S>& hidden, const PolicyT<S>& policy, int layer,
                            TokenModality modality, RouterMode mode);

// One shared-attention MoT layer over a batch of concatenated sequences.
template <class S>
Tensor<S> mot_layer_forward(const Tensor<S>& x, const std::vector<MixedLayout>& layouts,
                            const std::vector<int>& offsets, const PolicyT<S>& policy, int layer,
                            Tape<S>* tape);

// Full trunk; returns final hidden rows after the closing layer norm.
template <class S>
Tensor<S> forward_trunk(const PolicyT<S>& policy, const std::vector<MixedSequence<S>>& seqs,
                        Tape<S>* tape);

// Logits over the text rows of one understanding-mode sequence.
template <class S>
Tensor<S> forward_text_logits(const PolicyT<S>& policy, const LatentImage& latent,
                              const std::vector<int>& text_tokens, Tape<S>* tape);

// Batched variant: one entry per (latent, caption prefix) pair.
template <class S>
std::vector<Tensor<S>> forward_text_logits_batch(const PolicyT<S>& policy,
                                                 const std::vector<const LatentImage*>& latents,
                                                 const std::vector<std::vector<int>>& prefixes,
                                                 Tape<S>* tape);

// Velocity field v(x_t, t, prompt); x_t supplied as a (256 x 10) tensor.
template <class S>
Tensor<S> forward_velocity(const PolicyT<S>& policy, const Tensor<S>& x_t, double t,
                           const std::vector<int>& prompt_tokens, Tape<S>* tape);

// Batched over flow states that share one prompt.
template <class S>
std::vector<Tensor<S>> forward_velocity_batch(const PolicyT<S>& policy,
                                              const std::vector<const Tensor<S>*>& states,
                                              const std::vector<double>& ts,
                                              const std::vector<int>& prompt_tokens, Tape<S>* tape);

// Fully general batch: one prompt per state.
template <class S>
std::vector<Tensor<S>> forward_velocity_multi(const PolicyT<S>& policy,
                                              const std::vector<const Tensor<S>*>& states,
                                              const std::vector<double>& ts,
                                              const std::vector<const std::vector<int>*>& prompts,
                                              Tape<S>* tape);

// Mean next-token cross entropy over caption positions.
template <class S>
Tensor<S> understanding_loss(const PolicyT<S>& policy,
                             const std::vector<const LatentImage*>& latents,
                             const std::vector<std::vector<int>>& captions, Tape<S>* tape);

}  // namespace lvrpo
