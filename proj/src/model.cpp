#include "lvrpo/model.hpp"

#include <cmath>

namespace lvrpo {

int ModelConfig::vocab() const { return vocab_size > 0 ? vocab_size : Vocabulary::instance().size(); }

void ModelConfig::validate() const {
  if (d_model <= 0 || n_layers <= 0 || n_heads <= 0) fail("model dimensions must be positive");
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if ((d_model / n_heads) % 2 != 0) fail("head dim must be even for rotary phases");
  if (n_visual_tokens != kPatches) fail("n_visual_tokens must equal the 16x16 patch count");
}

// --- layouts -------------------------------------------------------------------

namespace {

std::shared_ptr<std::vector<std::uint8_t>> full_mask(int rows) {
  return std::make_shared<std::vector<std::uint8_t>>(static_cast<std::size_t>(rows) * rows, std::uint8_t(1));
}

void block_attention(std::vector<std::uint8_t>& m, int rows, int r0, int r1, int c0, int c1) {
  for (int i = r0; i < r1; ++i) {
    for (int j = c0; j < c1; ++j) m[static_cast<std::size_t>(i) * rows + j] = 0;
  }
}

void causal_within(std::vector<std::uint8_t>& m, int rows, int begin, int count) {
  for (int i = 0; i < count; ++i) {
    for (int j = i + 1; j < count; ++j) {
      m[static_cast<std::size_t>(begin + i) * rows + (begin + j)] = 0;
    }
  }
}

}  // namespace

MixedLayout understanding_layout(int n_text, int n_visual) {
  MixedLayout l;
  l.rows = n_visual + n_text;
  l.visual_begin = 0;
  l.text_begin = n_visual;
  l.n_text = n_text;
  l.segments = {{TokenModality::Visual, 0, n_visual}, {TokenModality::Text, n_visual, n_text}};
  l.rope_pos = std::make_shared<std::vector<int>>(static_cast<std::size_t>(l.rows), -1);
  for (int i = 0; i < n_text; ++i) (*l.rope_pos)[static_cast<std::size_t>(n_visual + i)] = i;
  auto mask = full_mask(l.rows);
  // patches never read text, so captions stay causally clean
  block_attention(*mask, l.rows, 0, n_visual, n_visual, l.rows);
  causal_within(*mask, l.rows, n_visual, n_text);
  l.attn_mask = std::move(mask);
  return l;
}

MixedLayout generation_layout(int n_text, int n_visual) {
  MixedLayout l;
  l.rows = n_text + 1 + n_visual;
  l.text_begin = 0;
  l.n_text = n_text;
  l.timestep_row = n_text;
  l.visual_begin = n_text + 1;
  l.segments = {{TokenModality::Text, 0, n_text},
                {TokenModality::Timestep, n_text, 1},
                {TokenModality::Visual, n_text + 1, n_visual}};
  l.rope_pos = std::make_shared<std::vector<int>>(static_cast<std::size_t>(l.rows), -1);
  for (int i = 0; i < n_text; ++i) (*l.rope_pos)[static_cast<std::size_t>(i)] = i;
  auto mask = full_mask(l.rows);
  // prompt rows encode text only; timestep and patch rows attend everywhere
  block_attention(*mask, l.rows, 0, n_text, n_text, l.rows);
  causal_within(*mask, l.rows, 0, n_text);
  l.attn_mask = std::move(mask);
  return l;
}

MixedLayout text_only_layout(int n_text) {
  MixedLayout l;
  l.rows = n_text;
  l.text_begin = 0;
  l.n_text = n_text;
  l.segments = {{TokenModality::Text, 0, n_text}};
  l.rope_pos = std::make_shared<std::vector<int>>(static_cast<std::size_t>(l.rows), -1);
  for (int i = 0; i < n_text; ++i) (*l.rope_pos)[static_cast<std::size_t>(i)] = i;
  auto mask = full_mask(l.rows);
  causal_within(*mask, l.rows, 0, n_text);
  l.attn_mask = std::move(mask);
  return l;
}

// --- parameters ------------------------------------------------------------------

template <class S>
PolicyT<S> PolicyT<S>::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  PolicyT<S> p;
  p.cfg = cfg;
  Rng rng(tag_seed(seed, "policy-init"));
  const int d = cfg.d_model, h = cfg.hidden(), v = cfg.vocab();
  const S w0 = S(0.02);
  auto& ps = p.params;
  ps.add("tok_emb", Tensor<S>::randn({v, d}, rng, w0));
  ps.add("vis_proj_w", Tensor<S>::randn({kChannels, d}, rng, S(0.2)));
  ps.add("vis_proj_b", Tensor<S>::zeros({d}));
  ps.add("vis_pos", Tensor<S>::randn({kPatches, d}, rng, w0));
  for (int i = 0; i < cfg.n_layers; ++i) {
    const std::string pre = "layer" + std::to_string(i) + ".";
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
    ps.add(pre + "router_w", Tensor<S>::randn({d, 2}, rng, w0));
    ps.add(pre + "router_b", Tensor<S>::zeros({2}));
    ps.add(pre + "und_w1", Tensor<S>::randn({d, h}, rng, w0));
    ps.add(pre + "und_b1", Tensor<S>::zeros({h}));
    ps.add(pre + "und_w2", Tensor<S>::randn({h, d}, rng, w0));
    ps.add(pre + "und_b2", Tensor<S>::zeros({d}));
    ps.add(pre + "gen_w1", Tensor<S>::randn({d, h}, rng, w0));
    ps.add(pre + "gen_b1", Tensor<S>::zeros({h}));
    ps.add(pre + "gen_w2", Tensor<S>::randn({h, d}, rng, w0));
    ps.add(pre + "gen_b2", Tensor<S>::zeros({d}));
  }
  ps.add("ln_f_g", Tensor<S>::full({d}, S(1)));
  ps.add("ln_f_b", Tensor<S>::zeros({d}));
  // Zero heads: uniform logits and a null velocity field before pretraining.
  ps.add("logits_w", Tensor<S>::zeros({d, v}));
  ps.add("logits_b", Tensor<S>::zeros({v}));
  ps.add("vel_w", Tensor<S>::zeros({d, kChannels}));
  ps.add("vel_b", Tensor<S>::zeros({kChannels}));
  return p;
}

// --- embedding -------------------------------------------------------------------

template <class S>
Tensor<S> latent_patches(const LatentImage& img) {
  Tensor<S> out = Tensor<S>::zeros({kPatches, kChannels});
  for (std::size_t i = 0; i < img.grid.size(); ++i) (*out.data)[i] = static_cast<S>(img.grid[i]);
  return out;
}

template <class S>
Tensor<S> timestep_embedding(double t, int d) {
  Tensor<S> out = Tensor<S>::zeros({1, d});
  const double scaled = t * 1000.0;
  for (int j = 0; j < d / 2; ++j) {
    const double freq = std::pow(10000.0, -2.0 * j / d);
    (*out.data)[static_cast<std::size_t>(2 * j)] = static_cast<S>(std::sin(scaled * freq));
    (*out.data)[static_cast<std::size_t>(2 * j + 1)] = static_cast<S>(std::cos(scaled * freq));
  }
  return out;
}

template <class S>
MixedSequence<S> embed_mixed_sequence(const PolicyT<S>& policy, const std::vector<int>& text_tokens,
                                      const Tensor<S>* visual_patches, std::optional<double> t,
                                      Tape<S>* tape) {
  const int n_text = static_cast<int>(text_tokens.size());
  MixedSequence<S> seq;
  if (visual_patches == nullptr && !t.has_value()) {
    seq.layout = text_only_layout(n_text);
  } else if (visual_patches != nullptr && !t.has_value()) {
    seq.layout = understanding_layout(n_text, kPatches);
  } else if (visual_patches != nullptr && t.has_value()) {
    seq.layout = generation_layout(n_text, kPatches);
  } else {
    fail("embed_mixed_sequence: a timestep requires visual patches");
  }
  if (seq.layout.rows > policy.cfg.max_seq_len) {
    fail("sequence length " + std::to_string(seq.layout.rows) + " exceeds max_seq_len " +
         std::to_string(policy.cfg.max_seq_len));
  }

  Tensor<S> text_rows;
  if (n_text > 0) text_rows = gather_rows(policy.params.at("tok_emb"), text_tokens, tape);
  Tensor<S> vis_rows;
  if (visual_patches != nullptr) {
    vis_rows = matmul(*visual_patches, policy.params.at("vis_proj_w"), tape);
    vis_rows = add_rowvec(vis_rows, policy.params.at("vis_proj_b"), tape);
    vis_rows = add(vis_rows, policy.params.at("vis_pos"), tape);
  }
  std::vector<Tensor<S>> parts;
  if (visual_patches != nullptr && !t.has_value()) {
    parts.push_back(vis_rows);
    if (n_text > 0) parts.push_back(text_rows);
  } else if (visual_patches != nullptr) {
    if (n_text > 0) parts.push_back(text_rows);
    parts.push_back(timestep_embedding<S>(*t, policy.cfg.d_model));
    parts.push_back(vis_rows);
  } else {
    parts.push_back(text_rows);
  }
  seq.rows = parts.size() == 1 ? parts[0] : concat_rows(parts, tape);
  return seq;
}

// --- MoT layer ---------------------------------------------------------------------

namespace {

template <class S>
Tensor<S> expert_ffn(const Tensor<S>& x, const ParamStore<S>& ps, const std::string& pre,
                     const std::string& which, Tape<S>* tape) {
  auto h = add_rowvec(matmul(x, ps.at(pre + which + "_w1"), tape), ps.at(pre + which + "_b1"), tape);
  h = gelu(h, tape);
  return add_rowvec(matmul(h, ps.at(pre + which + "_w2"), tape), ps.at(pre + which + "_b2"), tape);
}

std::shared_ptr<std::vector<int>> batch_rope_pos(const std::vector<MixedLayout>& layouts) {
  auto out = std::make_shared<std::vector<int>>();
  for (const auto& l : layouts) out->insert(out->end(), l.rope_pos->begin(), l.rope_pos->end());
  return out;
}

}  // namespace

template <class S>
Tensor<S> mot_layer_forward(const Tensor<S>& x, const std::vector<MixedLayout>& layouts,
                            const std::vector<int>& offsets, const PolicyT<S>& policy, int layer,
                            Tape<S>* tape) {
  const auto& ps = policy.params;
  const std::string pre = "layer" + std::to_string(layer) + ".";
  const int d = policy.cfg.d_model;
  const int heads = policy.cfg.n_heads;
  const int dh = d / heads;

  auto h = layer_norm(x, ps.at(pre + "ln1_g"), ps.at(pre + "ln1_b"), tape);
  auto q = add_rowvec(matmul(h, ps.at(pre + "wq"), tape), ps.at(pre + "bq"), tape);
  auto k = add_rowvec(matmul(h, ps.at(pre + "wk"), tape), ps.at(pre + "bk"), tape);
  auto v = add_rowvec(matmul(h, ps.at(pre + "wv"), tape), ps.at(pre + "bv"), tape);
  auto pos = batch_rope_pos(layouts);
  q = rope_rows(q, pos, tape);
  k = rope_rows(k, pos, tape);

  const S inv_sqrt_dh = S(1) / std::sqrt(static_cast<S>(dh));
  std::vector<Tensor<S>> seq_ctx;
  seq_ctx.reserve(layouts.size());
  for (std::size_t si = 0; si < layouts.size(); ++si) {
    const MixedLayout& l = layouts[si];
    const int off = offsets[si];
    auto qs = slice_rows(q, off, off + l.rows, tape);
    auto ks = slice_rows(k, off, off + l.rows, tape);
    auto vs = slice_rows(v, off, off + l.rows, tape);
    std::vector<Tensor<S>> head_ctx;
    head_ctx.reserve(static_cast<std::size_t>(heads));
    for (int hd = 0; hd < heads; ++hd) {
      auto qh = slice_cols(qs, hd * dh, (hd + 1) * dh, tape);
      auto kh = slice_cols(ks, hd * dh, (hd + 1) * dh, tape);
      auto vh = slice_cols(vs, hd * dh, (hd + 1) * dh, tape);
      auto scores = scale(matmul_nt(qh, kh, tape), inv_sqrt_dh, tape);
      auto probs = masked_softmax_rows(scores, l.attn_mask, tape);
      head_ctx.push_back(matmul(probs, vh, tape));
    }
    seq_ctx.push_back(heads == 1 ? head_ctx[0] : concat_cols(head_ctx, tape));
  }
  auto ctx = seq_ctx.size() == 1 ? seq_ctx[0] : concat_rows(seq_ctx, tape);
  auto attn_out = add_rowvec(matmul(ctx, ps.at(pre + "wo"), tape), ps.at(pre + "bo"), tape);
  auto x1 = add(x, attn_out, tape);

  auto h2 = layer_norm(x1, ps.at(pre + "ln2_g"), ps.at(pre + "ln2_b"), tape);

  if (policy.cfg.router_mode == RouterMode::ModalityHard) {
    // Hard routing: each expert sees only its modality's rows.
    std::vector<Tensor<S>> outs;
    for (std::size_t si = 0; si < layouts.size(); ++si) {
      const MixedLayout& l = layouts[si];
      const int off = offsets[si];
      for (const auto& seg : l.segments) {
        auto rows = slice_rows(h2, off + seg.begin, off + seg.begin + seg.count, tape);
        const char* expert = seg.modality == TokenModality::Text ? "und" : "gen";
        outs.push_back(expert_ffn(rows, ps, pre, expert, tape));
      }
    }
    auto moe = outs.size() == 1 ? outs[0] : concat_rows(outs, tape);
    return add(x1, moe, tape);
  }

  auto gate_logits = add_rowvec(matmul(h2, ps.at(pre + "router_w"), tape), ps.at(pre + "router_b"), tape);
  auto gates = softmax_rows(gate_logits, tape);
  auto g_und = slice_cols(gates, 0, 1, tape);
  auto g_gen = slice_cols(gates, 1, 2, tape);
  auto e_und = expert_ffn(h2, ps, pre, "und", tape);
  auto e_gen = expert_ffn(h2, ps, pre, "gen", tape);
  auto moe = add(mul_colvec(e_und, g_und, tape), mul_colvec(e_gen, g_gen, tape), tape);
  return add(x1, moe, tape);
}

template <class S>
std::pair<S, S> router_gate(const Tensor<S>& hidden, const PolicyT<S>& policy, int layer,
                            TokenModality modality, RouterMode mode) {
  if (mode == RouterMode::ModalityHard) {
    return modality == TokenModality::Text ? std::pair<S, S>{S(1), S(0)} : std::pair<S, S>{S(0), S(1)};
  }
  const std::string pre = "layer" + std::to_string(layer) + ".";
  Tensor<S> row = hidden;
  if (row.shape.size() == 1) row.shape = {1, static_cast<int>(row.numel())};
  Tape<S>* no_tape = nullptr;
  auto logits = add_rowvec(matmul(row, policy.params.at(pre + "router_w"), no_tape),
                           policy.params.at(pre + "router_b"), no_tape);
  auto g = softmax_rows(logits, no_tape);
  return {g.v()[0], g.v()[1]};
}

// --- full forwards -------------------------------------------------------------------

template <class S>
Tensor<S> forward_trunk(const PolicyT<S>& policy, const std::vector<MixedSequence<S>>& seqs,
                        Tape<S>* tape) {
  std::vector<MixedLayout> layouts;
  std::vector<int> offsets;
  std::vector<Tensor<S>> parts;
  int off = 0;
  for (const auto& s : seqs) {
    layouts.push_back(s.layout);
    offsets.push_back(off);
    off += s.layout.rows;
    parts.push_back(s.rows);
  }
  auto x = parts.size() == 1 ? parts[0] : concat_rows(parts, tape);
  for (int i = 0; i < policy.cfg.n_layers; ++i) {
    x = mot_layer_forward(x, layouts, offsets, policy, i, tape);
  }
  return layer_norm(x, policy.params.at("ln_f_g"), policy.params.at("ln_f_b"), tape);
}

template <class S>
std::vector<Tensor<S>> forward_text_logits_batch(const PolicyT<S>& policy,
                                                 const std::vector<const LatentImage*>& latents,
                                                 const std::vector<std::vector<int>>& prefixes,
                                                 Tape<S>* tape) {
  if (latents.size() != prefixes.size()) fail("forward_text_logits_batch size mismatch");
  std::vector<MixedSequence<S>> seqs;
  std::vector<Tensor<S>> patches;
  seqs.reserve(latents.size());
  patches.reserve(latents.size());
  for (std::size_t i = 0; i < latents.size(); ++i) patches.push_back(latent_patches<S>(*latents[i]));
  for (std::size_t i = 0; i < latents.size(); ++i) {
    seqs.push_back(embed_mixed_sequence(policy, prefixes[i], &patches[i], std::nullopt, tape));
  }
  auto hidden = forward_trunk(policy, seqs, tape);
  std::vector<Tensor<S>> out;
  int off = 0;
  for (const auto& s : seqs) {
    auto text = slice_rows(hidden, off + s.layout.text_begin, off + s.layout.text_begin + s.layout.n_text, tape);
    out.push_back(add_rowvec(matmul(text, policy.params.at("logits_w"), tape),
                             policy.params.at("logits_b"), tape));
    off += s.layout.rows;
  }
  return out;
}

template <class S>
Tensor<S> forward_text_logits(const PolicyT<S>& policy, const LatentImage& latent,
                              const std::vector<int>& text_tokens, Tape<S>* tape) {
  return forward_text_logits_batch<S>(policy, {&latent}, {text_tokens}, tape)[0];
}

template <class S>
std::vector<Tensor<S>> forward_velocity_multi(const PolicyT<S>& policy,
                                              const std::vector<const Tensor<S>*>& states,
                                              const std::vector<double>& ts,
                                              const std::vector<const std::vector<int>*>& prompts,
                                              Tape<S>* tape) {
  if (states.size() != ts.size() || states.size() != prompts.size()) {
    fail("forward_velocity_multi size mismatch");
  }
  for (double t : ts) {
    if (t < 0.0 || t > 1.0) fail("flow time t=" + std::to_string(t) + " outside [0,1]");
  }
  std::vector<MixedSequence<S>> seqs;
  seqs.reserve(states.size());
  for (std::size_t i = 0; i < states.size(); ++i) {
    seqs.push_back(embed_mixed_sequence(policy, *prompts[i], states[i], ts[i], tape));
  }
  auto hidden = forward_trunk(policy, seqs, tape);
  std::vector<Tensor<S>> out;
  int off = 0;
  for (const auto& s : seqs) {
    auto vis = slice_rows(hidden, off + s.layout.visual_begin, off + s.layout.visual_begin + kPatches, tape);
    out.push_back(add_rowvec(matmul(vis, policy.params.at("vel_w"), tape), policy.params.at("vel_b"), tape));
    off += s.layout.rows;
  }
  return out;
}

template <class S>
std::vector<Tensor<S>> forward_velocity_batch(const PolicyT<S>& policy,
                                              const std::vector<const Tensor<S>*>& states,
                                              const std::vector<double>& ts,
                                              const std::vector<int>& prompt_tokens, Tape<S>* tape) {
  std::vector<const std::vector<int>*> prompts(states.size(), &prompt_tokens);
  return forward_velocity_multi(policy, states, ts, prompts, tape);
}

template <class S>
Tensor<S> forward_velocity(const PolicyT<S>& policy, const Tensor<S>& x_t, double t,
                           const std::vector<int>& prompt_tokens, Tape<S>* tape) {
  return forward_velocity_batch<S>(policy, {&x_t}, {t}, prompt_tokens, tape)[0];
}

template <class S>
Tensor<S> understanding_loss(const PolicyT<S>& policy, const std::vector<const LatentImage*>& latents,
                             const std::vector<std::vector<int>>& captions, Tape<S>* tape) {
  std::vector<std::vector<int>> prefixes;
  std::vector<int> targets;
  for (const auto& cap : captions) {
    if (cap.size() < 2) fail("understanding_loss: caption needs at least BOS and one target");
    prefixes.emplace_back(cap.begin(), cap.end() - 1);
    targets.insert(targets.end(), cap.begin() + 1, cap.end());
  }
  auto logits = forward_text_logits_batch(policy, latents, prefixes, tape);
  auto all = logits.size() == 1 ? logits[0] : concat_rows(logits, tape);
  return cross_entropy(all, targets, tape);
}

// --- explicit instantiation -----------------------------------------------------------

#define LVRPO_INSTANTIATE_MODEL(S)                                                                     \
  template struct PolicyT<S>;                                                                          \
  template Tensor<S> latent_patches<S>(const LatentImage&);                                            \
  template Tensor<S> timestep_embedding<S>(double, int);                                               \
  template MixedSequence<S> embed_mixed_sequence<S>(const PolicyT<S>&, const std::vector<int>&,        \
                                                    const Tensor<S>*, std::optional<double>,           \
                                                    Tape<S>*);                                         \
  template std::pair<S, S> router_gate<S>(const Tensor<S>&, const PolicyT<S>&, int, TokenModality,     \
                                          RouterMode);                                                 \
  template Tensor<S> mot_layer_forward<S>(const Tensor<S>&, const std::vector<MixedLayout>&,           \
                                          const std::vector<int>&, const PolicyT<S>&, int, Tape<S>*);  \
  template Tensor<S> forward_trunk<S>(const PolicyT<S>&, const std::vector<MixedSequence<S>>&,         \
                                      Tape<S>*);                                                       \
  template Tensor<S> forward_text_logits<S>(const PolicyT<S>&, const LatentImage&,                     \
                                            const std::vector<int>&, Tape<S>*);                        \
  template std::vector<Tensor<S>> forward_text_logits_batch<S>(                                        \
      const PolicyT<S>&, const std::vector<const LatentImage*>&,                                       \
      const std::vector<std::vector<int>>&, Tape<S>*);                                                 \
  template Tensor<S> forward_velocity<S>(const PolicyT<S>&, const Tensor<S>&, double,                  \
                                         const std::vector<int>&, Tape<S>*);                           \
  template std::vector<Tensor<S>> forward_velocity_batch<S>(                                           \
      const PolicyT<S>&, const std::vector<const Tensor<S>*>&, const std::vector<double>&,             \
      const std::vector<int>&, Tape<S>*);                                                              \
  template std::vector<Tensor<S>> forward_velocity_multi<S>(                                           \
      const PolicyT<S>&, const std::vector<const Tensor<S>*>&, const std::vector<double>&,             \
      const std::vector<const std::vector<int>*>&, Tape<S>*);                                          \
  template Tensor<S> understanding_loss<S>(const PolicyT<S>&, const std::vector<const LatentImage*>&,  \
                                           const std::vector<std::vector<int>>&, Tape<S>*);

LVRPO_INSTANTIATE_MODEL(float)
LVRPO_INSTANTIATE_MODEL(double)

}  // namespace lvrpo
