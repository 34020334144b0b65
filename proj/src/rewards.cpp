#include "lvrpo/rewards.hpp"

#include <algorithm>

namespace lvrpo {

std::pair<double, std::vector<std::uint8_t>> instruction_reward(const LatentImage& output,
                                                                const PromptSpec& prompt) {
  if (prompt.constraints.empty()) fail("instruction_reward: empty constraint set");
  auto detected = detect_objects(output);
  std::vector<std::uint8_t> bits;
  int satisfied = 0;
  for (const auto& c : prompt.constraints) {
    const bool ok = constraint_satisfied(c, detected);
    bits.push_back(ok ? 1 : 0);
    if (ok) ++satisfied;
  }
  return {static_cast<double>(satisfied) / static_cast<double>(prompt.constraints.size()), bits};
}

std::pair<double, std::vector<std::uint8_t>> instruction_reward_caption(const std::vector<int>& caption,
                                                                        const PromptSpec& prompt,
                                                                        const KnowledgeBase& kb) {
  if (prompt.constraints.empty()) fail("instruction_reward: empty constraint set");
  auto recovered = try_extract_constraints(caption, kb);
  std::vector<std::uint8_t> bits;
  int satisfied = 0;
  for (const auto& c : prompt.constraints) {
    bool ok = false;
    if (recovered) {
      ok = std::find(recovered->begin(), recovered->end(), c) != recovered->end();
    }
    bits.push_back(ok ? 1 : 0);
    if (ok) ++satisfied;
  }
  return {static_cast<double>(satisfied) / static_cast<double>(prompt.constraints.size()), bits};
}

double knowledge_reward(const LatentImage& output, const PromptSpec& prompt, const KnowledgeBase& kb,
                        RewardFlags* flags) {
  double acc = 0.0;
  int active = 0;
  const auto detected = detect_objects(output);
  for (const auto& fact : prompt.fact_refs) {
    if (fact.suppressed) {
      if (flags) flags->override_applied = true;
      continue;
    }
    ++active;
    const auto& entry = kb.canon[static_cast<std::size_t>(fact.concept_id)];
    double best = 0.0;
    for (const auto& obj : detected.objects) {
      if (obj.shape == entry.canonical_shape && obj.color == entry.canonical_color) {
        best = std::max(best, static_cast<double>(obj.confidence));
      }
    }
    acc += best;
  }
  if (active == 0) {
    if (flags) flags->vacuous_knowledge = true;
    return 1.0;
  }
  return acc / static_cast<double>(active);
}

RewardBreakdown composite_reward(const RolloutOutput& output, const PromptSpec& prompt, const Referee& referee,
                                 const KnowledgeBase& kb, const RewardWeights& weights) {
  RewardBreakdown b;
  b.flags.referee_frozen = referee.frozen;
  double alpha = weights.alpha_dense;
  if (output.visual) {
    b.r_sem = semantic_reward(output.latent, prompt.tokens, referee);
    b.r_dense = prompt.key_tokens.empty() ? 0.0 : dense_grounding_reward(output.latent, prompt, referee);
    if (prompt.key_tokens.empty()) alpha = 1.0;
    auto [ins, bits] = instruction_reward(output.latent, prompt);
    b.r_ins = ins;
    b.satisfied = std::move(bits);
    b.r_kn = knowledge_reward(output.latent, prompt, kb, &b.flags);
  } else {
    // Captions score prompt-vs-caption similarity; the dense term does not
    // apply, so the blend collapses to the global similarity.
    auto pe = encode_prompt(referee, prompt.tokens);
    auto ce = encode_prompt(referee, output.caption);
    double dot = 0.0;
    for (std::size_t i = 0; i < pe.numel(); ++i) dot += static_cast<double>(pe.v()[i]) * ce.v()[i];
    b.r_sem = std::clamp(dot, -1.0, 1.0);
    b.r_dense = 0.0;
    alpha = 1.0;
    auto [ins, bits] = instruction_reward_caption(output.caption, prompt, kb);
    b.r_ins = ins;
    b.satisfied = std::move(bits);
    b.flags.vacuous_knowledge = true;
    for (const auto& fact : prompt.fact_refs) {
      if (fact.suppressed) b.flags.override_applied = true;
    }
    b.r_kn = 1.0;
  }
  b.r_total = weights.lambda_sem * (alpha * b.r_sem + (1.0 - alpha) * b.r_dense) +
              weights.lambda_ins * b.r_ins + weights.lambda_kn * b.r_kn;
  return b;
}

std::vector<RewardBreakdown> reward_group(const std::vector<RolloutOutput>& outputs, const PromptSpec& prompt,
                                          const Referee& referee, const KnowledgeBase& kb,
                                          const RewardWeights& weights) {
  if (outputs.size() < 2) fail("reward_group requires G >= 2 outputs");
  std::vector<RewardBreakdown> out;
  out.reserve(outputs.size());
  for (const auto& o : outputs) out.push_back(composite_reward(o, prompt, referee, kb, weights));
  return out;
}

}  // namespace lvrpo
