#pragma once

#include <vector>

#include "lvrpo/referee.hpp"
#include "lvrpo/world.hpp"

namespace lvrpo {

struct RewardWeights {
  double lambda_sem = 1.0;
  double lambda_ins = 0.5;
  double lambda_kn = 0.5;
  double alpha_dense = 0.5;  // blend between global and dense semantic terms
};

struct RewardFlags {
  bool override_applied = false;
  bool referee_frozen = true;
  bool vacuous_knowledge = false;
};

struct RewardBreakdown {
  double r_sem = 0.0;
  double r_dense = 0.0;
  double r_ins = 0.0;
  double r_kn = 0.0;
  double r_total = 0.0;
  std::vector<std::uint8_t> satisfied;  // one bit per constraint
  RewardFlags flags;
};

// One sampled output: either a final latent or a caption token sequence.
struct RolloutOutput {
  bool visual = true;
  LatentImage latent;
  std::vector<int> caption;
};

// Fraction of the prompt's constraints satisfied by a generated latent.
std::pair<double, std::vector<std::uint8_t>> instruction_reward(const LatentImage& output,
                                                                const PromptSpec& prompt);

// Captions are parsed and score the fraction of prompt constraints they
// recover verbatim; unparseable captions recover nothing.
std::pair<double, std::vector<std::uint8_t>> instruction_reward_caption(const std::vector<int>& caption,
                                                                        const PromptSpec& prompt,
                                                                        const KnowledgeBase& kb);

// Detection-confidence agreement with the unsuppressed knowledge facts;
// vacuously 1 (flagged) when no fact applies.
double knowledge_reward(const LatentImage& output, const PromptSpec& prompt, const KnowledgeBase& kb,
                        RewardFlags* flags = nullptr);

RewardBreakdown composite_reward(const RolloutOutput& output, const PromptSpec& prompt, const Referee& referee,
                                 const KnowledgeBase& kb, const RewardWeights& weights);

std::vector<RewardBreakdown> reward_group(const std::vector<RolloutOutput>& outputs, const PromptSpec& prompt,
                                          const Referee& referee, const KnowledgeBase& kb,
                                          const RewardWeights& weights);

}  // namespace lvrpo
