#pragma once

#include "lvrpo/flow.hpp"
#include "lvrpo/grpo.hpp"
#include "lvrpo/metrics.hpp"

namespace lvrpo {

// L_text + lambda_vis * L_vis on one batch.
Tensor<float> unified_supervised_loss(const Policy& policy, const std::vector<const LatentImage*>& latents,
                                      const std::vector<std::vector<int>>& captions,
                                      const std::vector<const std::vector<int>*>& prompts, double lambda_vis,
                                      Rng& rng, Tape<float>* tape);

struct PretrainOptions {
  long steps = 1500;
  int batch = 16;
  double lr = 3e-3;
  double weight_decay = 0.01;
  double lambda_vis = 1.0;
  long warmup_steps = 50;
};

Policy pretrain_policy(const Dataset& ds, const ModelConfig& cfg, const PretrainOptions& opt,
                       std::uint64_t seed, MetricsWriter* writer = nullptr);

}  // namespace lvrpo
