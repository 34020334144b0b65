#pragma once

#include <functional>
#include <string>
#include <vector>

#include "lvrpo/flow.hpp"
#include "lvrpo/metrics.hpp"
#include "lvrpo/model.hpp"
#include "lvrpo/optim.hpp"
#include "lvrpo/rewards.hpp"

namespace lvrpo {

struct GroupConfig {
  int group_size = 8;
  double beta = 0.01;
  double eps_adv = 1e-8;
  double eps_clip = 0.2;
  int inner_epochs = 1;
  double temperature = 1.0;  // text sampling temperature
  FlowSchedule schedule;
  double task_mix = 0.5;  // fraction of generation prompts per batch
  int max_caption_len = 32;
  double max_grad_norm = 1.0;

  void validate() const {
    if (group_size < 2) fail("group size must be >= 2");
    if (beta < 0) fail("beta must be >= 0");
    if (eps_adv <= 0) fail("eps_adv must be > 0");
    if (eps_clip <= 0 || eps_clip >= 1) fail("eps_clip must lie in (0,1)");
  }
};

struct SchedulerState {
  long step = 0;
  long warmup_steps = 100;
  long total_steps = 5000;
  double base_lr = 5e-6;
};

// Linear warmup to base_lr, then cosine decay to zero.
double lr_at_step(const SchedulerState& s);

struct GroupRollout {
  const DatasetRecord* record = nullptr;
  bool visual_task = true;
  std::vector<StochasticTrajectory> trajectories;      // visual tasks
  std::vector<std::vector<int>> captions;              // understanding tasks
  LatentImage context_latent;                          // captioned image for understanding tasks
  std::vector<std::vector<double>> logp_policy_steps;  // per output, per step/token
  std::vector<std::vector<double>> logp_ref_steps;
  std::vector<RolloutOutput> outputs;
  std::vector<RewardBreakdown> rewards;   // filled after reward_group
  std::vector<double> advantages;         // filled after compute_advantages
};

// (r - mean) / (population std + eps).
std::vector<double> compute_advantages(const std::vector<double>& rewards, double eps_adv);

// Nonnegative estimator: mean over steps of exp(d) - d - 1, d = lref - ltheta.
double kl_estimate(const std::vector<double>& logp_theta, const std::vector<double>& logp_ref);

// Tape form of the same estimator; lp_steps are policy log-prob nodes.
template <class S>
Tensor<S> kl_estimate_node(const std::vector<Tensor<S>>& lp_steps, const std::vector<double>& logp_ref,
                           Tape<S>* tape);

// min(rho*A, clamp(rho, 1-eps, 1+eps)*A) from the log-ratio node.
template <class S>
Tensor<S> surrogate_term(const Tensor<S>& log_ratio, double advantage, double eps_clip, Tape<S>* tape);

GroupRollout sample_group(const DatasetRecord& record, const LatentImage& record_latent, bool visual_task,
                          const Policy& policy, const Policy& reference, const GroupConfig& cfg,
                          std::uint64_t seed);

// Mean over the group of [-surrogate + beta * KL]; requires filled advantages.
Tensor<float> clipped_surrogate_loss(const GroupRollout& rollout, const Policy& policy,
                                     const GroupConfig& cfg, Tape<float>* tape);

struct StepMetrics {
  long step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double kl = 0.0;
  double grad_norm = 0.0;
  double clip_scale = 1.0;
  double mean_r_sem = 0.0, std_r_sem = 0.0;
  double mean_r_dense = 0.0, std_r_dense = 0.0;
  double mean_r_ins = 0.0, std_r_ins = 0.0;
  double mean_r_kn = 0.0, std_r_kn = 0.0;
  double mean_r_total = 0.0, std_r_total = 0.0;
  int n_gen = 0;
  int n_und = 0;
  double wall_ms = 0.0;  // written to the timing sidecar, not the metrics log
};

StepMetrics grpo_update_step(const Dataset& ds, const std::vector<int>& record_ids, Policy& policy,
                             const Policy& reference, const Referee& referee, const RewardWeights& weights,
                             const GroupConfig& cfg, OptimizerState& opt, const SchedulerState& sched,
                             std::uint64_t seed);

nlohmann::ordered_json step_metrics_json(const StepMetrics& m);

struct AlignOptions {
  GroupConfig group;
  RewardWeights weights;
  double lr = 1e-4;
  double weight_decay = 0.05;
  long steps = 300;
  int batch_prompts = 16;
  long warmup_steps = 30;
  long checkpoint_every = 0;   // 0 = final checkpoint only
  long ref_refresh_every = 0;  // 0 = reference frozen for the whole run
  std::string out_dir;         // empty = no checkpoints written
  int eval_prompts = 64;       // held-out prompts for the final instruction eval
  nlohmann::ordered_json provenance;  // run config embedded in written checkpoints
};

struct AlignResult {
  Policy policy;
  std::vector<StepMetrics> metrics;
  double final_heldout_pass_rate = 0.0;
  std::uint64_t reference_checksum_before = 0;
  std::uint64_t reference_checksum_after = 0;
};

using AlignStepHook = std::function<void(long step, Policy& policy, const StepMetrics& metrics)>;

AlignResult align(const Dataset& ds, const Policy& pretrained, const Referee& referee,
                  const AlignOptions& options, std::uint64_t seed, MetricsWriter* writer = nullptr,
                  const AlignStepHook& after_step = nullptr);

// Held-out all-constraints pass rate with deterministic sampling.
double heldout_pass_rate(const Dataset& ds, const Policy& policy, const FlowSchedule& schedule,
                         int max_prompts, std::uint64_t seed);

}  // namespace lvrpo
