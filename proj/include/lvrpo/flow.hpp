#pragma once

#include <cmath>
#include <vector>

#include "lvrpo/model.hpp"

namespace lvrpo {

struct FlowSchedule {
  int n_steps = 8;
  double sigma = 0.1;  // 0 selects the deterministic sampler

  double dt() const { return 1.0 / n_steps; }
  double step_std() const { return sigma * std::sqrt(dt()); }
  bool operator==(const FlowSchedule& o) const { return n_steps == o.n_steps && sigma == o.sigma; }
};

struct StochasticTrajectory {
  std::vector<Tensor<float>> states;  // n_steps + 1 states of shape (256 x 10)
  std::vector<double> logp_policy;    // per-step transition log densities at sampling time
  std::vector<double> logp_ref;       // same transitions scored under the reference
  FlowSchedule schedule;

  const Tensor<float>& final_state() const { return states.back(); }
};

LatentImage tensor_to_latent(const Tensor<float>& t);

template <class S>
Tensor<S> interpolate_state(const Tensor<S>& x0, const Tensor<S>& x1, double t);

// MSE between the predicted velocity and (x1 - x0) with the draws fixed by
// the caller; the rng overload below is the training entry point.
template <class S>
Tensor<S> flow_matching_loss_fixed(const PolicyT<S>& policy, const std::vector<Tensor<S>>& x1s,
                                   const std::vector<Tensor<S>>& x0s, const std::vector<double>& ts,
                                   const std::vector<const std::vector<int>*>& prompts, Tape<S>* tape);

Tensor<float> flow_matching_loss(const Policy& policy, const std::vector<const LatentImage*>& x1s,
                                 const std::vector<const std::vector<int>*>& prompts, Rng& rng,
                                 Tape<float>* tape);

LatentImage sample_deterministic(const Policy& policy, const std::vector<int>& prompt_tokens,
                                 const FlowSchedule& schedule, std::uint64_t seed);

StochasticTrajectory sample_stochastic(const Policy& policy, const std::vector<int>& prompt_tokens,
                                       const FlowSchedule& schedule, Rng& rng);

// Lockstep group sampling: G trajectories for one prompt advance together so
// each flow step is a single batched forward.
std::vector<StochasticTrajectory> sample_stochastic_group(const Policy& policy,
                                                          const std::vector<int>& prompt_tokens,
                                                          const FlowSchedule& schedule, int group_size,
                                                          std::uint64_t seed);

// Differentiable log pi(o|q): per-step Gaussian transition densities summed
// over the recorded trajectory. `per_step` (optional) receives the per-step
// scalars for the KL estimator.
template <class S>
Tensor<S> trajectory_log_prob(const StochasticTrajectory& traj, const PolicyT<S>& policy,
                              const FlowSchedule& schedule, const std::vector<int>& prompt_tokens,
                              Tape<S>* tape, std::vector<Tensor<S>>* per_step = nullptr);

}  // namespace lvrpo
