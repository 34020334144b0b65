#include "lvrpo/flow.hpp"

namespace lvrpo {

LatentImage tensor_to_latent(const Tensor<float>& t) {
  if (t.numel() != static_cast<std::size_t>(kLatentSize)) fail("tensor_to_latent size mismatch");
  LatentImage img;
  std::copy(t.v().begin(), t.v().end(), img.grid.begin());
  return img;
}

namespace {

Tensor<float> randn_state(Rng& rng) {
  Tensor<float> x = Tensor<float>::zeros({kPatches, kChannels});
  for (auto& v : x.v()) v = rng.normalf();
  return x;
}

}  // namespace

template <class S>
Tensor<S> interpolate_state(const Tensor<S>& x0, const Tensor<S>& x1, double t) {
  if (t < 0.0 || t > 1.0) fail("interpolate_state: t=" + std::to_string(t) + " outside [0,1]");
  if (x0.shape != x1.shape) fail("interpolate_state shape mismatch");
  Tensor<S> out = Tensor<S>::zeros(x0.shape);
  const S tt = static_cast<S>(t);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    (*out.data)[i] = tt * (*x1.data)[i] + (S(1) - tt) * (*x0.data)[i];
  }
  return out;
}

template <class S>
Tensor<S> flow_matching_loss_fixed(const PolicyT<S>& policy, const std::vector<Tensor<S>>& x1s,
                                   const std::vector<Tensor<S>>& x0s, const std::vector<double>& ts,
                                   const std::vector<const std::vector<int>*>& prompts, Tape<S>* tape) {
  if (x1s.size() != x0s.size() || x1s.size() != ts.size() || x1s.size() != prompts.size()) {
    fail("flow_matching_loss size mismatch");
  }
  std::vector<Tensor<S>> xts;
  std::vector<Tensor<S>> targets;
  xts.reserve(x1s.size());
  for (std::size_t i = 0; i < x1s.size(); ++i) {
    xts.push_back(interpolate_state(x0s[i], x1s[i], ts[i]));
    targets.push_back(sub<S>(x1s[i], x0s[i], nullptr));
  }
  std::vector<const Tensor<S>*> state_ptrs;
  for (const auto& x : xts) state_ptrs.push_back(&x);
  auto velocities = forward_velocity_multi(policy, state_ptrs, ts, prompts, tape);
  auto v = velocities.size() == 1 ? velocities[0] : concat_rows(velocities, tape);
  auto target = targets.size() == 1 ? targets[0] : concat_rows<S>(targets, nullptr);
  return mse_loss(v, target, tape);
}

Tensor<float> flow_matching_loss(const Policy& policy, const std::vector<const LatentImage*>& x1s,
                                 const std::vector<const std::vector<int>*>& prompts, Rng& rng,
                                 Tape<float>* tape) {
  std::vector<Tensor<float>> x1t, x0t;
  std::vector<double> ts;
  for (const LatentImage* img : x1s) {
    x1t.push_back(latent_patches<float>(*img));
    x0t.push_back(randn_state(rng));
    ts.push_back(rng.uniform());
  }
  return flow_matching_loss_fixed<float>(policy, x1t, x0t, ts, prompts, tape);
}

LatentImage sample_deterministic(const Policy& policy, const std::vector<int>& prompt_tokens,
                                 const FlowSchedule& schedule, std::uint64_t seed) {
  Rng rng(tag_seed(seed, "flow-x0"));
  Tensor<float> x = randn_state(rng);
  const double dt = schedule.dt();
  for (int k = 0; k < schedule.n_steps; ++k) {
    const double t = k * dt;
    auto v = forward_velocity<float>(policy, x, t, prompt_tokens, nullptr);
    for (std::size_t i = 0; i < x.numel(); ++i) {
      x.v()[i] += static_cast<float>(dt) * v.v()[i];
    }
  }
  return tensor_to_latent(x);
}

StochasticTrajectory sample_stochastic(const Policy& policy, const std::vector<int>& prompt_tokens,
                                       const FlowSchedule& schedule, Rng& rng) {
  if (schedule.sigma <= 0.0) fail("sample_stochastic requires sigma > 0");
  StochasticTrajectory traj;
  traj.schedule = schedule;
  traj.states.push_back(randn_state(rng));
  const double dt = schedule.dt();
  const float step_std = static_cast<float>(schedule.step_std());
  for (int k = 0; k < schedule.n_steps; ++k) {
    const double t = k * dt;
    auto v = forward_velocity<float>(policy, traj.states.back(), t, prompt_tokens, nullptr);
    const auto& x = traj.states.back();
    Tensor<float> mean = Tensor<float>::zeros({kPatches, kChannels});
    Tensor<float> next = Tensor<float>::zeros({kPatches, kChannels});
    for (std::size_t i = 0; i < mean.numel(); ++i) {
      mean.v()[i] = x.v()[i] + static_cast<float>(dt) * v.v()[i];
      next.v()[i] = mean.v()[i] + step_std * rng.normalf();
    }
    traj.logp_policy.push_back(gaussian_log_density<float>(next, mean, step_std, nullptr).item());
    traj.states.push_back(std::move(next));
  }
  return traj;
}

std::vector<StochasticTrajectory> sample_stochastic_group(const Policy& policy,
                                                          const std::vector<int>& prompt_tokens,
                                                          const FlowSchedule& schedule, int group_size,
                                                          std::uint64_t seed) {
  if (schedule.sigma <= 0.0) fail("sample_stochastic requires sigma > 0");
  std::vector<Rng> rngs;
  std::vector<StochasticTrajectory> trajs(static_cast<std::size_t>(group_size));
  for (int g = 0; g < group_size; ++g) {
    rngs.emplace_back(mix_seed(tag_seed(seed, "flow-group"), static_cast<std::uint64_t>(g)));
    trajs[static_cast<std::size_t>(g)].schedule = schedule;
    trajs[static_cast<std::size_t>(g)].states.push_back(randn_state(rngs.back()));
  }
  const double dt = schedule.dt();
  const float step_std = static_cast<float>(schedule.step_std());
  for (int k = 0; k < schedule.n_steps; ++k) {
    const double t = k * dt;
    std::vector<const Tensor<float>*> states;
    std::vector<double> ts(static_cast<std::size_t>(group_size), t);
    for (auto& traj : trajs) states.push_back(&traj.states.back());
    auto vs = forward_velocity_batch<float>(policy, states, ts, prompt_tokens, nullptr);
    for (int g = 0; g < group_size; ++g) {
      auto& traj = trajs[static_cast<std::size_t>(g)];
      const auto& x = traj.states.back();
      Tensor<float> mean = Tensor<float>::zeros({kPatches, kChannels});
      Tensor<float> next = Tensor<float>::zeros({kPatches, kChannels});
      for (std::size_t i = 0; i < mean.numel(); ++i) {
        mean.v()[i] = x.v()[i] + static_cast<float>(dt) * vs[static_cast<std::size_t>(g)].v()[i];
        next.v()[i] = mean.v()[i] + step_std * rngs[static_cast<std::size_t>(g)].normalf();
      }
      traj.logp_policy.push_back(gaussian_log_density<float>(next, mean, step_std, nullptr).item());
      traj.states.push_back(std::move(next));
    }
  }
  return trajs;
}

template <class S>
Tensor<S> trajectory_log_prob(const StochasticTrajectory& traj, const PolicyT<S>& policy,
                              const FlowSchedule& schedule, const std::vector<int>& prompt_tokens,
                              Tape<S>* tape, std::vector<Tensor<S>>* per_step) {
  if (!(traj.schedule == schedule)) fail("trajectory_log_prob: schedule does not match the recorded one");
  if (static_cast<int>(traj.states.size()) != schedule.n_steps + 1) {
    fail("trajectory_log_prob: trajectory has wrong state count");
  }
  const double dt = schedule.dt();
  const S step_std = static_cast<S>(schedule.step_std());

  std::vector<Tensor<S>> states_s;
  states_s.reserve(traj.states.size());
  for (const auto& x : traj.states) states_s.push_back(cast_tensor<S>(x));

  std::vector<const Tensor<S>*> inputs;
  std::vector<double> ts;
  for (int k = 0; k < schedule.n_steps; ++k) {
    inputs.push_back(&states_s[static_cast<std::size_t>(k)]);
    ts.push_back(k * dt);
  }
  auto velocities = forward_velocity_batch(policy, inputs, ts, prompt_tokens, tape);

  Tensor<S> total = Tensor<S>::scalar(S(0));
  for (int k = 0; k < schedule.n_steps; ++k) {
    auto drift = scale(velocities[static_cast<std::size_t>(k)], static_cast<S>(dt), tape);
    auto mean = add(states_s[static_cast<std::size_t>(k)], drift, tape);
    auto lp = gaussian_log_density(states_s[static_cast<std::size_t>(k + 1)], mean, step_std, tape);
    if (per_step) per_step->push_back(lp);
    total = k == 0 ? lp : add(total, lp, tape);
  }
  return total;
}

template Tensor<float> interpolate_state<float>(const Tensor<float>&, const Tensor<float>&, double);
template Tensor<double> interpolate_state<double>(const Tensor<double>&, const Tensor<double>&, double);
template Tensor<float> flow_matching_loss_fixed<float>(const Policy&, const std::vector<Tensor<float>>&,
                                                       const std::vector<Tensor<float>>&,
                                                       const std::vector<double>&,
                                                       const std::vector<const std::vector<int>*>&,
                                                       Tape<float>*);
template Tensor<double> flow_matching_loss_fixed<double>(const PolicyT<double>&,
                                                         const std::vector<Tensor<double>>&,
                                                         const std::vector<Tensor<double>>&,
                                                         const std::vector<double>&,
                                                         const std::vector<const std::vector<int>*>&,
                                                         Tape<double>*);
template Tensor<float> trajectory_log_prob<float>(const StochasticTrajectory&, const Policy&,
                                                  const FlowSchedule&, const std::vector<int>&,
                                                  Tape<float>*, std::vector<Tensor<float>>*);
template Tensor<double> trajectory_log_prob<double>(const StochasticTrajectory&, const PolicyT<double>&,
                                                    const FlowSchedule&, const std::vector<int>&,
                                                    Tape<double>*, std::vector<Tensor<double>>*);

}  // namespace lvrpo
