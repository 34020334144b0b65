#include "lvrpo/grpo.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "lvrpo/checkpoint.hpp"

namespace lvrpo {

double lr_at_step(const SchedulerState& s) {
  if (s.step < 0 || s.step > s.total_steps) {
    fail("scheduler step " + std::to_string(s.step) + " outside [0," + std::to_string(s.total_steps) + "]");
  }
  if (s.step <= s.warmup_steps) {
    if (s.warmup_steps == 0) return s.base_lr;
    return s.base_lr * static_cast<double>(s.step) / static_cast<double>(s.warmup_steps);
  }
  const double progress =
      static_cast<double>(s.step - s.warmup_steps) / static_cast<double>(s.total_steps - s.warmup_steps);
  return 0.5 * s.base_lr * (1.0 + std::cos(3.14159265358979323846 * progress));
}

std::vector<double> compute_advantages(const std::vector<double>& rewards, double eps_adv) {
  const std::size_t g = rewards.size();
  if (g < 2) fail("compute_advantages requires a group of at least 2");
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= static_cast<double>(g);
  double var = 0.0;
  for (double r : rewards) {
    const double d = r - mean;
    var += d * d;
  }
  var /= static_cast<double>(g);  // population variance, no Bessel correction
  const double denom = std::sqrt(var) + eps_adv;
  std::vector<double> out(g);
  for (std::size_t i = 0; i < g; ++i) out[i] = (rewards[i] - mean) / denom;
  return out;
}

namespace {

double kl_term(double delta) {
  const double d = std::clamp(delta, -30.0, 30.0);
  return std::exp(d) - d - 1.0;
}

}  // namespace

double kl_estimate(const std::vector<double>& logp_theta, const std::vector<double>& logp_ref) {
  if (logp_theta.size() != logp_ref.size()) fail("kl_estimate: per-step log density lists differ in length");
  if (logp_theta.empty()) fail("kl_estimate: empty log density lists");
  double acc = 0.0;
  for (std::size_t i = 0; i < logp_theta.size(); ++i) acc += kl_term(logp_ref[i] - logp_theta[i]);
  return acc / static_cast<double>(logp_theta.size());
}

template <class S>
Tensor<S> kl_estimate_node(const std::vector<Tensor<S>>& lp_steps, const std::vector<double>& logp_ref,
                           Tape<S>* tape) {
  if (lp_steps.size() != logp_ref.size()) fail("kl_estimate: per-step log density lists differ in length");
  if (lp_steps.empty()) fail("kl_estimate: empty log density lists");
  Tensor<S> acc;
  for (std::size_t k = 0; k < lp_steps.size(); ++k) {
    auto delta = sub(Tensor<S>::scalar(static_cast<S>(logp_ref[k])), lp_steps[k], tape);
    delta = elem_clamp(delta, S(-30), S(30), tape);
    auto term = add_scalar(sub(elem_exp(delta, tape), delta, tape), S(-1), tape);
    acc = k == 0 ? term : add(acc, term, tape);
  }
  return scale(acc, S(1) / static_cast<S>(lp_steps.size()), tape);
}

template <class S>
Tensor<S> surrogate_term(const Tensor<S>& log_ratio, double advantage, double eps_clip, Tape<S>* tape) {
  auto rho = elem_exp(log_ratio, tape);
  auto unclipped = scale(rho, static_cast<S>(advantage), tape);
  auto clipped = scale(elem_clamp(rho, S(1) - static_cast<S>(eps_clip), S(1) + static_cast<S>(eps_clip), tape),
                       static_cast<S>(advantage), tape);
  return elem_min(unclipped, clipped, tape);
}

template Tensor<float> kl_estimate_node<float>(const std::vector<Tensor<float>>&, const std::vector<double>&,
                                               Tape<float>*);
template Tensor<double> kl_estimate_node<double>(const std::vector<Tensor<double>>&,
                                                 const std::vector<double>&, Tape<double>*);
template Tensor<float> surrogate_term<float>(const Tensor<float>&, double, double, Tape<float>*);
template Tensor<double> surrogate_term<double>(const Tensor<double>&, double, double, Tape<double>*);

// --- caption sampling -------------------------------------------------------------

namespace {

// Log-softmax of one scaled logits row, arithmetic-identical to the
// cross_entropy op so sampled log-probs match their tape recomputation
// bit for bit.
void row_probs(const float* logits, int n, float inv_temp, std::vector<float>& probs) {
  probs.resize(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) probs[static_cast<std::size_t>(j)] = logits[j] * inv_temp;
  float mx = probs[0];
  for (int j = 1; j < n; ++j) mx = std::max(mx, probs[static_cast<std::size_t>(j)]);
  float z = 0.0f;
  for (int j = 0; j < n; ++j) {
    probs[static_cast<std::size_t>(j)] = std::exp(probs[static_cast<std::size_t>(j)] - mx);
    z += probs[static_cast<std::size_t>(j)];
  }
  const float inv = 1.0f / z;
  for (int j = 0; j < n; ++j) probs[static_cast<std::size_t>(j)] *= inv;
}

int sample_from_probs(const std::vector<float>& probs, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t j = 0; j < probs.size(); ++j) {
    acc += probs[j];
    if (u < acc) return static_cast<int>(j);
  }
  return static_cast<int>(probs.size()) - 1;
}

// Per-token log-prob nodes of a sampled caption under `policy`, teacher
// forced in one forward.
std::vector<Tensor<float>> caption_step_logps(const Policy& policy, const LatentImage& latent,
                                              const std::vector<int>& caption, double temperature,
                                              Tape<float>* tape) {
  std::vector<int> prefix(caption.begin(), caption.end() - 1);
  auto logits = forward_text_logits<float>(policy, latent, prefix, tape);
  const float inv_temp = static_cast<float>(1.0 / temperature);
  std::vector<Tensor<float>> out;
  for (std::size_t j = 0; j + 1 < caption.size(); ++j) {
    auto row = slice_rows(logits, static_cast<int>(j), static_cast<int>(j) + 1, tape);
    auto nll = cross_entropy(scale(row, inv_temp, tape), {caption[j + 1]}, tape);
    out.push_back(scale(nll, -1.0f, tape));
  }
  return out;
}

std::vector<double> caption_ref_logps(const Policy& reference, const LatentImage& latent,
                                      const std::vector<int>& caption, double temperature) {
  auto nodes = caption_step_logps(reference, latent, caption, temperature, nullptr);
  std::vector<double> out;
  for (const auto& n : nodes) out.push_back(n.item());
  return out;
}

}  // namespace

GroupRollout sample_group(const DatasetRecord& record, const LatentImage& record_latent, bool visual_task,
                          const Policy& policy, const Policy& reference, const GroupConfig& cfg,
                          std::uint64_t seed) {
  cfg.validate();
  GroupRollout roll;
  roll.record = &record;
  roll.visual_task = visual_task;
  const int g = cfg.group_size;

  if (visual_task) {
    roll.trajectories =
        sample_stochastic_group(policy, record.prompt.tokens, cfg.schedule, g, tag_seed(seed, "flow"));
    for (auto& traj : roll.trajectories) {
      roll.logp_policy_steps.push_back(traj.logp_policy);
      std::vector<Tensor<float>> steps;
      trajectory_log_prob<float>(traj, reference, cfg.schedule, record.prompt.tokens, nullptr, &steps);
      std::vector<double> ref_steps;
      for (const auto& s : steps) ref_steps.push_back(s.item());
      traj.logp_ref = ref_steps;
      roll.logp_ref_steps.push_back(std::move(ref_steps));
      RolloutOutput out;
      out.visual = true;
      out.latent = tensor_to_latent(traj.final_state());
      roll.outputs.push_back(std::move(out));
    }
    return roll;
  }

  const Vocabulary& vocab = Vocabulary::instance();
  std::vector<std::vector<int>> caps(static_cast<std::size_t>(g), std::vector<int>{vocab.bos()});
  std::vector<std::vector<double>> lps(static_cast<std::size_t>(g));
  std::vector<Rng> rngs;
  for (int i = 0; i < g; ++i) rngs.emplace_back(mix_seed(tag_seed(seed, "caption"), static_cast<std::uint64_t>(i)));
  std::vector<char> alive(static_cast<std::size_t>(g), 1);
  const float inv_temp = static_cast<float>(1.0 / cfg.temperature);

  for (int pos = 0; pos < cfg.max_caption_len; ++pos) {
    std::vector<int> alive_ids;
    std::vector<const LatentImage*> latents;
    std::vector<std::vector<int>> prefixes;
    for (int i = 0; i < g; ++i) {
      if (!alive[static_cast<std::size_t>(i)]) continue;
      alive_ids.push_back(i);
      latents.push_back(&record_latent);
      prefixes.push_back(caps[static_cast<std::size_t>(i)]);
    }
    if (alive_ids.empty()) break;
    auto logits = forward_text_logits_batch<float>(policy, latents, prefixes, nullptr);
    std::vector<float> probs;
    for (std::size_t bi = 0; bi < alive_ids.size(); ++bi) {
      const int i = alive_ids[bi];
      const auto& l = logits[bi];
      const float* row = l.ptr() + static_cast<std::size_t>(l.rows() - 1) * l.cols();
      row_probs(row, l.cols(), inv_temp, probs);
      const int tok = sample_from_probs(probs, rngs[static_cast<std::size_t>(i)]);
      caps[static_cast<std::size_t>(i)].push_back(tok);
      lps[static_cast<std::size_t>(i)].push_back(std::log(static_cast<double>(probs[static_cast<std::size_t>(tok)])));
      if (tok == vocab.eos()) alive[static_cast<std::size_t>(i)] = 0;
    }
  }

  for (int i = 0; i < g; ++i) {
    roll.captions.push_back(caps[static_cast<std::size_t>(i)]);
    roll.logp_policy_steps.push_back(lps[static_cast<std::size_t>(i)]);
    roll.logp_ref_steps.push_back(
        caption_ref_logps(reference, record_latent, caps[static_cast<std::size_t>(i)], cfg.temperature));
    RolloutOutput out;
    out.visual = false;
    out.caption = caps[static_cast<std::size_t>(i)];
    roll.outputs.push_back(std::move(out));
  }
  roll.context_latent = record_latent;
  return roll;
}

Tensor<float> clipped_surrogate_loss(const GroupRollout& rollout, const Policy& policy,
                                     const GroupConfig& cfg, Tape<float>* tape) {
  const int g = cfg.group_size;
  if (static_cast<int>(rollout.advantages.size()) != g) {
    fail("clipped_surrogate_loss: advantages are not filled");
  }
  Tensor<float> acc;
  for (int i = 0; i < g; ++i) {
    std::vector<Tensor<float>> lp_steps;
    if (rollout.visual_task) {
      trajectory_log_prob<float>(rollout.trajectories[static_cast<std::size_t>(i)], policy, cfg.schedule,
                                 rollout.record->prompt.tokens, tape, &lp_steps);
    } else {
      lp_steps = caption_step_logps(policy, rollout.context_latent,
                                    rollout.captions[static_cast<std::size_t>(i)], cfg.temperature, tape);
    }
    // Summing per-step differences keeps the ratio exactly 1 on the first
    // pass and avoids cancellation in the large per-step densities.
    Tensor<float> log_ratio;
    const auto& stored = rollout.logp_policy_steps[static_cast<std::size_t>(i)];
    for (std::size_t k = 0; k < lp_steps.size(); ++k) {
      auto diff = sub(lp_steps[k], Tensor<float>::scalar(static_cast<float>(stored[k])), tape);
      log_ratio = k == 0 ? diff : add(log_ratio, diff, tape);
    }
    auto term = surrogate_term(log_ratio, rollout.advantages[static_cast<std::size_t>(i)], cfg.eps_clip, tape);
    auto obj = scale(term, -1.0f, tape);
    if (cfg.beta > 0.0) {
      auto kl = kl_estimate_node(lp_steps, rollout.logp_ref_steps[static_cast<std::size_t>(i)], tape);
      obj = add(obj, scale(kl, static_cast<float>(cfg.beta), tape), tape);
    }
    acc = i == 0 ? obj : add(acc, obj, tape);
  }
  return scale(acc, 1.0f / static_cast<float>(g), tape);
}

namespace {

struct RunningStat {
  double sum = 0.0, sumsq = 0.0;
  long n = 0;
  void push(double x) {
    sum += x;
    sumsq += x * x;
    ++n;
  }
  double mean() const { return n == 0 ? 0.0 : sum / n; }
  double stdev() const {
    if (n == 0) return 0.0;
    const double m = mean();
    return std::sqrt(std::max(0.0, sumsq / n - m * m));
  }
};

}  // namespace

StepMetrics grpo_update_step(const Dataset& ds, const std::vector<int>& record_ids, Policy& policy,
                             const Policy& reference, const Referee& referee, const RewardWeights& weights,
                             const GroupConfig& cfg, OptimizerState& opt, const SchedulerState& sched,
                             std::uint64_t seed) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  StepMetrics m;
  m.step = sched.step;
  m.lr = lr_at_step(sched);

  Rng task_rng(tag_seed(seed, "tasks"));
  std::vector<GroupRollout> rollouts;
  RunningStat s_sem, s_dense, s_ins, s_kn, s_total, s_kl;
  for (std::size_t bi = 0; bi < record_ids.size(); ++bi) {
    const auto& rec = ds.train.at(static_cast<std::size_t>(record_ids[bi]));
    const bool visual = task_rng.uniform() < cfg.task_mix;
    auto roll = sample_group(rec, ds.latent_of(rec, false), visual, policy, reference, cfg,
                             mix_seed(seed, static_cast<std::uint64_t>(bi)));
    roll.rewards = reward_group(roll.outputs, rec.prompt, referee, ds.kb, weights);
    std::vector<double> totals;
    for (const auto& r : roll.rewards) {
      totals.push_back(r.r_total);
      s_sem.push(r.r_sem);
      s_dense.push(r.r_dense);
      s_ins.push(r.r_ins);
      s_kn.push(r.r_kn);
      s_total.push(r.r_total);
    }
    roll.advantages = compute_advantages(totals, cfg.eps_adv);
    for (std::size_t i = 0; i < roll.logp_policy_steps.size(); ++i) {
      s_kl.push(kl_estimate(roll.logp_policy_steps[i], roll.logp_ref_steps[i]));
    }
    if (visual) {
      ++m.n_gen;
    } else {
      ++m.n_und;
    }
    rollouts.push_back(std::move(roll));
  }

  const float inv_b = 1.0f / static_cast<float>(rollouts.size());
  double loss_val = 0.0;
  for (const auto& roll : rollouts) {
    Tape<float> tape;
    auto loss = scale(clipped_surrogate_loss(roll, policy, cfg, &tape), inv_b, &tape);
    const double v = static_cast<double>(loss.item());
    if (!std::isfinite(v)) {
      fail("non-finite loss at step " + std::to_string(sched.step) + " on record '" + roll.record->id +
           "' (task=" + (roll.visual_task ? "generation" : "understanding") + ")");
    }
    loss_val += v;
    tape.backward(loss);
  }

  auto params = policy.params.all();
  m.grad_norm = global_grad_norm(params);
  m.clip_scale = clip_global_grad_norm(params, cfg.max_grad_norm);
  opt.lr = static_cast<float>(m.lr);
  adamw_step(params, opt);

  m.loss = loss_val;
  m.kl = s_kl.mean();
  m.mean_r_sem = s_sem.mean();
  m.std_r_sem = s_sem.stdev();
  m.mean_r_dense = s_dense.mean();
  m.std_r_dense = s_dense.stdev();
  m.mean_r_ins = s_ins.mean();
  m.std_r_ins = s_ins.stdev();
  m.mean_r_kn = s_kn.mean();
  m.std_r_kn = s_kn.stdev();
  m.mean_r_total = s_total.mean();
  m.std_r_total = s_total.stdev();
  m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return m;
}

nlohmann::ordered_json step_metrics_json(const StepMetrics& m) {
  nlohmann::ordered_json j;
  j["step"] = m.step;
  j["lr"] = m.lr;
  j["loss"] = m.loss;
  j["kl"] = m.kl;
  j["grad_norm"] = m.grad_norm;
  j["clip_scale"] = m.clip_scale;
  j["r_sem_mean"] = m.mean_r_sem;
  j["r_sem_std"] = m.std_r_sem;
  j["r_dense_mean"] = m.mean_r_dense;
  j["r_dense_std"] = m.std_r_dense;
  j["r_ins_mean"] = m.mean_r_ins;
  j["r_ins_std"] = m.std_r_ins;
  j["r_kn_mean"] = m.mean_r_kn;
  j["r_kn_std"] = m.std_r_kn;
  j["r_total_mean"] = m.mean_r_total;
  j["r_total_std"] = m.std_r_total;
  j["n_gen"] = m.n_gen;
  j["n_und"] = m.n_und;
  return j;
}

double heldout_pass_rate(const Dataset& ds, const Policy& policy, const FlowSchedule& schedule,
                         int max_prompts, std::uint64_t seed) {
  if (ds.eval.empty()) fail("heldout_pass_rate: empty eval split");
  const int n = std::min<int>(max_prompts, static_cast<int>(ds.eval.size()));
  int passes = 0;
  for (int i = 0; i < n; ++i) {
    // Strided walk keeps the category mix of the split.
    const auto& rec = ds.eval[static_cast<std::size_t>(i) * ds.eval.size() / static_cast<std::size_t>(n)];
    FlowSchedule det = schedule;
    det.sigma = 0.0;
    auto latent = sample_deterministic(policy, rec.prompt.tokens, det, mix_seed(seed, static_cast<std::uint64_t>(i)));
    auto [r_ins, bits] = instruction_reward(latent, rec.prompt);
    if (r_ins == 1.0) ++passes;
  }
  return static_cast<double>(passes) / n;
}

AlignResult align(const Dataset& ds, const Policy& pretrained, const Referee& referee,
                  const AlignOptions& options, std::uint64_t seed, MetricsWriter* writer,
                  const AlignStepHook& after_step) {
  AlignResult res;
  res.policy = pretrained.clone();
  Policy reference = pretrained.clone();
  res.reference_checksum_before = params_checksum(reference.params);

  auto params = res.policy.params.all();
  auto opt = OptimizerState::make(params, static_cast<float>(options.lr),
                                  static_cast<float>(options.weight_decay));
  SchedulerState sched;
  sched.warmup_steps = options.warmup_steps;
  sched.total_steps = options.steps;
  sched.base_lr = options.lr;

  if (!options.out_dir.empty()) {
    save_policy_checkpoint(reference, "reference", 0, options.out_dir + "/reference.lvrp",
                           options.provenance);
  }

  for (long step = 0; step < options.steps; ++step) {
    sched.step = step;
    Rng brng(mix_seed(tag_seed(seed, "batch"), static_cast<std::uint64_t>(step)));
    std::vector<int> ids;
    for (int i = 0; i < options.batch_prompts; ++i) {
      ids.push_back(static_cast<int>(brng.below(ds.train.size())));
    }
    StepMetrics m = grpo_update_step(ds, ids, res.policy, reference, referee, options.weights,
                                     options.group, opt, sched,
                                     mix_seed(tag_seed(seed, "step"), static_cast<std::uint64_t>(step)));
    if (writer) {
      writer->write(step_metrics_json(m));
      writer->write_timing(nlohmann::ordered_json{{"step", m.step}, {"wall_ms", m.wall_ms}});
    }
    res.metrics.push_back(m);
    if (after_step) after_step(step, res.policy, m);
    if (options.ref_refresh_every > 0 && (step + 1) % options.ref_refresh_every == 0) {
      reference = res.policy.clone();
    }
    if (!options.out_dir.empty() && options.checkpoint_every > 0 &&
        (step + 1) % options.checkpoint_every == 0) {
      save_policy_checkpoint(res.policy, "policy", step + 1,
                             options.out_dir + "/policy_step" + std::to_string(step + 1) + ".lvrp",
                             options.provenance);
    }
  }

  res.reference_checksum_after = params_checksum(reference.params);
  res.final_heldout_pass_rate =
      heldout_pass_rate(ds, res.policy, options.group.schedule, options.eval_prompts, tag_seed(seed, "eval"));
  if (!options.out_dir.empty()) {
    save_policy_checkpoint(res.policy, "policy", options.steps, options.out_dir + "/policy.lvrp",
                           options.provenance);
  }
  return res;
}

}  // namespace lvrpo
