#include "lvrpo/pretrain.hpp"

#include <chrono>

namespace lvrpo {

Tensor<float> unified_supervised_loss(const Policy& policy, const std::vector<const LatentImage*>& latents,
                                      const std::vector<std::vector<int>>& captions,
                                      const std::vector<const std::vector<int>*>& prompts, double lambda_vis,
                                      Rng& rng, Tape<float>* tape) {
  auto text = understanding_loss(policy, latents, captions, tape);
  if (lambda_vis == 0.0) return text;
  auto vis = flow_matching_loss(policy, latents, prompts, rng, tape);
  return add(text, scale(vis, static_cast<float>(lambda_vis), tape), tape);
}

Policy pretrain_policy(const Dataset& ds, const ModelConfig& cfg, const PretrainOptions& opt,
                       std::uint64_t seed, MetricsWriter* writer) {
  Policy policy = Policy::init(cfg, seed);
  auto params = policy.params.all();
  auto state = OptimizerState::make(params, static_cast<float>(opt.lr), static_cast<float>(opt.weight_decay));
  SchedulerState sched;
  sched.warmup_steps = opt.warmup_steps;
  sched.total_steps = opt.steps;
  sched.base_lr = opt.lr;
  Rng rng(tag_seed(seed, "pretrain"));

  for (long step = 0; step < opt.steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<const LatentImage*> latents;
    std::vector<std::vector<int>> captions;
    std::vector<const std::vector<int>*> prompts;
    for (int i = 0; i < opt.batch; ++i) {
      const auto& rec = ds.train[rng.below(ds.train.size())];
      latents.push_back(&ds.latent_of(rec, false));
      captions.push_back(rec.prompt.tokens);
      prompts.push_back(&rec.prompt.tokens);
    }
    Tape<float> tape;
    auto loss = unified_supervised_loss(policy, latents, captions, prompts, opt.lambda_vis, rng, &tape);
    const double v = loss.item();
    if (!std::isfinite(v)) fail("non-finite supervised loss at step " + std::to_string(step));
    tape.backward(loss);
    const double gnorm = global_grad_norm(params);
    clip_global_grad_norm(params, 1.0);
    sched.step = step;
    state.lr = static_cast<float>(lr_at_step(sched));
    adamw_step(params, state);
    if (writer) {
      writer->write(nlohmann::ordered_json{
          {"step", step}, {"lr", state.lr}, {"loss", v}, {"grad_norm", gnorm}});
      writer->write_timing(nlohmann::ordered_json{
          {"step", step},
          {"wall_ms", std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count()}});
    }
  }
  return policy;
}

}  // namespace lvrpo
