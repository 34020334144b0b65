#pragma once

#include <string>

#include "json.hpp"
#include "lvrpo/evalharness.hpp"
#include "lvrpo/pretrain.hpp"
#include "lvrpo/referee.hpp"

namespace lvrpo {

struct RunConfig {
  std::string preset = "desk";
  std::uint64_t seed = 0;

  struct Data {
    int n_per_category = 100;
    int n_eval_per_category = -1;  // -1: derived from n_per_category
  } data;

  struct Model {
    int d_model = 32;
    int n_layers = 1;
    int n_heads = 2;
    int expert_hidden = 64;
    std::string router_mode = "learned_top2";
    long pretrain_steps = 1500;
    int pretrain_batch = 16;
    double pretrain_lr = 3e-3;
    double lambda_vis = 1.0;
  } model;

  struct RefereeSection {
    long steps = 2000;
    int batch = 32;
    double lr = 2e-3;
    double target_accuracy = 0.95;
    double dense_weight = 0.5;
  } referee;

  struct Grpo {
    int group_size = 8;
    double beta = 0.01;
    double eps_adv = 1e-8;
    double eps_clip = 0.2;
    int inner_epochs = 1;
    double temperature = 1.0;
    int flow_steps = 8;
    double flow_sigma = 0.1;
    double task_mix = 0.5;
    int max_caption_len = 32;
    double max_grad_norm = 1.0;
    double lambda_sem = 1.0;
    double lambda_ins = 0.5;
    double lambda_kn = 0.5;
    double alpha_dense = 0.5;
    double lr = 1e-4;
    double weight_decay = 0.05;
    long steps = 300;
    int batch_prompts = 16;
    long warmup_steps = 30;
  } grpo;

  struct Eval {
    int seeds_per_prompt = 4;
    int ablation_steps = 150;
  } eval;

  ModelConfig model_config() const;
  PretrainOptions pretrain_options() const;
  RefereePretrainOptions referee_options() const;
  AlignOptions align_options() const;
};

RunConfig make_preset(const std::string& name);  // "desk" or "paper"

// Strict parse: applies the preset named in the file (default desk), then
// the overrides; unknown keys and type mismatches are fatal.
RunConfig parse_config_json(const nlohmann::ordered_json& j);
RunConfig parse_config_file(const std::string& path);

nlohmann::ordered_json run_config_json(const RunConfig& c);

// LVRPO_THREADS, default 1.
int env_thread_count();

}  // namespace lvrpo
