#include "lvrpo/config.hpp"

#include <cstdlib>
#include <fstream>

namespace lvrpo {

using nlohmann::ordered_json;

ModelConfig RunConfig::model_config() const {
  ModelConfig cfg;
  cfg.d_model = model.d_model;
  cfg.n_layers = model.n_layers;
  cfg.n_heads = model.n_heads;
  cfg.expert_hidden = model.expert_hidden;
  if (model.router_mode == "learned_top2") {
    cfg.router_mode = RouterMode::LearnedTop2;
  } else if (model.router_mode == "modality_hard") {
    cfg.router_mode = RouterMode::ModalityHard;
  } else {
    fail("unknown router_mode '" + model.router_mode + "' (learned_top2 or modality_hard)");
  }
  cfg.validate();
  return cfg;
}

PretrainOptions RunConfig::pretrain_options() const {
  PretrainOptions o;
  o.steps = model.pretrain_steps;
  o.batch = model.pretrain_batch;
  o.lr = model.pretrain_lr;
  o.lambda_vis = model.lambda_vis;
  o.warmup_steps = std::max<long>(1, model.pretrain_steps / 20);
  return o;
}

RefereePretrainOptions RunConfig::referee_options() const {
  RefereePretrainOptions o;
  o.steps = referee.steps;
  o.batch = referee.batch;
  o.lr = static_cast<float>(referee.lr);
  o.target_accuracy = referee.target_accuracy;
  o.dense_weight = referee.dense_weight;
  return o;
}

AlignOptions RunConfig::align_options() const {
  AlignOptions o;
  o.group.group_size = grpo.group_size;
  o.group.beta = grpo.beta;
  o.group.eps_adv = grpo.eps_adv;
  o.group.eps_clip = grpo.eps_clip;
  o.group.inner_epochs = grpo.inner_epochs;
  o.group.temperature = grpo.temperature;
  o.group.schedule.n_steps = grpo.flow_steps;
  o.group.schedule.sigma = grpo.flow_sigma;
  o.group.task_mix = grpo.task_mix;
  o.group.max_caption_len = grpo.max_caption_len;
  o.group.max_grad_norm = grpo.max_grad_norm;
  o.weights.lambda_sem = grpo.lambda_sem;
  o.weights.lambda_ins = grpo.lambda_ins;
  o.weights.lambda_kn = grpo.lambda_kn;
  o.weights.alpha_dense = grpo.alpha_dense;
  o.lr = grpo.lr;
  o.weight_decay = grpo.weight_decay;
  o.steps = grpo.steps;
  o.batch_prompts = grpo.batch_prompts;
  o.warmup_steps = grpo.warmup_steps;
  return o;
}

RunConfig make_preset(const std::string& name) {
  RunConfig c;
  c.preset = name;
  if (name == "desk") {
    return c;  // struct defaults are the desk preset
  }
  if (name == "paper") {
    // Alignment-phase values as published; the model stays desk sized.
    c.grpo.group_size = 8;
    c.grpo.beta = 0.01;
    c.grpo.eps_adv = 1e-8;
    c.grpo.lambda_sem = 1.0;
    c.grpo.lambda_ins = 0.5;
    c.grpo.lambda_kn = 0.5;
    c.grpo.lr = 5e-6;
    c.grpo.weight_decay = 0.05;
    c.grpo.warmup_steps = 100;
    c.grpo.steps = 5000;
    c.grpo.batch_prompts = 256;
    c.grpo.max_grad_norm = 1.0;
    return c;
  }
  fail("unknown preset '" + name + "' (desk or paper)");
}

namespace {

class StrictReader {
 public:
  StrictReader(ordered_json j, std::string path) : j_(std::move(j)), path_(std::move(path)) {
    if (!j_.is_object()) fail("config section '" + path_ + "' must be an object");
  }

  ~StrictReader() = default;

  template <class T>
  void read(const std::string& key, T& out) {
    seen_.push_back(key);
    if (!j_.contains(key)) return;
    const auto& v = j_.at(key);
    try {
      out = v.get<T>();
    } catch (const std::exception&) {
      fail("config key '" + join(key) + "' has the wrong type (got " + std::string(v.type_name()) + ")");
    }
  }

  ordered_json section(const std::string& key) {
    seen_.push_back(key);
    if (!j_.contains(key)) return ordered_json::object();
    return j_.at(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      bool known = false;
      for (const auto& s : seen_) {
        if (s == it.key()) known = true;
      }
      if (!known) fail("unknown config key '" + join(it.key()) + "'");
    }
  }

 private:
  std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  ordered_json j_;
  std::string path_;
  std::vector<std::string> seen_;
};

}  // namespace

RunConfig parse_config_json(const ordered_json& j) {
  StrictReader top(j, "");
  std::string preset = "desk";
  top.read("preset", preset);
  RunConfig c = make_preset(preset);
  top.read("seed", c.seed);

  {
    StrictReader s(top.section("data"), "data");
    s.read("n_per_category", c.data.n_per_category);
    s.read("n_eval_per_category", c.data.n_eval_per_category);
    s.finish();
  }
  {
    StrictReader s(top.section("model"), "model");
    s.read("d_model", c.model.d_model);
    s.read("n_layers", c.model.n_layers);
    s.read("n_heads", c.model.n_heads);
    s.read("expert_hidden", c.model.expert_hidden);
    s.read("router_mode", c.model.router_mode);
    s.read("pretrain_steps", c.model.pretrain_steps);
    s.read("pretrain_batch", c.model.pretrain_batch);
    s.read("pretrain_lr", c.model.pretrain_lr);
    s.read("lambda_vis", c.model.lambda_vis);
    s.finish();
  }
  {
    StrictReader s(top.section("referee"), "referee");
    s.read("steps", c.referee.steps);
    s.read("batch", c.referee.batch);
    s.read("lr", c.referee.lr);
    s.read("target_accuracy", c.referee.target_accuracy);
    s.read("dense_weight", c.referee.dense_weight);
    s.finish();
  }
  {
    StrictReader s(top.section("grpo"), "grpo");
    s.read("group_size", c.grpo.group_size);
    s.read("beta", c.grpo.beta);
    s.read("eps_adv", c.grpo.eps_adv);
    s.read("eps_clip", c.grpo.eps_clip);
    s.read("inner_epochs", c.grpo.inner_epochs);
    s.read("temperature", c.grpo.temperature);
    s.read("flow_steps", c.grpo.flow_steps);
    s.read("flow_sigma", c.grpo.flow_sigma);
    s.read("task_mix", c.grpo.task_mix);
    s.read("max_caption_len", c.grpo.max_caption_len);
    s.read("max_grad_norm", c.grpo.max_grad_norm);
    s.read("lambda_sem", c.grpo.lambda_sem);
    s.read("lambda_ins", c.grpo.lambda_ins);
    s.read("lambda_kn", c.grpo.lambda_kn);
    s.read("alpha_dense", c.grpo.alpha_dense);
    s.read("lr", c.grpo.lr);
    s.read("weight_decay", c.grpo.weight_decay);
    s.read("steps", c.grpo.steps);
    s.read("batch_prompts", c.grpo.batch_prompts);
    s.read("warmup_steps", c.grpo.warmup_steps);
    s.finish();
  }
  {
    StrictReader s(top.section("eval"), "eval");
    s.read("seeds_per_prompt", c.eval.seeds_per_prompt);
    s.read("ablation_steps", c.eval.ablation_steps);
    s.finish();
  }
  top.finish();
  return c;
}

RunConfig parse_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail("cannot read config file: " + path);
  ordered_json j;
  try {
    j = ordered_json::parse(f);
  } catch (const std::exception& e) {
    fail("config file " + path + " is not valid JSON: " + e.what());
  }
  return parse_config_json(j);
}

nlohmann::ordered_json run_config_json(const RunConfig& c) {
  ordered_json j;
  j["preset"] = c.preset;
  j["seed"] = c.seed;
  j["data"] = ordered_json{{"n_per_category", c.data.n_per_category},
                           {"n_eval_per_category", c.data.n_eval_per_category}};
  j["model"] = ordered_json{{"d_model", c.model.d_model},
                            {"n_layers", c.model.n_layers},
                            {"n_heads", c.model.n_heads},
                            {"expert_hidden", c.model.expert_hidden},
                            {"router_mode", c.model.router_mode},
                            {"pretrain_steps", c.model.pretrain_steps},
                            {"pretrain_batch", c.model.pretrain_batch},
                            {"pretrain_lr", c.model.pretrain_lr},
                            {"lambda_vis", c.model.lambda_vis}};
  j["referee"] = ordered_json{{"steps", c.referee.steps},
                              {"batch", c.referee.batch},
                              {"lr", c.referee.lr},
                              {"target_accuracy", c.referee.target_accuracy},
                              {"dense_weight", c.referee.dense_weight}};
  j["grpo"] = ordered_json{{"group_size", c.grpo.group_size},
                           {"beta", c.grpo.beta},
                           {"eps_adv", c.grpo.eps_adv},
                           {"eps_clip", c.grpo.eps_clip},
                           {"inner_epochs", c.grpo.inner_epochs},
                           {"temperature", c.grpo.temperature},
                           {"flow_steps", c.grpo.flow_steps},
                           {"flow_sigma", c.grpo.flow_sigma},
                           {"task_mix", c.grpo.task_mix},
                           {"max_caption_len", c.grpo.max_caption_len},
                           {"max_grad_norm", c.grpo.max_grad_norm},
                           {"lambda_sem", c.grpo.lambda_sem},
                           {"lambda_ins", c.grpo.lambda_ins},
                           {"lambda_kn", c.grpo.lambda_kn},
                           {"alpha_dense", c.grpo.alpha_dense},
                           {"lr", c.grpo.lr},
                           {"weight_decay", c.grpo.weight_decay},
                           {"steps", c.grpo.steps},
                           {"batch_prompts", c.grpo.batch_prompts},
                           {"warmup_steps", c.grpo.warmup_steps}};
  j["eval"] = ordered_json{{"seeds_per_prompt", c.eval.seeds_per_prompt},
                           {"ablation_steps", c.eval.ablation_steps}};
  return j;
}

int env_thread_count() {
  const char* v = std::getenv("LVRPO_THREADS");
  if (!v) return 1;
  const int n = std::atoi(v);
  return n > 0 ? n : 1;
}

}  // namespace lvrpo
