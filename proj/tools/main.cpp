#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "lvrpo/checkpoint.hpp"
#include "lvrpo/config.hpp"
#include "lvrpo/evalharness.hpp"
#include "lvrpo/grpo.hpp"
#include "lvrpo/pretrain.hpp"

namespace fs = std::filesystem;
using namespace lvrpo;
using nlohmann::ordered_json;

namespace {

void require_artifact(const std::string& path, const std::string& what) {
  if (!fs::exists(path)) fail("missing prerequisite " + what + ": " + path);
}

RunConfig load_run_config(const std::string& config_path, const std::string& preset) {
  RunConfig cfg = config_path.empty() ? make_preset(preset.empty() ? "desk" : preset)
                                      : parse_config_file(config_path);
  if (!preset.empty() && config_path.empty()) cfg.preset = preset;
  return cfg;
}

void write_provenance(const RunConfig& cfg, const std::string& dir) {
  std::ofstream f(dir + "/config.json");
  if (!f) fail("cannot write " + dir + "/config.json");
  f << run_config_json(cfg).dump(2) << "\n";
}

int cmd_gen_data(const RunConfig& cfg, const std::string& out) {
  auto ds = build_dataset(cfg.seed, cfg.data.n_per_category, cfg.data.n_eval_per_category);
  write_dataset(ds, out);
  write_provenance(cfg, out);
  std::printf("dataset: %zu train / %zu eval records -> %s\n", ds.train.size(), ds.eval.size(), out.c_str());
  return 0;
}

int cmd_pretrain_referee(const RunConfig& cfg, const std::string& data, const std::string& out) {
  require_artifact(data + "/manifest.json", "dataset");
  auto ds = load_dataset(data);
  Referee r = pretrain_referee(ds, cfg.referee_options(), cfg.seed);
  save_referee_checkpoint(r, cfg.referee.steps, out, run_config_json(cfg));
  const double acc = referee_retrieval_accuracy(r, ds, cfg.referee.batch, cfg.seed);
  std::printf("referee frozen at retrieval accuracy %.4f, checksum %016llx -> %s\n", acc,
              static_cast<unsigned long long>(r.frozen_checksum), out.c_str());
  return 0;
}

int cmd_pretrain_policy(const RunConfig& cfg, const std::string& data, const std::string& out) {
  require_artifact(data + "/manifest.json", "dataset");
  auto ds = load_dataset(data);
  MetricsWriter writer(out + ".metrics.jsonl", out + ".timings.jsonl");
  Policy policy = pretrain_policy(ds, cfg.model_config(), cfg.pretrain_options(), cfg.seed, &writer);
  save_policy_checkpoint(policy, "policy", cfg.model.pretrain_steps, out, run_config_json(cfg));
  std::printf("pretrained policy (%ld steps) -> %s\n", cfg.model.pretrain_steps, out.c_str());
  return 0;
}

int cmd_align(const RunConfig& cfg, const std::string& policy_path, const std::string& referee_path,
              const std::string& data, const std::string& out) {
  require_artifact(policy_path, "policy checkpoint");
  require_artifact(referee_path, "referee checkpoint");
  require_artifact(data + "/manifest.json", "dataset");
  auto ds = load_dataset(data);
  Policy pretrained = load_policy_checkpoint(policy_path);
  Referee referee = load_referee_checkpoint(referee_path);

  fs::create_directories(out);
  write_provenance(cfg, out);
  AlignOptions opts = cfg.align_options();
  opts.out_dir = out;
  opts.provenance = run_config_json(cfg);
  MetricsWriter writer(out + "/metrics.jsonl", out + "/timings.jsonl");
  auto result = align(ds, pretrained, referee, opts, cfg.seed, &writer);
  if (!referee_checksum_valid(referee)) fail("referee changed during alignment");
  std::printf("aligned %ld steps; held-out pass rate %.4f; reference checksum %s -> %s\n", opts.steps,
              result.final_heldout_pass_rate,
              result.reference_checksum_before == result.reference_checksum_after ? "stable" : "CHANGED",
              out.c_str());
  return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint, const std::string& data,
             const std::string& out) {
  require_artifact(checkpoint, "policy checkpoint");
  require_artifact(data + "/manifest.json", "dataset");
  auto ds = load_dataset(data);
  Policy policy = load_policy_checkpoint(checkpoint);
  FlowSchedule sched;
  sched.n_steps = cfg.grpo.flow_steps;
  sched.sigma = cfg.grpo.flow_sigma;
  auto report = run_compositional_eval(ds, policy, sched, cfg.eval.seeds_per_prompt, cfg.seed);
  report.checkpoint_id = checkpoint;

  ReportBundle bundle;
  bundle.title = "compositional evaluation";
  bundle.evals.emplace_back("checkpoint", report);
  std::vector<std::pair<long, double>> overall = {{0, report.overall}};
  bundle.series.emplace_back("overall", overall);
  emit_report(bundle, out);
  write_provenance(cfg, out);
  std::printf("eval overall=%.4f knowledge=%.4f captions=%.4f -> %s\n", report.overall,
              report.knowledge_rate, report.caption_accuracy, out.c_str());
  return 0;
}

int cmd_ablate(const RunConfig& cfg, const std::string& axis, const std::string& policy_path,
               const std::string& referee_path, const std::string& data, const std::string& out) {
  require_artifact(policy_path, "policy checkpoint");
  require_artifact(referee_path, "referee checkpoint");
  require_artifact(data + "/manifest.json", "dataset");
  auto ds = load_dataset(data);
  Policy pretrained = load_policy_checkpoint(policy_path);
  Referee referee = load_referee_checkpoint(referee_path);
  AlignOptions base = cfg.align_options();
  const long steps = cfg.eval.ablation_steps;

  AblationReport rep;
  if (axis == "group-size") {
    rep = group_size_ablation(ds, pretrained, referee, base, {2, 4, 8, 16}, steps, cfg.seed);
  } else if (axis == "reward-hacking") {
    HackingOptions hopt;
    hopt.steps = steps;
    rep = reward_hacking_ablation(ds, pretrained, referee, base, hopt, cfg.seed);
  } else if (axis == "knowledge") {
    rep = knowledge_ablation(ds, pretrained, referee, base, steps, cfg.seed);
  } else {
    fail("unknown ablation axis '" + axis + "' (group-size, reward-hacking, knowledge)");
  }

  ReportBundle bundle;
  bundle.title = "ablation: " + rep.axis;
  ordered_json extra;
  extra["axis"] = rep.axis;
  for (const auto& run : rep.runs) {
    bundle.evals.emplace_back(run.label, run.report);
    auto series = reward_series(run.metrics);
    for (auto& [name, s] : series) bundle.series.emplace_back(run.label + "." + name, std::move(s));
    extra["wall_ms_per_step"][run.label] = run.mean_wall_ms_per_step;
  }
  if (rep.axis == "reward-hacking") {
    extra["divergence_flag_trainable"] = rep.divergence_flag_trainable;
    extra["divergence_flag_frozen"] = rep.divergence_flag_frozen;
    extra["referee_checksum_stable"] = rep.referee_checksum_before == rep.referee_checksum_after;
  }
  bundle.extra = extra;
  emit_report(bundle, out);
  write_provenance(cfg, out);
  std::printf("ablation '%s' (%zu runs) -> %s\n", rep.axis.c_str(), rep.runs.size(), out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"behavioral alignment pipeline for a synthetic multimodal world"};
  app.require_subcommand(1);

  std::string config_path, preset, out, data, policy_path, referee_path, checkpoint, axis;
  std::uint64_t seed_flag = 0;
  bool seed_set = false;
  long steps_flag = -1;
  int n_per_category = -1, seeds_per_prompt = -1;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON config file");
    cmd->add_option("--seed", seed_flag, "run seed")->each([&](const std::string&) { seed_set = true; });
  };

  auto* gen = app.add_subcommand("gen-data", "build the synthetic dataset");
  add_common(gen);
  gen->add_option("--n-per-category", n_per_category, "training records per category");
  gen->add_option("--out", out, "output directory")->required();

  auto* pref = app.add_subcommand("pretrain-referee", "contrastive-pretrain and freeze the referee");
  add_common(pref);
  pref->add_option("--data", data, "dataset directory")->required();
  pref->add_option("--steps", steps_flag, "training steps");
  pref->add_option("--out", out, "output checkpoint path")->required();

  auto* ppol = app.add_subcommand("pretrain-policy", "supervised pretraining of the unified policy");
  add_common(ppol);
  ppol->add_option("--data", data, "dataset directory")->required();
  ppol->add_option("--steps", steps_flag, "training steps");
  ppol->add_option("--out", out, "output checkpoint path")->required();

  auto* al = app.add_subcommand("align", "group-relative alignment of a pretrained policy");
  add_common(al);
  al->add_option("--policy", policy_path, "pretrained policy checkpoint")->required();
  al->add_option("--referee", referee_path, "frozen referee checkpoint")->required();
  al->add_option("--data", data, "dataset directory")->required();
  al->add_option("--preset", preset, "desk or paper");
  al->add_option("--steps", steps_flag, "alignment steps");
  al->add_option("--out", out, "output directory")->required();

  auto* ev = app.add_subcommand("eval", "compositional + knowledge + caption evaluation");
  add_common(ev);
  ev->add_option("--checkpoint", checkpoint, "policy checkpoint")->required();
  ev->add_option("--data", data, "dataset directory")->required();
  ev->add_option("--seeds-per-prompt", seeds_per_prompt, "samples per prompt");
  ev->add_option("--out", out, "report directory")->required();

  auto* ab = app.add_subcommand("ablate", "run one ablation axis");
  add_common(ab);
  ab->add_option("--axis", axis, "group-size | reward-hacking | knowledge")->required();
  ab->add_option("--policy", policy_path, "pretrained policy checkpoint")->required();
  ab->add_option("--referee", referee_path, "frozen referee checkpoint")->required();
  ab->add_option("--data", data, "dataset directory")->required();
  ab->add_option("--steps", steps_flag, "steps per ablation run");
  ab->add_option("--out", out, "report directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    RunConfig cfg = load_run_config(config_path, preset);
    if (seed_set) cfg.seed = seed_flag;
    if (n_per_category > 0) cfg.data.n_per_category = n_per_category;
    if (seeds_per_prompt > 0) cfg.eval.seeds_per_prompt = seeds_per_prompt;
    if (steps_flag >= 0) {
      if (pref->parsed()) cfg.referee.steps = steps_flag;
      if (ppol->parsed()) cfg.model.pretrain_steps = steps_flag;
      if (al->parsed()) cfg.grpo.steps = steps_flag;
      if (ab->parsed()) cfg.eval.ablation_steps = steps_flag;
    }

    if (gen->parsed()) return cmd_gen_data(cfg, out);
    if (pref->parsed()) return cmd_pretrain_referee(cfg, data, out);
    if (ppol->parsed()) return cmd_pretrain_policy(cfg, data, out);
    if (al->parsed()) return cmd_align(cfg, policy_path, referee_path, data, out);
    if (ev->parsed()) return cmd_eval(cfg, checkpoint, data, out);
    if (ab->parsed()) return cmd_ablate(cfg, axis, policy_path, referee_path, data, out);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
