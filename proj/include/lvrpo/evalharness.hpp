#pragma once

#include <array>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "lvrpo/grpo.hpp"

namespace lvrpo {

struct EvalReport {
  std::array<double, 6> category_rates{};  // the six compositional categories
  double overall = 0.0;                    // unweighted mean of the six
  double knowledge_rate = 0.0;             // mean r_kn over knowledge prompts
  double caption_accuracy = 0.0;           // exact constraint recovery on captions
  int n_prompts = 0;
  int seeds_per_prompt = 0;
  std::uint64_t seed = 0;
  std::string checkpoint_id;
};

nlohmann::ordered_json eval_report_json(const EvalReport& r);

// Generator under test: prompt record + seed -> latent.
using GeneratorFn = std::function<LatentImage(const DatasetRecord&, std::uint64_t)>;
// Optional captioner for the understanding-side accuracy column.
using CaptionFn = std::function<std::vector<int>(const DatasetRecord&, const LatentImage&)>;

EvalReport run_compositional_eval_fn(const Dataset& ds, const GeneratorFn& generate,
                                     const CaptionFn& caption, int seeds_per_prompt, std::uint64_t seed);

EvalReport run_compositional_eval(const Dataset& ds, const Policy& policy, const FlowSchedule& schedule,
                                  int seeds_per_prompt, std::uint64_t seed);

std::vector<int> greedy_caption(const Policy& policy, const LatentImage& latent, int max_len = 32);

struct AblationRun {
  std::string label;
  nlohmann::ordered_json config;
  EvalReport report;
  std::vector<StepMetrics> metrics;
  double mean_wall_ms_per_step = 0.0;
};

struct AblationReport {
  std::string axis;
  std::vector<AblationRun> runs;
  bool divergence_flag_trainable = false;  // reward-hacking axis only
  bool divergence_flag_frozen = false;
  std::uint64_t referee_checksum_before = 0;
  std::uint64_t referee_checksum_after = 0;
};

// Throws unless the two serialized configs differ in exactly the named leaf.
void assert_single_field_diff(const nlohmann::ordered_json& a, const nlohmann::ordered_json& b,
                              const std::string& field);

nlohmann::ordered_json align_options_json(const AlignOptions& o);

AblationReport group_size_ablation(const Dataset& ds, const Policy& pretrained, const Referee& referee,
                                   const AlignOptions& base, const std::vector<int>& group_sizes,
                                   long steps, std::uint64_t seed);

struct HackingOptions {
  long steps = 200;
  long eval_every = 25;
  long window = 50;
  double ins_drop = 0.05;
  float referee_lr = 1e-3f;
  int samples_per_step = 4;
  int eval_prompts = 48;
};

AblationReport reward_hacking_ablation(const Dataset& ds, const Policy& pretrained, const Referee& referee,
                                       const AlignOptions& base, const HackingOptions& opt,
                                       std::uint64_t seed);

AblationReport knowledge_ablation(const Dataset& ds, const Policy& pretrained, const Referee& referee,
                                  const AlignOptions& base, long steps, std::uint64_t seed);

// Max |dL/dtheta| over the reasoning expert of layer 0 when the loss reads
// only that layer's visual-token outputs.
double gradient_decoupling_probe(RouterMode mode, int n_layers, std::uint64_t seed = 0);

struct ReportBundle {
  std::string title;
  std::vector<std::pair<std::string, EvalReport>> evals;
  std::vector<std::pair<std::string, std::vector<std::pair<long, double>>>> series;
  nlohmann::ordered_json extra;
};

std::vector<std::pair<std::string, std::vector<std::pair<long, double>>>> reward_series(
    const std::vector<StepMetrics>& metrics);

void emit_report(const ReportBundle& bundle, const std::string& dir);

}  // namespace lvrpo
