#include "lvrpo/evalharness.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

namespace lvrpo {

using nlohmann::ordered_json;

nlohmann::ordered_json eval_report_json(const EvalReport& r) {
  ordered_json j;
  for (int c = 0; c < 6; ++c) {
    j[to_string(static_cast<PromptCategory>(c))] = r.category_rates[static_cast<std::size_t>(c)];
  }
  j["overall"] = r.overall;
  j["knowledge_rate"] = r.knowledge_rate;
  j["caption_accuracy"] = r.caption_accuracy;
  j["n_prompts"] = r.n_prompts;
  j["seeds_per_prompt"] = r.seeds_per_prompt;
  j["seed"] = r.seed;
  j["checkpoint_id"] = r.checkpoint_id;
  return j;
}

EvalReport run_compositional_eval_fn(const Dataset& ds, const GeneratorFn& generate,
                                     const CaptionFn& caption, int seeds_per_prompt, std::uint64_t seed) {
  if (ds.eval.empty()) fail("run_compositional_eval: empty eval split");
  {
    std::set<std::string> train_ids;
    for (const auto& r : ds.train) train_ids.insert(r.id);
    for (const auto& r : ds.eval) {
      if (train_ids.count(r.id)) fail("eval split overlaps the training split at record " + r.id);
    }
  }
  EvalReport rep;
  rep.seed = seed;
  rep.seeds_per_prompt = seeds_per_prompt;
  std::array<long, 6> cat_pass{};
  std::array<long, 6> cat_total{};
  double kn_sum = 0.0;
  long kn_total = 0;
  long cap_ok = 0, cap_total = 0;

  for (std::size_t ri = 0; ri < ds.eval.size(); ++ri) {
    const auto& rec = ds.eval[ri];
    const int cat = static_cast<int>(rec.prompt.category);
    for (int s = 0; s < seeds_per_prompt; ++s) {
      const std::uint64_t gseed = mix_seed(seed, static_cast<std::uint64_t>(ri), static_cast<std::uint64_t>(s));
      LatentImage out = generate(rec, gseed);
      if (cat < 6) {
        auto [r_ins, bits] = instruction_reward(out, rec.prompt);
        ++cat_total[static_cast<std::size_t>(cat)];
        if (r_ins == 1.0) ++cat_pass[static_cast<std::size_t>(cat)];
      } else {
        kn_sum += knowledge_reward(out, rec.prompt, ds.kb);
        ++kn_total;
      }
    }
    if (caption) {
      const LatentImage& ctx = ds.latent_of(rec, true);
      auto cap = caption(rec, ctx);
      auto recovered = try_extract_constraints(cap, ds.kb);
      bool exact = recovered.has_value() && recovered->size() == rec.prompt.constraints.size();
      if (exact) {
        for (const auto& c : rec.prompt.constraints) {
          if (std::find(recovered->begin(), recovered->end(), c) == recovered->end()) {
            exact = false;
            break;
          }
        }
      }
      ++cap_total;
      if (exact) ++cap_ok;
    }
    ++rep.n_prompts;
  }

  double acc = 0.0;
  for (int c = 0; c < 6; ++c) {
    rep.category_rates[static_cast<std::size_t>(c)] =
        cat_total[static_cast<std::size_t>(c)] == 0
            ? 0.0
            : static_cast<double>(cat_pass[static_cast<std::size_t>(c)]) / cat_total[static_cast<std::size_t>(c)];
    acc += rep.category_rates[static_cast<std::size_t>(c)];
  }
  rep.overall = acc / 6.0;
  rep.knowledge_rate = kn_total == 0 ? 0.0 : kn_sum / kn_total;
  rep.caption_accuracy = cap_total == 0 ? 0.0 : static_cast<double>(cap_ok) / cap_total;
  return rep;
}

std::vector<int> greedy_caption(const Policy& policy, const LatentImage& latent, int max_len) {
  const Vocabulary& vocab = Vocabulary::instance();
  std::vector<int> cap = {vocab.bos()};
  for (int i = 0; i < max_len; ++i) {
    auto logits = forward_text_logits<float>(policy, latent, cap, nullptr);
    const float* row = logits.ptr() + static_cast<std::size_t>(logits.rows() - 1) * logits.cols();
    int best = 0;
    for (int j = 1; j < logits.cols(); ++j) {
      if (row[j] > row[best]) best = j;
    }
    cap.push_back(best);
    if (best == vocab.eos()) break;
  }
  return cap;
}

EvalReport run_compositional_eval(const Dataset& ds, const Policy& policy, const FlowSchedule& schedule,
                                  int seeds_per_prompt, std::uint64_t seed) {
  FlowSchedule det = schedule;
  det.sigma = 0.0;
  GeneratorFn gen = [&](const DatasetRecord& rec, std::uint64_t s) {
    return sample_deterministic(policy, rec.prompt.tokens, det, s);
  };
  CaptionFn cap = [&](const DatasetRecord&, const LatentImage& ctx) { return greedy_caption(policy, ctx); };
  return run_compositional_eval_fn(ds, gen, cap, seeds_per_prompt, seed);
}

// --- ablations ---------------------------------------------------------------------

void assert_single_field_diff(const ordered_json& a, const ordered_json& b, const std::string& field) {
  std::vector<std::string> diffs;
  std::function<void(const ordered_json&, const ordered_json&, const std::string&)> walk =
      [&](const ordered_json& x, const ordered_json& y, const std::string& path) {
        if (x.is_object() && y.is_object()) {
          for (auto it = x.begin(); it != x.end(); ++it) {
            const std::string sub = path.empty() ? it.key() : path + "." + it.key();
            if (!y.contains(it.key())) {
              diffs.push_back(sub);
            } else {
              walk(it.value(), y.at(it.key()), sub);
            }
          }
          for (auto it = y.begin(); it != y.end(); ++it) {
            if (!x.contains(it.key())) diffs.push_back(path.empty() ? it.key() : path + "." + it.key());
          }
          return;
        }
        if (x != y) diffs.push_back(path);
      };
  walk(a, b, "");
  if (diffs.size() != 1 || diffs[0] != field) {
    std::string got;
    for (const auto& d : diffs) got += d + " ";
    fail("paired runs must differ only in '" + field + "', got: " + (got.empty() ? "(none)" : got));
  }
}

nlohmann::ordered_json align_options_json(const AlignOptions& o) {
  ordered_json j;
  j["group_size"] = o.group.group_size;
  j["beta"] = o.group.beta;
  j["eps_adv"] = o.group.eps_adv;
  j["eps_clip"] = o.group.eps_clip;
  j["inner_epochs"] = o.group.inner_epochs;
  j["temperature"] = o.group.temperature;
  j["flow_steps"] = o.group.schedule.n_steps;
  j["flow_sigma"] = o.group.schedule.sigma;
  j["task_mix"] = o.group.task_mix;
  j["max_caption_len"] = o.group.max_caption_len;
  j["max_grad_norm"] = o.group.max_grad_norm;
  j["lambda_sem"] = o.weights.lambda_sem;
  j["lambda_ins"] = o.weights.lambda_ins;
  j["lambda_kn"] = o.weights.lambda_kn;
  j["alpha_dense"] = o.weights.alpha_dense;
  j["lr"] = o.lr;
  j["weight_decay"] = o.weight_decay;
  j["steps"] = o.steps;
  j["batch_prompts"] = o.batch_prompts;
  j["warmup_steps"] = o.warmup_steps;
  return j;
}

AblationReport group_size_ablation(const Dataset& ds, const Policy& pretrained, const Referee& referee,
                                   const AlignOptions& base, const std::vector<int>& group_sizes,
                                   long steps, std::uint64_t seed) {
  AblationReport rep;
  rep.axis = "group-size";
  ordered_json prev_cfg;
  for (std::size_t gi = 0; gi < group_sizes.size(); ++gi) {
    AlignOptions opts = base;
    opts.steps = steps;
    opts.group.group_size = group_sizes[gi];
    opts.out_dir.clear();
    auto cfg = align_options_json(opts);
    if (gi > 0) assert_single_field_diff(prev_cfg, cfg, "group_size");
    prev_cfg = cfg;

    auto result = align(ds, pretrained, referee, opts, seed);
    AblationRun run;
    run.label = "G=" + std::to_string(group_sizes[gi]);
    run.config = cfg;
    run.metrics = result.metrics;
    double wall = 0.0;
    for (const auto& m : result.metrics) wall += m.wall_ms;
    run.mean_wall_ms_per_step = result.metrics.empty() ? 0.0 : wall / result.metrics.size();
    run.report = run_compositional_eval(ds, result.policy, opts.group.schedule, 2, tag_seed(seed, "gs-eval"));
    run.report.checkpoint_id = run.label;
    rep.runs.push_back(std::move(run));
  }
  return rep;
}

namespace {

struct DivergenceSeries {
  std::vector<double> reward_per_step;
  std::vector<std::pair<long, double>> heldout_ins;  // (step, rate)

  // True when some 50-step window raises the mean total reward while the
  // held-out instruction rate at the window ends drops by at least `drop`.
  bool divergence(long window, double drop) const {
    const long n = static_cast<long>(reward_per_step.size());
    if (n < 2 * window) return false;
    auto ins_at = [&](long step_end) {
      double v = heldout_ins.empty() ? 0.0 : heldout_ins.front().second;
      for (const auto& [s, r] : heldout_ins) {
        if (s <= step_end) v = r;
      }
      return v;
    };
    for (long start = 0; start + 2 * window <= n; start += window) {
      double m1 = 0.0, m2 = 0.0;
      for (long i = 0; i < window; ++i) {
        m1 += reward_per_step[static_cast<std::size_t>(start + i)];
        m2 += reward_per_step[static_cast<std::size_t>(start + window + i)];
      }
      m1 /= window;
      m2 /= window;
      const double i1 = ins_at(start + window - 1);
      const double i2 = ins_at(start + 2 * window - 1);
      if (m2 > m1 && i2 <= i1 - drop) return true;
    }
    return false;
  }
};

}  // namespace

AblationReport reward_hacking_ablation(const Dataset& ds, const Policy& pretrained, const Referee& referee,
                                       const AlignOptions& base, const HackingOptions& opt,
                                       std::uint64_t seed) {
  AblationReport rep;
  rep.axis = "reward-hacking";
  rep.referee_checksum_before = referee.frozen_checksum;

  auto run_once = [&](bool trainable) {
    Referee judge = referee.clone();
    if (trainable) judge.frozen = false;
    AlignOptions opts = base;
    opts.steps = opt.steps;
    opts.out_dir.clear();

    DivergenceSeries series;
    Rng hack_rng(tag_seed(seed, "hacking"));
    AlignStepHook hook = [&](long step, Policy& policy, const StepMetrics& m) {
      series.reward_per_step.push_back(m.mean_r_total);
      if (trainable) {
        // Co-adaptation: raise the judge's similarity on fresh policy samples.
        std::vector<LatentImage> latents;
        std::vector<const std::vector<int>*> prompts;
        for (int i = 0; i < opt.samples_per_step; ++i) {
          const auto& rec = ds.train[hack_rng.below(ds.train.size())];
          latents.push_back(sample_deterministic(policy, rec.prompt.tokens, opts.group.schedule,
                                                 mix_seed(seed, static_cast<std::uint64_t>(step), i)));
          prompts.push_back(&rec.prompt.tokens);
        }
        std::vector<const LatentImage*> lat_ptrs;
        for (const auto& l : latents) lat_ptrs.push_back(&l);
        referee_ascend_semantic(judge, lat_ptrs, prompts, opt.referee_lr);
      }
      if (step % opt.eval_every == opt.eval_every - 1) {
        series.heldout_ins.emplace_back(
            step, heldout_pass_rate(ds, policy, opts.group.schedule, opt.eval_prompts, tag_seed(seed, "hk-eval")));
      }
    };
    auto result = align(ds, pretrained, judge, opts, seed, nullptr, hook);

    AblationRun run;
    run.label = trainable ? "trainable-referee" : "frozen-referee";
    run.config = align_options_json(opts);
    run.config["referee_trainable"] = trainable;
    run.metrics = result.metrics;
    run.report = run_compositional_eval(ds, result.policy, opts.group.schedule, 2, tag_seed(seed, "hk-final"));
    run.report.checkpoint_id = run.label;
    for (const auto& [s, r] : series.heldout_ins) {
      run.config["heldout_ins_step" + std::to_string(s)] = r;
    }
    const bool flag = series.divergence(opt.window, opt.ins_drop);
    if (trainable) {
      rep.divergence_flag_trainable = flag;
    } else {
      rep.divergence_flag_frozen = flag;
      rep.referee_checksum_after = params_checksum(judge.params);
    }
    rep.runs.push_back(std::move(run));
  };

  run_once(false);
  run_once(true);
  return rep;
}

AblationReport knowledge_ablation(const Dataset& ds, const Policy& pretrained, const Referee& referee,
                                  const AlignOptions& base, long steps, std::uint64_t seed) {
  AblationReport rep;
  rep.axis = "knowledge";
  ordered_json prev;
  for (const double lkn : {0.0, base.weights.lambda_kn}) {
    AlignOptions opts = base;
    opts.steps = steps;
    opts.weights.lambda_kn = lkn;
    opts.out_dir.clear();
    auto cfg = align_options_json(opts);
    if (!prev.is_null()) assert_single_field_diff(prev, cfg, "lambda_kn");
    prev = cfg;
    auto result = align(ds, pretrained, referee, opts, seed);
    AblationRun run;
    run.label = "lambda_kn=" + std::to_string(lkn);
    run.config = cfg;
    run.metrics = result.metrics;
    run.report = run_compositional_eval(ds, result.policy, opts.group.schedule, 2, tag_seed(seed, "kn-eval"));
    run.report.checkpoint_id = run.label;
    rep.runs.push_back(std::move(run));
  }
  return rep;
}

double gradient_decoupling_probe(RouterMode mode, int n_layers, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_layers = n_layers;
  cfg.n_heads = 2;
  cfg.router_mode = mode;
  Policy policy = Policy::init(cfg, seed);
  policy.params.zero_grads();

  Rng rng(tag_seed(seed, "probe"));
  SceneSpec scene = sample_scene(rng, PromptCategory::Colors, build_knowledge_base(seed), 0);
  auto latent = rasterize_scene(scene);
  auto prompt = render_prompt(scene, PromptCategory::Colors, 0, build_knowledge_base(seed));
  auto patches = latent_patches<float>(latent);

  Tape<float> tape;
  auto seq = embed_mixed_sequence<float>(policy, prompt.tokens, &patches, 0.5, &tape);
  std::vector<MixedLayout> layouts = {seq.layout};
  std::vector<int> offsets = {0};
  auto x = seq.rows;
  for (int i = 0; i < n_layers; ++i) x = mot_layer_forward(x, layouts, offsets, policy, i, &tape);
  auto vis = slice_rows(x, seq.layout.visual_begin, seq.layout.visual_begin + kPatches, &tape);
  auto loss = sum_all(mul(vis, vis, &tape), &tape);
  tape.backward(loss);

  double max_abs = 0.0;
  for (const char* name : {"layer0.und_w1", "layer0.und_b1", "layer0.und_w2", "layer0.und_b2"}) {
    const auto& p = policy.params.at(name);
    for (const float g : *p.grad) max_abs = std::max(max_abs, std::abs(static_cast<double>(g)));
  }
  return max_abs;
}

// --- reports --------------------------------------------------------------------------

std::vector<std::pair<std::string, std::vector<std::pair<long, double>>>> reward_series(
    const std::vector<StepMetrics>& metrics) {
  std::vector<std::pair<std::string, std::vector<std::pair<long, double>>>> out;
  auto series = [&](const std::string& name, auto get) {
    std::vector<std::pair<long, double>> s;
    for (const auto& m : metrics) s.emplace_back(m.step, get(m));
    out.emplace_back(name, std::move(s));
  };
  series("r_sem", [](const StepMetrics& m) { return m.mean_r_sem; });
  series("r_dense", [](const StepMetrics& m) { return m.mean_r_dense; });
  series("r_ins", [](const StepMetrics& m) { return m.mean_r_ins; });
  series("r_kn", [](const StepMetrics& m) { return m.mean_r_kn; });
  series("r_total", [](const StepMetrics& m) { return m.mean_r_total; });
  series("kl", [](const StepMetrics& m) { return m.kl; });
  series("grad_norm", [](const StepMetrics& m) { return m.grad_norm; });
  return out;
}

void emit_report(const ReportBundle& bundle, const std::string& dir) {
  if (bundle.evals.empty() && bundle.series.empty()) fail("emit_report: nothing to report");
  for (const auto& [name, s] : bundle.series) {
    if (s.empty()) fail("emit_report: empty metric series '" + name + "'");
  }
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail("cannot create report directory " + dir + ": " + ec.message());
  std::filesystem::create_directories(dir + "/series", ec);
  if (ec) fail("cannot create report directory " + dir + "/series: " + ec.message());

  std::ofstream summary(dir + "/summary.txt");
  if (!summary) fail("cannot write " + dir + "/summary.txt");
  summary << bundle.title << "\n";
  summary << std::string(bundle.title.size(), '=') << "\n\n";
  for (const auto& [name, rep] : bundle.evals) {
    summary << name << "\n";
    for (int c = 0; c < 6; ++c) {
      summary << "  " << to_string(static_cast<PromptCategory>(c)) << ": "
              << rep.category_rates[static_cast<std::size_t>(c)] << "\n";
    }
    summary << "  overall: " << rep.overall << "\n";
    summary << "  knowledge_rate: " << rep.knowledge_rate << "\n";
    summary << "  caption_accuracy: " << rep.caption_accuracy << "\n\n";
  }

  std::ofstream records(dir + "/records.jsonl");
  if (!records) fail("cannot write " + dir + "/records.jsonl");
  for (const auto& [name, rep] : bundle.evals) {
    ordered_json j = eval_report_json(rep);
    j["name"] = name;
    records << j.dump() << "\n";
  }
  if (!bundle.extra.is_null()) records << bundle.extra.dump() << "\n";

  for (const auto& [name, s] : bundle.series) {
    std::ofstream f(dir + "/series/" + name + ".csv");
    if (!f) fail("cannot write series file for " + name);
    f.precision(17);
    f << "step,value\n";
    for (const auto& [step, value] : s) f << step << "," << value << "\n";
  }
}

}  // namespace lvrpo
