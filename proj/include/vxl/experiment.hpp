#pragma once

// End-to-end desk experiments shared by the CLI and the acceptance suite:
// needle datasets, two-stage training, grid evaluation, and the
// curriculum-vs-fixed and dynamic-vs-fixed comparisons.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vxl/curriculum.hpp"
#include "vxl/harness.hpp"
#include "vxl/model.hpp"

namespace vxl {

struct NeedleTaskConfig {
  std::size_t min_frames = 8;
  std::size_t max_frames = 128;
  std::size_t tokens_per_frame = 4;
  std::size_t embed_dim = 16;
  std::size_t vocab_size = 512;
  bool two_scene = false;
  std::uint64_t seed = 0;
  std::size_t size = 1 << 20;  // index space of the lazy dataset
};

inline void to_json(nlohmann::json& j, const NeedleTaskConfig& c) {
  j = nlohmann::json{{"min_frames", c.min_frames}, {"max_frames", c.max_frames}, {"tokens_per_frame", c.tokens_per_frame},
                     {"embed_dim", c.embed_dim},   {"vocab_size", c.vocab_size}, {"two_scene", c.two_scene},
                     {"seed", c.seed},             {"size", c.size}};
}

inline void from_json(const nlohmann::json& j, NeedleTaskConfig& c) {
  const NeedleTaskConfig d;
  c.min_frames = j.value("min_frames", d.min_frames);
  c.max_frames = j.value("max_frames", d.max_frames);
  c.tokens_per_frame = j.value("tokens_per_frame", d.tokens_per_frame);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.two_scene = j.value("two_scene", d.two_scene);
  c.seed = j.value("seed", d.seed);
  c.size = j.value("size", d.size);
  require(c.min_frames >= 1 && c.min_frames <= c.max_frames, "NeedleTaskConfig: need 1 <= min_frames <= max_frames");
}

inline NeedleSpec needle_spec_for(const NeedleTaskConfig& c, std::size_t frames, double depth) {
  NeedleSpec s;
  s.haystack_frames = frames;
  s.needle_depth = depth;
  s.tokens_per_frame = c.tokens_per_frame;
  s.embed_dim = c.embed_dim;
  s.vocab_size = c.vocab_size;
  s.two_scene = c.two_scene;
  return s;
}

// Item i: length uniform in [min_frames, max_frames], depth uniform in [0, 1].
inline TaskDataset needle_dataset(const NeedleTaskConfig& c) {
  return {c.size, [c](std::size_t i) -> TaskItem {
            Rng rng = Rng::derive(c.seed, i);
            const std::size_t frames = c.min_frames + rng.uniform_int(c.max_frames - c.min_frames + 1);
            const double depth = rng.uniform();
            return gen_needle(needle_spec_for(c, frames, depth), rng);
          }};
}

// Everything needed to reproduce a two-stage desk run.
struct ExperimentConfig {
  ModelConfig model;
  double init_std = 0.02;
  NeedleTaskConfig pretrain_task = [] {
    NeedleTaskConfig t;
    t.min_frames = 4;
    t.max_frames = 32;
    t.seed = 1;
    return t;
  }();
  TrainConfig pretrain = [] {
    TrainConfig t;
    t.total_steps = 800;
    t.batch_size = 4;
    t.scope = Scope::all;
    t.seed = 2;
    return t;
  }();
  NeedleTaskConfig task = [] {
    NeedleTaskConfig t;
    t.seed = 3;
    return t;
  }();
  TrainConfig train = [] {
    TrainConfig t;
    t.total_steps = 1000;
    t.batch_size = 4;
    t.seed = 4;
    return t;
  }();
  // The first warmup_steps summary-training steps draw haystacks of
  // warmup_min_frames..warmup_max_frames frames.
  std::size_t warmup_steps = 300, warmup_min_frames = 2, warmup_max_frames = 16;
  std::optional<CurriculumSchedule> schedule;  // unset: the standard schedule over train.total_steps
  PartitionPolicy partition;
  std::size_t eval_ratio = 8;
  std::vector<std::size_t> eval_lengths{32, 64, 128, 256};
  std::vector<double> eval_depths{0.0, 0.25, 0.5, 0.75, 1.0};
  std::size_t eval_trials = 20;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;

  CurriculumSchedule effective_schedule() const {
    return schedule ? *schedule : CurriculumSchedule::standard(train.total_steps);
  }

  EvalConfig eval_config(std::size_t ratio) const {
    EvalConfig e;
    e.partition = partition;
    e.ratio = ratio;
    e.needle = needle_spec_for(task, 1, 0.0);
    e.seed = seed ^ 0xe7a1ULL;
    e.jobs = jobs;
    return e;
  }

  // Replaces every sub-seed with one derived from `s`.
  void reseed(std::uint64_t s) {
    seed = s;
    pretrain_task.seed = Rng::derive(s, 1).next_u64();
    pretrain.seed = Rng::derive(s, 2).next_u64();
    task.seed = Rng::derive(s, 3).next_u64();
    train.seed = Rng::derive(s, 4).next_u64();
  }
};

inline void to_json(nlohmann::json& j, const PartitionPolicy& p) {
  j = nlohmann::json{{"mode", p.mode == PartitionMode::dynamic ? "dynamic" : "fixed"},
                     {"config", p.config},
                     {"fixed_interval_tokens", p.fixed_interval_tokens}};
}

inline void from_json(const nlohmann::json& j, PartitionPolicy& p) {
  const std::string mode = j.value("mode", std::string("dynamic"));
  if (mode != "dynamic" && mode != "fixed") fail_input("partition mode must be 'dynamic' or 'fixed', got '" + mode + "'");
  p.mode = mode == "dynamic" ? PartitionMode::dynamic : PartitionMode::fixed;
  if (j.contains("config")) p.config = j["config"].get<PartitionConfig>();
  p.fixed_interval_tokens = j.value("fixed_interval_tokens", p.fixed_interval_tokens);
}

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json{{"model", c.model},
                     {"init_std", c.init_std},
                     {"pretrain_task", c.pretrain_task},
                     {"pretrain", c.pretrain},
                     {"task", c.task},
                     {"train", c.train},
                     {"warmup_steps", c.warmup_steps},
                     {"warmup_min_frames", c.warmup_min_frames},
                     {"warmup_max_frames", c.warmup_max_frames},
                     {"schedule", c.effective_schedule()},
                     {"partition", c.partition},
                     {"eval_ratio", c.eval_ratio},
                     {"eval_lengths", c.eval_lengths},
                     {"eval_depths", c.eval_depths},
                     {"eval_trials", c.eval_trials},
                     {"seed", c.seed},
                     {"jobs", c.jobs}};
}

// Missing keys keep their defaults.
inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  if (j.contains("model")) c.model = j["model"].get<ModelConfig>();
  c.init_std = j.value("init_std", c.init_std);
  if (j.contains("pretrain_task")) c.pretrain_task = j["pretrain_task"].get<NeedleTaskConfig>();
  if (j.contains("pretrain")) c.pretrain = j["pretrain"].get<TrainConfig>();
  if (j.contains("task")) c.task = j["task"].get<NeedleTaskConfig>();
  if (j.contains("train")) c.train = j["train"].get<TrainConfig>();
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.warmup_min_frames = j.value("warmup_min_frames", c.warmup_min_frames);
  c.warmup_max_frames = j.value("warmup_max_frames", c.warmup_max_frames);
  if (c.warmup_steps > 0 && (c.warmup_min_frames == 0 || c.warmup_min_frames > c.warmup_max_frames))
    fail_input("warmup frame range [" + std::to_string(c.warmup_min_frames) + ", " +
               std::to_string(c.warmup_max_frames) + "] is empty");
  if (j.contains("schedule")) c.schedule = j["schedule"].get<CurriculumSchedule>();
  if (j.contains("partition")) c.partition = j["partition"].get<PartitionPolicy>();
  c.eval_ratio = j.value("eval_ratio", c.eval_ratio);
  c.eval_lengths = j.value("eval_lengths", c.eval_lengths);
  c.eval_depths = j.value("eval_depths", c.eval_depths);
  c.eval_trials = j.value("eval_trials", c.eval_trials);
  c.seed = j.value("seed", c.seed);
  c.jobs = j.value("jobs", c.jobs);
}

template <class T>
TrainState<T> initial_state(const ExperimentConfig& c) {
  c.model.validate();
  Rng rng = Rng::derive(c.seed, 0);
  TrainState<T> s{Params<T>::init(c.model, rng, c.init_std), {}};
  s.vst = VstParams<T>::init(s.base, rng);
  return s;
}

// Stage 1: full-attention pretraining of the base on short haystacks.
template <class T>
TrainResult<T> pretrain_stage(const ExperimentConfig& c, TrainState<T> s, const StepHook& hook = {}) {
  return pretrain_base(needle_dataset(c.pretrain_task), c.pretrain, std::move(s), hook);
}

// Stage 2: summary-token training under the ratio schedule. Summary
// projections restart from the (pretrained) base weights.
template <class T>
TrainResult<T> summary_stage(const ExperimentConfig& c, TrainState<T> s, const CurriculumSchedule& schedule,
                             const StepHook& hook = {}) {
  Rng rng = Rng::derive(c.train.seed, 0x757);
  s.vst = VstParams<T>::init(s.base, rng);
  NeedleTaskConfig short_task = c.task;
  short_task.min_frames = c.warmup_min_frames;
  short_task.max_frames = c.warmup_max_frames;
  const TaskDataset full = needle_dataset(c.task);
  const TaskDataset warm = c.warmup_steps > 0 ? needle_dataset(short_task) : full;
  return run_training_with([&](std::size_t step) -> const TaskDataset& { return step < c.warmup_steps ? warm : full; },
                           schedule, c.train, std::move(s), c.partition, hook);
}

template <class T>
EvalGrid evaluate_needles(const ExperimentConfig& c, const TrainState<T>& s, std::size_t ratio,
                          std::optional<PartitionPolicy> policy = std::nullopt) {
  EvalConfig e = c.eval_config(ratio);
  if (policy) e.partition = *policy;
  return evaluate_grid(s.base, s.vst, e, c.eval_lengths, c.eval_depths, c.eval_trials);
}

struct AblationRun {
  std::uint64_t seed = 0;
  double curriculum_final_loss = 0, fixed_final_loss = 0;
  double curriculum_accuracy = 0, fixed_accuracy = 0;  // needle accuracy at the test ratio
};

struct AblationSummary {
  std::vector<AblationRun> runs;
  std::size_t fixed_ratio = 16, test_ratio = 16, final_window = 200;
  double mean_curriculum_loss = 0, mean_fixed_loss = 0;
  double mean_curriculum_accuracy = 0, mean_fixed_accuracy = 0;

  bool loss_ordering_holds() const { return mean_curriculum_loss <= mean_fixed_loss; }
  bool accuracy_ordering_holds() const { return mean_curriculum_accuracy >= mean_fixed_accuracy; }
};

inline void to_json(nlohmann::json& j, const AblationRun& r) {
  j = nlohmann::json{{"seed", r.seed},
                     {"curriculum_final_loss", r.curriculum_final_loss},
                     {"fixed_final_loss", r.fixed_final_loss},
                     {"curriculum_accuracy", r.curriculum_accuracy},
                     {"fixed_accuracy", r.fixed_accuracy}};
}

inline void to_json(nlohmann::json& j, const AblationSummary& s) {
  j = nlohmann::json{{"runs", s.runs},
                     {"fixed_ratio", s.fixed_ratio},
                     {"test_ratio", s.test_ratio},
                     {"final_window", s.final_window},
                     {"mean_curriculum_final_loss", s.mean_curriculum_loss},
                     {"mean_fixed_final_loss", s.mean_fixed_loss},
                     {"mean_curriculum_accuracy", s.mean_curriculum_accuracy},
                     {"mean_fixed_accuracy", s.mean_fixed_accuracy},
                     {"loss_ordering_holds", s.loss_ordering_holds()},
                     {"accuracy_ordering_holds", s.accuracy_ordering_holds()}};
}

namespace detail {

inline double overall_accuracy(const EvalGrid& g) {
  return g.mean(0, static_cast<std::size_t>(-1)).value_or(0.0);
}

}  // namespace detail

// Curriculum vs fixed-ratio training from the same pretrained base, one
// pair of runs per seed with matched step budgets.
template <class T>
AblationSummary run_ablation(const ExperimentConfig& c, const TrainState<T>& base, const std::vector<std::uint64_t>& seeds,
                             std::size_t fixed_ratio = 16, std::size_t test_ratio = 16, std::size_t final_window = 200,
                             const std::function<void(const std::string&)>& log = {}) {
  require(!seeds.empty(), "run_ablation: no seeds");
  AblationSummary sum;
  sum.fixed_ratio = fixed_ratio;
  sum.test_ratio = test_ratio;
  sum.final_window = std::min(final_window, c.train.total_steps);
  for (auto seed : seeds) {
    ExperimentConfig e = c;
    e.train.seed = Rng::derive(seed, 4).next_u64();
    e.task.seed = Rng::derive(seed, 3).next_u64();
    e.seed = seed;
    AblationRun run;
    run.seed = seed;
    const std::size_t steps = e.train.total_steps;
    const auto cur = summary_stage(e, base, e.effective_schedule());
    const auto fix = summary_stage(e, base, CurriculumSchedule::fixed(steps, fixed_ratio));
    run.curriculum_final_loss = mean_loss(cur.curve, steps - sum.final_window, steps);
    run.fixed_final_loss = mean_loss(fix.curve, steps - sum.final_window, steps);
    run.curriculum_accuracy = detail::overall_accuracy(evaluate_needles(e, cur.state, test_ratio));
    run.fixed_accuracy = detail::overall_accuracy(evaluate_needles(e, fix.state, test_ratio));
    if (log) log(nlohmann::json(run).dump());
    sum.runs.push_back(run);
  }
  const double n = static_cast<double>(sum.runs.size());
  for (const auto& r : sum.runs) {
    sum.mean_curriculum_loss += r.curriculum_final_loss / n;
    sum.mean_fixed_loss += r.fixed_final_loss / n;
    sum.mean_curriculum_accuracy += r.curriculum_accuracy / n;
    sum.mean_fixed_accuracy += r.fixed_accuracy / n;
  }
  return sum;
}

struct PartitionComparison {
  std::vector<double> dynamic_accuracy, fixed_accuracy;  // per seed
  double mean_dynamic = 0, mean_fixed = 0;
  bool holds() const { return mean_dynamic >= mean_fixed; }
};

inline void to_json(nlohmann::json& j, const PartitionComparison& p) {
  j = nlohmann::json{{"dynamic_accuracy", p.dynamic_accuracy}, {"fixed_accuracy", p.fixed_accuracy},
                     {"mean_dynamic", p.mean_dynamic},         {"mean_fixed", p.mean_fixed},
                     {"holds", p.holds()}};
}

// Trains with dynamic partitioning on two-scene haystacks, then scores the
// same parameters under dynamic and fixed-width partitioning at test time.
template <class T>
PartitionComparison compare_partitions(const ExperimentConfig& c, const TrainState<T>& base,
                                       const std::vector<std::uint64_t>& seeds,
                                       const std::function<void(const std::string&)>& log = {}) {
  require(!seeds.empty(), "compare_partitions: no seeds");
  PartitionComparison out;
  for (auto seed : seeds) {
    ExperimentConfig e = c;
    e.task.two_scene = true;
    e.partition.mode = PartitionMode::dynamic;
    e.train.seed = Rng::derive(seed, 4).next_u64();
    e.task.seed = Rng::derive(seed, 3).next_u64();
    e.seed = seed;
    const auto trained = summary_stage(e, base, e.effective_schedule());
    PartitionPolicy fixed = e.partition;
    fixed.mode = PartitionMode::fixed;
    fixed.fixed_interval_tokens = e.partition.config.max_interval_tokens;
    out.dynamic_accuracy.push_back(detail::overall_accuracy(evaluate_needles(e, trained.state, e.eval_ratio)));
    out.fixed_accuracy.push_back(detail::overall_accuracy(evaluate_needles(e, trained.state, e.eval_ratio, fixed)));
    if (log)
      log(nlohmann::json{{"seed", seed}, {"dynamic", out.dynamic_accuracy.back()}, {"fixed", out.fixed_accuracy.back()}}.dump());
  }
  const double n = static_cast<double>(seeds.size());
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    out.mean_dynamic += out.dynamic_accuracy[i] / n;
    out.mean_fixed += out.fixed_accuracy[i] / n;
  }
  return out;
}

}  // namespace vxl
