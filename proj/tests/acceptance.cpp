// Acceptance suite: one PASS/FAIL line per criterion on stdout, progress on
// stderr. With no arguments every criterion runs; otherwise only the listed
// ones (e.g. `acceptance 1 3 5`). Exit status is nonzero if any line FAILs.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "vxl/compressor.hpp"
#include "vxl/costmodel.hpp"
#include "vxl/experiment.hpp"
#include "vxl/partitioner.hpp"

using namespace vxl;

namespace {

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

struct Verdict {
  bool pass = false;
  std::string detail;
};

bool report(int id, const std::string& title, const Verdict& v, double seconds, double budget) {
  const bool in_budget = seconds < budget;
  const bool ok = v.pass && in_budget;
  std::printf("%s criterion %d (%s): %s; cpu %.1fs of %.0fs%s\n", ok ? "PASS" : "FAIL", id, title.c_str(),
              v.detail.c_str(), seconds, budget, in_budget ? "" : " [over budget]");
  std::fflush(stdout);
  return ok;
}

std::string fmt(double x) {
  std::ostringstream os;
  os.precision(4);
  os << x;
  return os.str();
}

TokenIds random_ids(std::size_t n, std::size_t vocab, Rng& rng) {
  TokenIds ids(n);
  for (auto& x : ids) x = static_cast<std::uint32_t>(rng.uniform_int(vocab));
  return ids;
}

// ---- 1: pass-through equivalence ----

Verdict passthrough_equivalence() {
  const ModelConfig cfg;
  Rng rng(101);
  const auto params = Params<double>::init(cfg, rng, 0.1);
  double worst = 0;
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 1 + rng.uniform_int(256);
    const auto ids = random_ids(n, cfg.vocab_size, rng);
    std::vector<std::size_t> sizes;
    for (std::size_t left = n; left > 0;) {
      const std::size_t s = std::min(left, 1 + rng.uniform_int(64));
      sizes.push_back(s);
      left -= s;
    }
    const auto chunked = passthrough_encode(params, ids, sizes);
    worst = std::max(worst, max_abs_diff(chunked.logits, forward_full(params, ids)));
  }
  return {worst < 1e-9, "max |dlogit| " + fmt(worst) + " over 50 sequences (< 1e-9)"};
}

// ---- 2: gradient correctness ----

Verdict gradient_correctness() {
  GradCheckConfig g;
  g.scope = Scope::all;
  g.ratios = {1, 2, 4};
  g.instances = 3;
  g.h = 1e-5;
  g.tolerance = 1e-4;
  const auto r = grad_check(g);
  double worst = 0;
  std::string worst_block;
  for (const auto& b : r.blocks)
    if (b.max_rel_error >= worst) worst = b.max_rel_error, worst_block = b.name;
  return {r.pass, std::to_string(r.blocks.size()) + " blocks, worst rel error " + fmt(worst) + " (" + worst_block +
                      ") at ratios {1,2,4} x 3 instances (< 1e-4)"};
}

// ---- 3: cache accounting ----

CompressionPlan random_plan(Rng& rng, bool uniform_dividing) {
  CompressionPlan p;
  const std::size_t alpha = 1 + rng.uniform_int(16);
  const std::size_t intervals = 1 + rng.uniform_int(4);
  for (std::size_t i = 0; i < intervals; ++i) {
    Interval iv;
    iv.start = p.total_len;
    if (uniform_dividing) {
      iv.ratio = alpha;
      iv.width = alpha * (1 + rng.uniform_int(std::max<std::size_t>(1, 96 / alpha)));
    } else {
      iv.ratio = 1 + rng.uniform_int(16);
      iv.width = 1 + rng.uniform_int(96);
    }
    p.total_len += iv.width;
    p.intervals.push_back(iv);
  }
  return p;
}

Verdict cache_accounting() {
  const ModelConfig cfg;
  Rng rng(303);
  const auto params = Params<double>::init(cfg, rng, 0.1);
  const auto vst = VstParams<double>::init(params, rng);
  int sum_ok = 0, div_ok = 0;
  for (int t = 0; t < 100; ++t) {
    const auto plan = random_plan(rng, false);
    std::size_t expected = 0;
    for (const auto& iv : plan.intervals) expected += (iv.width + iv.ratio - 1) / iv.ratio;
    const auto r = encode_sequence(params, vst, random_ids(plan.total_len, cfg.vocab_size, rng), plan);
    bool ok = r.cache.rows() == expected;
    for (std::size_t l = 0; l < cfg.n_layers; ++l)
      ok = ok && r.cache.keys[l].rows() == expected && r.cache.values[l].rows() == expected;
    sum_ok += ok;
  }
  for (int t = 0; t < 100; ++t) {
    const auto plan = random_plan(rng, true);
    const std::size_t alpha = plan.intervals.front().ratio;
    const auto r = encode_sequence(params, vst, random_ids(plan.total_len, cfg.vocab_size, rng), plan);
    bool ok = r.cache.rows() * alpha == plan.total_len;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) ok = ok && r.cache.keys[l].rows() * alpha == plan.total_len;
    div_ok += ok;
  }
  return {sum_ok == 100 && div_ok == 100, "rows = sum ceil(w/a) on " + std::to_string(sum_ok) +
                                              "/100 plans, rows = n/a on " + std::to_string(div_ok) +
                                              "/100 uniform dividing plans"};
}

// ---- 4: FLOPs oracle ----

Verdict flops_oracle() {
  const ModelConfig cfg;
  Rng rng(404);
  const auto params = Params<double>::init(cfg, rng, 0.02);
  int exact = 0;
  for (int t = 0; t < 20; ++t) {
    const std::size_t s = 1 + rng.uniform_int(128);
    const std::size_t s_pst = rng.uniform_int(cfg.context_window - s);
    auto caches = empty_kv_caches<double>(cfg);
    if (s_pst > 0) forward_step(params, caches, random_ids(s_pst, cfg.vocab_size, rng));
    OpCounter c;
    forward_step(params, caches, random_ids(s, cfg.vocab_size, rng), std::nullopt, &c);
    const auto r = flops_pass(cfg, s, s_pst);
    const std::uint64_t L = cfg.n_layers;
    const bool terms = L * r.qkv == 2 * c.of("qkv") && L * r.qk == 2 * c.of("qk") && L * r.av == 2 * c.of("av") &&
                       L * r.out == 2 * c.of("out") && L * r.up == 2 * c.of("up") && L * r.down == 2 * c.of("down") &&
                       r.lm == 2 * c.of("lm");
    const std::uint64_t matmul = L * (r.qkv + r.qk + r.av + r.out + r.up + r.down) + r.lm;
    exact += terms && matmul == 2 * c.multiply_adds;
  }
  const auto full = flops_full(4096, cfg).total();
  const auto comp = flops_compressed(4096, 512, 8, cfg).total();
  return {exact == 20 && comp < full, std::to_string(exact) + "/20 (s, s_pst) pairs integer-exact; compressed " +
                                          std::to_string(comp) + " < full " + std::to_string(full) + " at n=4096"};
}

// ---- 5: depth-score segmentation ----

std::vector<double> brute_force_depths(const std::vector<double>& s) {
  const std::size_t n = s.size();
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) {
    double l = -INFINITY, r = -INFINITY;
    for (std::size_t j = 0; j < i; ++j) l = std::max(l, s[j]);
    for (std::size_t j = i + 1; j < n; ++j) r = std::max(r, s[j]);
    d[i] = i == 0 ? r - s[i] : i == n - 1 ? l - s[i] : l + r - 2 * s[i];
  }
  return d;
}

Verdict depth_segmentation() {
  Rng rng(505);
  int oracle = 0;
  for (int t = 0; t < 100; ++t) {
    std::vector<double> s(3 + rng.uniform_int(200));
    for (auto& x : s) x = 2 * rng.uniform() - 1;
    oracle += depth_scores(s).depths == brute_force_depths(s);
  }

  FrameEmbeddings flat;
  flat.embeddings = Mat<double>(40, 8);
  for (std::size_t r = 0; r < 40; ++r) flat.embeddings(r, 0) = 1.0;
  DepthScores ds;
  std::vector<std::size_t> bounds;
  dynamic_partition(flat, PartitionConfig{}, &ds, &bounds);
  bool constant_ok = bounds.empty();
  for (std::size_t i = 1; i + 1 < ds.depths.size(); ++i) constant_ok = constant_ok && ds.depths[i] == 0.0;

  int located = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng r(seed);
    const std::size_t n = 16 + r.uniform_int(113);
    const std::size_t cut = n / 4 + r.uniform_int(n / 2);
    const auto fe = two_scene_embeddings(n, cut, 16, 4, r);
    std::vector<std::size_t> b;
    dynamic_partition(fe, PartitionConfig{}, nullptr, &b);
    located += std::find(b.begin(), b.end(), cut) != b.end();
  }
  return {oracle == 100 && constant_ok && located >= 99,
          std::to_string(oracle) + "/100 series match the O(n^2) oracle; constant series " +
              (constant_ok ? "clean" : "NOT clean") + "; cut found in " + std::to_string(located) + "/100 seeds (>= 99)"};
}

// ---- 6-8: trained desk model ----

void progress(const std::string& tag, const CurvePoint& p) {
  static double acc = 0;
  static std::size_t n = 0;
  acc += p.loss;
  if (++n == 100) {
    std::fprintf(stderr, "  %s step %zu loss %.4f\n", tag.c_str(), p.step + 1, acc / 100);
    acc = 0;
    n = 0;
  }
}

ExperimentConfig desk_experiment() {
  ExperimentConfig e;
  e.reseed(20240);
  e.task.max_frames = 128;
  e.eval_lengths = {32, 64, 128, 256};
  e.eval_depths = {0.0, 0.25, 0.5, 0.75, 1.0};
  e.eval_trials = 20;
  return e;
}

struct Shared {
  std::optional<TrainState<double>> pretrained;
  double pretrain_seconds = 0;
};

const TrainState<double>& pretrained_base(Shared& sh) {
  if (!sh.pretrained) {
    const double t0 = cpu_seconds();
    const auto e = desk_experiment();
    std::fprintf(stderr, "pretraining base (%zu steps)\n", e.pretrain.total_steps);
    auto r = pretrain_stage(e, initial_state<double>(e), [](const CurvePoint& p) { progress("pretrain", p); });
    sh.pretrained = std::move(r.state);
    sh.pretrain_seconds = cpu_seconds() - t0;
  }
  return *sh.pretrained;
}

Verdict needle_retrieval(Shared& sh) {
  auto e = desk_experiment();
  e.train.total_steps = 2000;
  e.schedule = CurriculumSchedule::progressive(e.train.total_steps, {{2, 4}, {8}}, {0.5, 0.5});
  e.eval_ratio = 8;
  const auto& base = pretrained_base(sh);
  std::fprintf(stderr, "training summary tokens (%zu steps, curriculum {2,4} -> {8})\n", e.train.total_steps);
  const auto tr = summary_stage(e, base, *e.schedule, [](const CurvePoint& p) { progress("vst", p); });
  const auto grid = evaluate_needles(e, tr.state, 8);
  const double trained = grid.mean(0, e.task.max_frames).value_or(0.0);
  const double beyond = grid.mean(2 * e.task.max_frames, 2 * e.task.max_frames).value_or(0.0);
  return {trained >= 0.95 && beyond >= 0.80,
          "alpha=8 accuracy " + fmt(trained) + " at <= 128 frames (>= 0.95), " + fmt(beyond) +
              " at 256 frames (>= 0.80); pretrain " + std::to_string(e.pretrain.total_steps) + " + summary " +
              std::to_string(e.train.total_steps) + " steps"};
}

ExperimentConfig comparison_experiment() {
  auto e = desk_experiment();
  e.train.total_steps = 600;
  e.eval_lengths = {32, 64, 128};
  e.eval_trials = 10;
  return e;
}

std::vector<std::uint64_t> five_seeds() { return {11, 22, 33, 44, 55}; }

Verdict curriculum_ablation(Shared& sh) {
  const auto e = comparison_experiment();
  const auto& base = pretrained_base(sh);
  std::fprintf(stderr, "ablation: 5 seeds x {curriculum, fixed 16} x %zu steps\n", e.train.total_steps);
  const auto s = run_ablation(e, base, five_seeds(), 16, 16, 100,
                              [](const std::string& line) { std::fprintf(stderr, "  %s\n", line.c_str()); });
  return {s.loss_ordering_holds() && s.accuracy_ordering_holds(),
          "final-window loss curriculum " + fmt(s.mean_curriculum_loss) + " vs fixed " + fmt(s.mean_fixed_loss) +
              "; alpha=16 accuracy curriculum " + fmt(s.mean_curriculum_accuracy) + " vs fixed " +
              fmt(s.mean_fixed_accuracy)};
}

Verdict partition_comparison(Shared& sh) {
  const auto e = comparison_experiment();
  const auto& base = pretrained_base(sh);
  std::fprintf(stderr, "two-scene: 5 seeds, dynamic-trained, dynamic vs fixed %zu-token intervals\n",
               e.partition.config.max_interval_tokens);
  const auto c = compare_partitions(e, base, five_seeds(),
                                    [](const std::string& line) { std::fprintf(stderr, "  %s\n", line.c_str()); });
  return {c.holds(), "two-scene accuracy dynamic " + fmt(c.mean_dynamic) + " vs fixed " + fmt(c.mean_fixed)};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  auto want = [&](int id) { return wanted.empty() || wanted.count(id) > 0; };

  Shared shared;
  bool all_ok = true;
  double comparison_seconds = 0;
  auto run = [&](int id, const std::string& title, double budget, const std::function<Verdict()>& f) {
    if (!want(id)) return;
    const double t0 = cpu_seconds();
    Verdict v;
    try {
      v = f();
    } catch (const std::exception& ex) {
      v = {false, std::string("error: ") + ex.what()};
    }
    double seconds = cpu_seconds() - t0;
    if (id == 7 || id == 8) {
      comparison_seconds += seconds;
      seconds = comparison_seconds;  // 7 and 8 share one budget
    }
    all_ok = report(id, title, v, seconds, budget) && all_ok;
  };

  run(1, "pass-through equivalence", 120, passthrough_equivalence);
  run(2, "gradient correctness", 300, gradient_correctness);
  run(3, "cache accounting", 60, cache_accounting);
  run(4, "FLOPs oracle", 120, flops_oracle);
  run(5, "depth-score segmentation", 60, depth_segmentation);
  run(6, "toy needle retrieval", 45 * 60, [&] { return needle_retrieval(shared); });
  run(7, "curriculum ablation", 2 * 3600, [&] { return curriculum_ablation(shared); });
  run(8, "dynamic vs fixed partition", 2 * 3600, [&] { return partition_comparison(shared); });
  return all_ok ? 0 : 1;
}
