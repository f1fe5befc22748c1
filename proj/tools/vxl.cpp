// vxl: command-line driver. Every command prints one JSON status line on
// stdout and writes artifacts under --out.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "vxl/compressor.hpp"
#include "vxl/costmodel.hpp"
#include "vxl/experiment.hpp"
#include "vxl/partitioner.hpp"
#include "vxl/tensor_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace vxl;

namespace {

struct Common {
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
  std::string precision;  // empty: keep the config value
};

std::uint64_t env_seed() {
  const char* s = std::getenv("VXL_SEED");
  if (!s || !*s) return 0;
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used);
    if (used != std::string(s).size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    fail_input(std::string("VXL_SEED is not an unsigned integer: '") + s + "'");
  }
}

json read_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail_input("cannot open " + path);
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    fail_input(path + ": " + e.what());
  }
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream os(p, std::ios::binary);
  if (!os) fail_input("cannot write " + p.string());
  os << s;
}

void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

Precision parse_precision(const std::string& s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  fail_input("precision must be f32 or f64, got '" + s + "'");
}

template <class F>
auto dispatch(Precision p, F&& f) {
  if (p == Precision::f32) return f(std::type_identity<float>{});
  return f(std::type_identity<double>{});
}

// Reads a model's precision from a saved params manifest without loading it.
Precision params_precision(const std::string& prefix) {
  return read_json(prefix + ".json").at("config").get<ModelConfig>().precision;
}

TokenIds read_ids(const std::string& path) {
  const json j = read_json(path);
  try {
    if (j.is_array()) return j.get<TokenIds>();
    return j.at("stream").get<TokenIds>();
  } catch (const json::exception& e) {
    fail_input(path + ": expected a token array or an object with 'stream': " + e.what());
  }
}

TokenIds parse_id_list(const std::string& s) {
  TokenIds ids;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      ids.push_back(static_cast<std::uint32_t>(std::stoul(tok)));
    } catch (const std::exception&) {
      fail_input("bad token id '" + tok + "'");
    }
  }
  return ids;
}

template <class T>
Params<T> params_or_init(const std::string& prefix, const ModelConfig& cfg, std::uint64_t seed, double init_std) {
  if (!prefix.empty()) return load_params<T>(prefix);
  Rng rng = Rng::derive(seed, 0);
  return Params<T>::init(cfg, rng, init_std);
}

template <class T>
VstParams<T> vst_or_init(const std::string& prefix, const Params<T>& base, std::uint64_t seed) {
  if (!prefix.empty()) {
    auto v = load_vst<T>(prefix);
    v.check_against(base);
    return v;
  }
  Rng rng = Rng::derive(seed, 0x757);
  return VstParams<T>::init(base, rng);
}

// Loads --config, then applies flag overrides and the seed fallback chain
// (flag, config file, VXL_SEED).
struct RunFlags {
  std::string config;
  std::optional<std::size_t> steps, pretrain_steps, batch_size, ratio, trials;
  std::optional<double> lr;
  std::string scope, partition_mode;
  bool two_scene = false;
};

ExperimentConfig load_run_config(const Common& c, const RunFlags& f) {
  ExperimentConfig e;
  bool seeded = false;
  if (!f.config.empty()) {
    const json j = read_json(f.config);
    try {
      e = j.get<ExperimentConfig>();
    } catch (const json::exception& ex) {
      fail_input(f.config + ": " + ex.what());
    }
    seeded = j.contains("seed");
  }
  if (c.seed)
    e.reseed(*c.seed);
  else if (!seeded)
    e.reseed(env_seed());
  if (!c.precision.empty()) e.model.precision = e.train.precision = e.pretrain.precision = parse_precision(c.precision);
  if (f.steps) e.train.total_steps = *f.steps;
  if (f.pretrain_steps) e.pretrain.total_steps = *f.pretrain_steps;
  if (f.batch_size) e.train.batch_size = e.pretrain.batch_size = *f.batch_size;
  if (f.lr) e.train.learning_rate = *f.lr;
  if (f.ratio) e.eval_ratio = *f.ratio;
  if (f.trials) e.eval_trials = *f.trials;
  if (!f.scope.empty()) e.train.scope = scope_from_string(f.scope);
  if (!f.partition_mode.empty()) e.partition = json{{"mode", f.partition_mode}}.get<PartitionPolicy>();
  if (f.two_scene) e.task.two_scene = true;
  e.jobs = c.jobs;
  e.model.validate();
  e.train.validate();
  e.pretrain.validate();
  return e;
}

void add_run_flags(CLI::App* cmd, RunFlags& f) {
  cmd->add_option("--config", f.config, "Run config JSON")->check(CLI::ExistingFile);
  cmd->add_option("--steps", f.steps, "Summary-token training steps");
  cmd->add_option("--pretrain-steps", f.pretrain_steps, "Base pretraining steps");
  cmd->add_option("--batch-size", f.batch_size, "Items per step");
  cmd->add_option("--lr", f.lr, "Learning rate");
  cmd->add_option("--ratio", f.ratio, "Evaluation compression ratio");
  cmd->add_option("--trials", f.trials, "Trials per grid cell");
  cmd->add_option("--scope", f.scope, "Trainable scope")->check(CLI::IsMember({"vst_only", "all"}));
  cmd->add_option("--partition", f.partition_mode, "Partition mode")->check(CLI::IsMember({"dynamic", "fixed"}));
  cmd->add_flag("--two-scene", f.two_scene, "Train and evaluate on two-scene haystacks");
}

// ---- commands; each returns the status payload ----

struct PartitionFlags {
  std::string embeddings, config;
  std::optional<double> threshold;
  std::optional<std::size_t> min_interval_frames, max_interval_tokens, ratio;
};

json cmd_partition(const Common& c, const PartitionFlags& f) {
  const auto fe = load_frame_embeddings(f.embeddings);
  PartitionConfig pc;
  if (!f.config.empty()) pc = read_json(f.config).get<PartitionConfig>();
  if (f.threshold) pc.threshold = *f.threshold;
  if (f.min_interval_frames) pc.min_interval_frames = *f.min_interval_frames;
  if (f.max_interval_tokens) pc.max_interval_tokens = *f.max_interval_tokens;
  if (f.ratio) pc.default_ratio = *f.ratio;
  DepthScores ds;
  std::vector<std::size_t> boundaries;
  const auto plan = dynamic_partition(fe, pc, &ds, &boundaries);
  write_json(fs::path(c.out) / "plan.json", plan);
  std::ofstream csv(fs::path(c.out) / "depth.csv");
  write_depth_csv(csv, ds, boundaries);
  write_json(fs::path(c.out) / "effective_config.json", pc);
  return {{"intervals", plan.intervals.size()}, {"boundaries", boundaries}, {"total_len", plan.total_len}};
}

struct ModelFlags {
  std::string params, vst, model;
  double init_std = 0.02;
};

ModelConfig model_config(const ModelFlags& m, const Common& c) {
  ModelConfig cfg;
  if (!m.model.empty()) cfg = read_json(m.model).get<ModelConfig>();
  if (!c.precision.empty()) cfg.precision = parse_precision(c.precision);
  return cfg;
}

Precision model_precision(const ModelFlags& m, const Common& c) {
  if (!m.params.empty()) return params_precision(m.params);
  return model_config(m, c).precision;
}

struct EncodeFlags {
  std::string ids, plan;
  bool passthrough = false;
};

json cmd_encode(const Common& c, const ModelFlags& m, const EncodeFlags& f) {
  const std::uint64_t seed = c.seed.value_or(env_seed());
  const TokenIds ids = read_ids(f.ids);
  std::optional<CompressionPlan> plan;
  if (!f.plan.empty()) plan = read_json(f.plan).get<CompressionPlan>();
  return dispatch(model_precision(m, c), [&](auto tag) -> json {
    using T = typename decltype(tag)::type;
    const auto params = params_or_init<T>(m.params, model_config(m, c), seed, m.init_std);
    write_json(fs::path(c.out) / "effective_config.json", json{{"model", params.config}, {"seed", seed}});
    if (f.passthrough) {
      std::vector<std::size_t> sizes;
      if (plan) {
        if (plan->total_len != ids.size())
          fail_input("plan covers " + std::to_string(plan->total_len) + " tokens, ids has " + std::to_string(ids.size()));
        for (const auto& iv : plan->intervals) sizes.push_back(iv.width);
      }
      const auto r = passthrough_encode(params, ids, sizes);
      io::save_tensor(fs::path(c.out) / "logits.vxt", r.logits);
      return {{"mode", "passthrough"}, {"tokens", ids.size()}, {"logits_rows", r.logits.rows()}};
    }
    if (!plan) fail_input("encode: --plan is required unless --passthrough is given");
    const auto vst = vst_or_init<T>(m.vst, params, seed);
    const auto r = encode_sequence(params, vst, ids, *plan);
    save_cache(fs::path(c.out) / "cache", r.cache);
    std::ofstream csv(fs::path(c.out) / "trace.csv");
    r.trace.write_csv(csv);
    return {{"mode", "compressed"}, {"tokens", ids.size()}, {"cache_rows", r.cache.rows()}, {"chunks", r.trace.rows.size()}};
  });
}

struct DecodeFlags {
  std::string cache, prompt;
  std::size_t max_new = 1;
};

json cmd_decode(const Common& c, const ModelFlags& m, const DecodeFlags& f) {
  const std::uint64_t seed = c.seed.value_or(env_seed());
  const TokenIds prompt = parse_id_list(f.prompt);
  return dispatch(model_precision(m, c), [&](auto tag) -> json {
    using T = typename decltype(tag)::type;
    const auto params = params_or_init<T>(m.params, model_config(m, c), seed, m.init_std);
    const auto cache = load_cache<T>(f.cache);
    const auto r = decode_with_cache(params, cache, prompt, f.max_new);
    Mat<T> all(0, params.config.vocab_size);
    for (const auto& l : r.step_logits) all.append_rows(l);
    io::save_tensor(fs::path(c.out) / "logits.vxt", all);
    write_json(fs::path(c.out) / "decode.json", json{{"prompt", prompt}, {"generated", r.generated}});
    return {{"generated", r.generated}};
  });
}

template <class T>
void save_state(const fs::path& dir, const TrainState<T>& s) {
  save_params(dir / "base", s.base);
  save_vst(dir / "vst", s.vst);
}

void save_curve(const fs::path& p, const std::vector<CurvePoint>& curve) {
  std::ofstream os(p);
  if (!os) fail_input("cannot write " + p.string());
  write_loss_csv(os, curve);
}

struct TrainFlags {
  std::string base;  // pretrained params; skips stage 1
};

json cmd_train(const Common& c, const RunFlags& rf, const TrainFlags& f) {
  const auto e = load_run_config(c, rf);
  write_json(fs::path(c.out) / "effective_config.json", e);
  const Precision prec = f.base.empty() ? e.model.precision : params_precision(f.base);
  return dispatch(prec, [&](auto tag) -> json {
    using T = typename decltype(tag)::type;
    auto state = initial_state<T>(e);
    json status;
    if (f.base.empty()) {
      auto pre = pretrain_stage(e, std::move(state));
      save_curve(fs::path(c.out) / "pretrain_loss.csv", pre.curve);
      status["pretrain_final_loss"] = pre.curve.empty() ? 0.0 : pre.curve.back().loss;
      state = std::move(pre.state);
    } else {
      state.base = load_params<T>(f.base);
    }
    auto tr = summary_stage(e, std::move(state), e.effective_schedule());
    save_curve(fs::path(c.out) / "loss.csv", tr.curve);
    save_state(c.out, tr.state);
    const std::size_t n = tr.curve.size(), win = std::min<std::size_t>(n, 100);
    status["steps"] = n;
    status["final_loss"] = n ? mean_loss(tr.curve, n - win, n) : 0.0;
    return status;
  });
}

struct EvalFlags {
  std::string base, vst;
};

json cmd_eval(const Common& c, const RunFlags& rf, const EvalFlags& f) {
  if (f.base.empty() || f.vst.empty()) fail_input("eval: --base and --vst are required");
  auto e = load_run_config(c, rf);
  write_json(fs::path(c.out) / "effective_config.json", e);
  return dispatch(params_precision(f.base), [&](auto tag) -> json {
    using T = typename decltype(tag)::type;
    TrainState<T> s{load_params<T>(f.base), {}};
    s.vst = load_vst<T>(f.vst);
    s.vst.check_against(s.base);
    const auto grid = evaluate_needles(e, s, e.eval_ratio);
    std::ofstream csv(fs::path(c.out) / "grid.csv");
    grid.write_csv(csv);
    json st{{"ratio", e.eval_ratio}};
    if (auto m = grid.mean(0, static_cast<std::size_t>(-1))) st["mean_accuracy"] = *m;
    return st;
  });
}

struct CostFlags {
  std::uint64_t n = 4096, w = 512, alpha = 8;
  std::string model, sweep;
  bool corrected_softmax = false;
};

json cmd_cost(const Common& c, const CostFlags& f) {
  ModelConfig cfg;
  if (!f.model.empty()) cfg = read_json(f.model).get<ModelConfig>();
  if (!c.precision.empty()) cfg.precision = parse_precision(c.precision);
  const CostOptions opt{f.corrected_softmax};
  const auto full = flops_full(f.n, cfg, opt);
  const auto comp = flops_compressed(f.n, f.w, f.alpha, cfg, opt);
  const auto mem = kv_memory(f.n, fixed_partition(f.n, f.w, f.alpha), cfg, static_cast<std::uint64_t>(cfg.precision));
  const json report{{"n", f.n}, {"w", f.w}, {"alpha", f.alpha}, {"full", full}, {"compressed", comp}, {"memory", mem}};
  write_json(fs::path(c.out) / "cost.json", report);
  write_json(fs::path(c.out) / "effective_config.json",
             json{{"model", cfg}, {"n", f.n}, {"w", f.w}, {"alpha", f.alpha}, {"corrected_softmax_flops", f.corrected_softmax}});
  if (!f.sweep.empty()) {
    std::vector<std::uint64_t> lengths;
    for (auto v : parse_id_list(f.sweep)) lengths.push_back(v);
    std::ofstream csv(fs::path(c.out) / "sweep.csv");
    write_cost_sweep_csv(csv, lengths, f.w, f.alpha, cfg, opt);
  }
  return {{"flops_full", full.total()},
          {"flops_compressed", comp.total()},
          {"approximation", comp.approximation},
          {"exceeds_window", comp.exceeds_window},
          {"kv_reduction", mem.reduction}};
}

struct GradFlags {
  std::string scope = "all";
  std::optional<double> tolerance;
  std::optional<std::size_t> instances;
  std::string fault_block;
  std::size_t fault_index = 0;
  double fault_delta = 1.0;
};

json cmd_gradcheck(const Common& c, const GradFlags& f, bool& failed) {
  GradCheckConfig g;
  g.scope = scope_from_string(f.scope);
  g.seed = c.seed.value_or(env_seed());
  if (f.tolerance) g.tolerance = *f.tolerance;
  if (f.instances) g.instances = *f.instances;
  if (!f.fault_block.empty()) {
    g.fault_block = f.fault_block;
    g.fault_index = f.fault_index;
    g.fault_delta = f.fault_delta;
  }
  const auto report = grad_check(g);
  write_json(fs::path(c.out) / "gradcheck.json", report);
  write_json(fs::path(c.out) / "effective_config.json",
             json{{"model", g.model}, {"scope", to_string(g.scope)}, {"tolerance", g.tolerance},
                  {"instances", g.instances}, {"seed", g.seed}});
  failed = !report.pass;
  double worst = 0;
  for (const auto& b : report.blocks) worst = std::max(worst, b.max_rel_error);
  return {{"pass", report.pass}, {"max_rel_error", worst}};
}

struct AblateFlags {
  std::string base;
  std::size_t seeds = 5;
  std::size_t fixed_ratio = 16, test_ratio = 16, final_window = 200;
};

json cmd_ablate(const Common& c, const RunFlags& rf, const AblateFlags& f) {
  const auto e = load_run_config(c, rf);
  write_json(fs::path(c.out) / "effective_config.json", e);
  const Precision prec = f.base.empty() ? e.model.precision : params_precision(f.base);
  return dispatch(prec, [&](auto tag) -> json {
    using T = typename decltype(tag)::type;
    auto state = initial_state<T>(e);
    if (f.base.empty()) {
      auto pre = pretrain_stage(e, std::move(state));
      save_curve(fs::path(c.out) / "pretrain_loss.csv", pre.curve);
      state = std::move(pre.state);
    } else {
      state.base = load_params<T>(f.base);
    }
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = 0; i < f.seeds; ++i) seeds.push_back(Rng::derive(e.seed, 0xab1a7e + i).next_u64());
    const auto sum = run_ablation(e, state, seeds, f.fixed_ratio, f.test_ratio, f.final_window,
                                  [](const std::string& line) { std::cerr << line << '\n'; });
    write_json(fs::path(c.out) / "ablation.json", sum);
    return {{"mean_curriculum_final_loss", sum.mean_curriculum_loss},
            {"mean_fixed_final_loss", sum.mean_fixed_loss},
            {"loss_ordering_holds", sum.loss_ordering_holds()},
            {"accuracy_ordering_holds", sum.accuracy_ordering_holds()}};
  });
}

json cmd_dump(const Common& c, const std::string& in) {
  std::ifstream is(in, std::ios::binary);
  if (!is) fail_input("cannot open " + in);
  json tensors = json::array();
  while (is.peek() != std::char_traits<char>::eof()) {
    const auto rec = io::read_tensor_record(is);
    const std::string name = "tensor_" + std::to_string(tensors.size()) + ".csv";
    std::ofstream csv(fs::path(c.out) / name);
    csv.precision(17);
    for (std::size_t r = 0; r < rec.values.rows(); ++r) {
      for (std::size_t k = 0; k < rec.values.cols(); ++k) csv << (k ? "," : "") << rec.values(r, k);
      csv << '\n';
    }
    tensors.push_back({{"file", name}, {"rows", rec.values.rows()}, {"cols", rec.values.cols()},
                       {"precision", static_cast<int>(rec.precision)}});
  }
  return {{"tensors", tensors}};
}

json cmd_load(const Common& c, const std::string& in) {
  std::ifstream is(in);
  if (!is) fail_input("cannot open " + in);
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        fail_input(in + ": bad number '" + cell + "' on row " + std::to_string(rows.size() + 1));
      }
    }
    if (!rows.empty() && row.size() != rows.front().size())
      fail_input(in + ": row " + std::to_string(rows.size() + 1) + " has " + std::to_string(row.size()) + " columns");
    rows.push_back(std::move(row));
  }
  Mat<double> m(rows.size(), rows.empty() ? 0 : rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t k = 0; k < rows[r].size(); ++k) m(r, k) = rows[r][k];
  const Precision prec = c.precision.empty() ? Precision::f64 : parse_precision(c.precision);
  io::save_tensor(fs::path(c.out) / "tensor.vxt", m, prec);
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"precision", static_cast<int>(prec)}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Summary-token KV-cache compression toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Common common;
  app.add_option("--out", common.out, "Output directory");
  app.add_option("--seed", common.seed, "Global seed (falls back to VXL_SEED)");
  app.add_option("--jobs", common.jobs, "Worker threads for grid cells")->check(CLI::PositiveNumber);
  app.add_option("--precision", common.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));

  PartitionFlags pf;
  auto* partition = app.add_subcommand("partition", "Split frame embeddings into intervals");
  partition->add_option("--embeddings", pf.embeddings, "Frame embeddings file")->required();
  partition->add_option("--config", pf.config, "Partition config JSON");
  partition->add_option("--threshold", pf.threshold, "Fixed depth threshold");
  partition->add_option("--min-interval-frames", pf.min_interval_frames);
  partition->add_option("--max-interval-tokens", pf.max_interval_tokens);
  partition->add_option("--ratio", pf.ratio, "Compression ratio per interval");

  ModelFlags mf;
  auto add_model = [&](CLI::App* cmd) {
    cmd->add_option("--params", mf.params, "Params prefix (<prefix>.json/.bin)");
    cmd->add_option("--model", mf.model, "Model config JSON for fresh weights");
    cmd->add_option("--init-std", mf.init_std, "Init std for fresh weights");
  };
  EncodeFlags ef;
  auto* encode = app.add_subcommand("encode", "Encode a token stream into a compressed cache");
  add_model(encode);
  encode->add_option("--vst", mf.vst, "Summary params prefix");
  encode->add_option("--ids", ef.ids, "Token ids JSON")->required();
  encode->add_option("--plan", ef.plan, "Compression plan JSON");
  encode->add_flag("--passthrough", ef.passthrough, "Keep every raw KV row, write logits");

  DecodeFlags df;
  auto* decode = app.add_subcommand("decode", "Greedy decoding from a saved cache");
  add_model(decode);
  decode->add_option("--cache", df.cache, "Cache prefix")->required();
  decode->add_option("--prompt", df.prompt, "Comma-separated prompt ids")->required();
  decode->add_option("--max-new", df.max_new, "Tokens to generate");

  RunFlags rf;
  TrainFlags tf;
  auto* train = app.add_subcommand("train", "Pretrain the base, then train summary tokens");
  add_run_flags(train, rf);
  train->add_option("--base", tf.base, "Pretrained params prefix; skips pretraining");

  EvalFlags vf;
  auto* eval = app.add_subcommand("eval", "Needle accuracy grid");
  add_run_flags(eval, rf);
  eval->add_option("--base", vf.base, "Params prefix")->required();
  eval->add_option("--vst", vf.vst, "Summary params prefix")->required();

  CostFlags cf;
  auto* cost = app.add_subcommand("cost", "FLOPs and KV memory report");
  cost->add_option("--n", cf.n, "Sequence length");
  cost->add_option("--w", cf.w, "Interval width")->check(CLI::PositiveNumber);
  cost->add_option("--alpha", cf.alpha, "Compression ratio")->check(CLI::PositiveNumber);
  cost->add_option("--model", cf.model, "Model config JSON");
  cost->add_option("--sweep", cf.sweep, "Comma-separated lengths for sweep.csv");
  cost->add_flag("--corrected-softmax", cf.corrected_softmax, "Use the dimensionally consistent softmax term");

  GradFlags gf;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient check");
  gradcheck->add_option("--scope", gf.scope)->check(CLI::IsMember({"vst_only", "all"}));
  gradcheck->add_option("--tolerance", gf.tolerance);
  gradcheck->add_option("--instances", gf.instances);
  gradcheck->add_option("--fault-block", gf.fault_block, "Perturb one analytic gradient block");
  gradcheck->add_option("--fault-index", gf.fault_index);
  gradcheck->add_option("--fault-delta", gf.fault_delta);

  AblateFlags af;
  auto* ablate = app.add_subcommand("ablate", "Curriculum vs fixed-ratio training");
  add_run_flags(ablate, rf);
  ablate->add_option("--base", af.base, "Pretrained params prefix; skips pretraining");
  ablate->add_option("--seeds", af.seeds, "Number of paired runs")->check(CLI::PositiveNumber);
  ablate->add_option("--fixed-ratio", af.fixed_ratio)->check(CLI::PositiveNumber);
  ablate->add_option("--test-ratio", af.test_ratio)->check(CLI::PositiveNumber);
  ablate->add_option("--final-window", af.final_window);

  std::string dump_in, load_in;
  auto* dump = app.add_subcommand("dump", "VXT1 records to CSV");
  dump->add_option("--in", dump_in, "VXT1 file")->required();
  auto* load = app.add_subcommand("load", "CSV to a VXT1 record");
  load->add_option("--in", load_in, "CSV file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << '\n';
    std::cout << json{{"status", "error"}, {"kind", "usage"}, {"message", e.what()}}.dump() << std::endl;
    return 2;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    fs::create_directories(common.out);
    json payload;
    bool failed = false;
    if (name == "partition") payload = cmd_partition(common, pf);
    else if (name == "encode") payload = cmd_encode(common, mf, ef);
    else if (name == "decode") payload = cmd_decode(common, mf, df);
    else if (name == "train") payload = cmd_train(common, rf, tf);
    else if (name == "eval") payload = cmd_eval(common, rf, vf);
    else if (name == "cost") payload = cmd_cost(common, cf);
    else if (name == "gradcheck") payload = cmd_gradcheck(common, gf, failed);
    else if (name == "ablate") payload = cmd_ablate(common, rf, af);
    else if (name == "dump") payload = cmd_dump(common, dump_in);
    else payload = cmd_load(common, load_in);
    json status{{"command", name}, {"status", failed ? "fail" : "ok"}, {"out", common.out}};
    status.update(payload);
    std::cout << status.dump() << std::endl;
    return failed ? 1 : 0;
  } catch (const Error& e) {
    std::cerr << "vxl " << name << ": " << e.what() << '\n';
    const bool input = e.kind() == ErrorKind::input;
    std::cout << json{{"command", name}, {"status", "error"}, {"kind", input ? "input" : "internal"}, {"message", e.what()}}.dump()
              << std::endl;
    return input ? 2 : 1;
  } catch (const json::exception& e) {
    std::cerr << "vxl " << name << ": " << e.what() << '\n';
    std::cout << json{{"command", name}, {"status", "error"}, {"kind", "input"}, {"message", e.what()}}.dump() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "vxl " << name << ": " << e.what() << '\n';
    std::cout << json{{"command", name}, {"status", "error"}, {"kind", "internal"}, {"message", e.what()}}.dump() << std::endl;
    return 1;
  }
}
