#pragma once

// Training of summary-token parameters: ratio curriculum, reverse-mode
// loss gradients through chunked encode + decode, finite-difference
// checking, and the optimizer loop.

#include <cmath>
#include <numbers>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vxl/compressor.hpp"
#include "vxl/harness.hpp"
#include "vxl/model.hpp"

namespace vxl {

struct CurriculumStage {
  std::size_t begin = 0, end = 0;  // [begin, end) in steps
  std::vector<std::size_t> pool;
};

struct CurriculumSchedule {
  std::vector<CurriculumStage> stages;

  std::size_t total_steps() const { return stages.empty() ? 0 : stages.back().end; }

  void validate() const {
    std::size_t cursor = 0;
    for (std::size_t i = 0; i < stages.size(); ++i) {
      const auto& s = stages[i];
      const std::string at = "schedule stage " + std::to_string(i);
      require(s.begin == cursor, at + ": begins at " + std::to_string(s.begin) + ", expected " + std::to_string(cursor));
      require(s.end > s.begin, at + ": empty step range");
      require(!s.pool.empty(), at + ": empty ratio pool");
      for (auto r : s.pool) require(r >= 1, at + ": ratios must be >= 1");
      cursor = s.end;
    }
  }

  // Cumulative pools split at the given fractions of total_steps; stages
  // that round to zero steps are dropped.
  static CurriculumSchedule progressive(std::size_t total_steps, const std::vector<std::vector<std::size_t>>& additions,
                                        const std::vector<double>& fractions) {
    require(additions.size() == fractions.size(), "progressive schedule: additions and fractions differ in length");
    CurriculumSchedule s;
    std::vector<std::size_t> pool;
    double acc = 0;
    std::size_t begin = 0;
    for (std::size_t i = 0; i < additions.size(); ++i) {
      pool.insert(pool.end(), additions[i].begin(), additions[i].end());
      acc += fractions[i];
      const std::size_t end = i + 1 == additions.size() ? total_steps
                                                        : static_cast<std::size_t>(std::llround(acc * static_cast<double>(total_steps)));
      if (end > begin) s.stages.push_back({begin, end, pool});
      begin = std::max(begin, end);
    }
    s.validate();
    return s;
  }

  // {2,4} for half the run, then 8, 12 and 16 join the pool.
  static CurriculumSchedule standard(std::size_t total_steps) {
    return progressive(total_steps, {{2, 4}, {8}, {12}, {16}}, {0.5, 0.2, 0.15, 0.15});
  }

  static CurriculumSchedule fixed(std::size_t total_steps, std::size_t ratio) {
    CurriculumSchedule s;
    if (total_steps > 0) s.stages.push_back({0, total_steps, {ratio}});
    s.validate();
    return s;
  }

  const CurriculumStage& stage_at(std::size_t step) const {
    for (const auto& s : stages)
      if (step >= s.begin && step < s.end) return s;
    fail_input("schedule: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps()) + ")");
  }
};

inline void to_json(nlohmann::json& j, const CurriculumSchedule& s) {
  j = nlohmann::json{{"stages", nlohmann::json::array()}};
  for (const auto& st : s.stages) j["stages"].push_back({{"begin", st.begin}, {"end", st.end}, {"ratio_pool", st.pool}});
}

inline void from_json(const nlohmann::json& j, CurriculumSchedule& s) {
  s.stages.clear();
  for (const auto& e : j.at("stages"))
    s.stages.push_back({e.at("begin").get<std::size_t>(), e.at("end").get<std::size_t>(),
                        e.at("ratio_pool").get<std::vector<std::size_t>>()});
  s.validate();
}

inline std::size_t sample_ratio(const CurriculumSchedule& s, std::size_t step, std::uint64_t seed) {
  const auto& pool = s.stage_at(step).pool;
  Rng rng = Rng::derive(seed ^ 0x5ca1ab1eULL, step);
  return pool[rng.uniform_int(pool.size())];
}

enum class Scope { vst_only, all };
enum class OptimizerKind { sgd, adam };

inline std::string to_string(Scope s) { return s == Scope::all ? "all" : "vst_only"; }
inline Scope scope_from_string(const std::string& s) {
  if (s == "all") return Scope::all;
  if (s == "vst_only") return Scope::vst_only;
  fail_input("unknown trainable scope '" + s + "'");
}

// Which parameter groups receive gradients.
struct TrainTarget {
  bool base = false;
  bool vst = true;
  static TrainTarget of(Scope s) { return {s == Scope::all, true}; }
};

template <class T>
struct TrainState {
  Params<T> base;
  VstParams<T> vst;

  // Trainable tensors in gradient order: base blocks, then summary blocks.
  std::vector<std::pair<std::string, Mat<T>*>> blocks(TrainTarget t) {
    std::vector<std::pair<std::string, Mat<T>*>> out;
    if (t.base) base.for_each([&](const std::string& n, Mat<T>& m) { out.push_back({n, &m}); });
    if (t.vst) vst.for_each([&](const std::string& n, Mat<T>& m) { out.push_back({n, &m}); });
    return out;
  }
};

template <class T>
struct LossGrads {
  double loss = 0;
  std::size_t answer_tokens = 0;
  std::vector<std::string> names;
  std::vector<Mat<T>> grads;

  double norm() const {
    double ss = 0;
    for (const auto& g : grads)
      for (T x : g.flat()) ss += static_cast<double>(x) * static_cast<double>(x);
    return std::sqrt(ss);
  }
};

namespace graph {

inline std::vector<Var> vars_of(const BoundModel& m) {
  std::vector<Var> v{m.embed};
  for (const auto& l : m.layers)
    v.insert(v.end(), {l.wq, l.wk, l.wv, l.wo, l.w_up, l.w_gate, l.w_down, l.attn_norm, l.mlp_norm});
  v.push_back(m.final_norm);
  v.push_back(m.lm_head);
  return v;
}

inline std::vector<Var> vars_of(const BoundAlt& a) {
  std::vector<Var> v{a.embed};
  for (const auto& l : a.layers) v.insert(v.end(), {l.wq, l.wk, l.wv, l.wo});
  return v;
}

// Answer-token loss for one item, scaled by `scale`. With a plan, the stream
// is compressed and the prompt decodes against the summary cache; without
// one, stream + prompt run as a single full-attention pass.
template <class T>
Var item_loss(Tape<T>& tape, const BoundModel& m, const BoundAlt* alt, const TaskItem& item,
              const CompressionPlan* plan, T scale) {
  require(!item.prompt.empty(), "training item has an empty prompt");
  require(!item.answer.empty(), "training item has an empty answer");
  TokenIds tail = item.prompt;
  tail.insert(tail.end(), item.answer.begin(), item.answer.end() - 1);
  std::vector<std::uint32_t> rows;
  Var hidden;
  std::size_t first_row = 0;
  if (plan) {
    require(alt, "item_loss: compressed loss needs summary parameters");
    require(plan->total_len == item.stream.size(), "item_loss: plan covers " + std::to_string(plan->total_len) +
                                                       " tokens, stream has " + std::to_string(item.stream.size()));
    plan->validate(m.config->context_window);
    TapeCache cache{empty_cache(tape, *m.config), {}};
    for (std::size_t i = 0; i < plan->intervals.size(); ++i) {
      const auto& iv = plan->intervals[i];
      encode_chunk_on<T>(tape, m, *alt, cache, std::span<const std::uint32_t>(item.stream.data() + iv.start, iv.width),
                         iv.ratio, static_cast<std::uint32_t>(i));
    }
    hidden = run_pass<T>(tape, m, nullptr, cache.layers, plain_input(tail, next_position(cache.entries))).hidden;
  } else {
    TokenIds all = item.stream;
    all.insert(all.end(), tail.begin(), tail.end());
    if (all.size() > m.config->context_window)
      fail_input("item_loss: full-attention input of " + std::to_string(all.size()) + " tokens exceeds window " +
                 std::to_string(m.config->context_window));
    hidden = run_pass<T>(tape, m, nullptr, empty_cache(tape, *m.config), plain_input(all, 0)).hidden;
    first_row = item.stream.size();
  }
  for (std::size_t j = 0; j < item.answer.size(); ++j)
    rows.push_back(static_cast<std::uint32_t>(first_row + item.prompt.size() - 1 + j));
  const Var lg = logits(tape, m, tape.gather_rows(hidden, rows));
  std::vector<std::uint32_t> local(rows.size());
  for (std::size_t j = 0; j < local.size(); ++j) local[j] = static_cast<std::uint32_t>(j);
  return tape.cross_entropy(lg, std::move(local), item.answer, scale);
}

}  // namespace graph

// Mean cross-entropy over every answer token in the batch and its gradient
// for the targeted blocks. `plans` empty means full attention (no summary
// tokens). `masked == false` zeroes the supervision (and so the gradients).
template <class T>
LossGrads<T> loss_and_grads(TrainState<T>& state, const std::vector<TaskItem>& batch,
                            const std::vector<CompressionPlan>& plans, TrainTarget target, bool masked = true) {
  require(!batch.empty(), "loss_and_grads: empty batch");
  require(plans.empty() || plans.size() == batch.size(), "loss_and_grads: one plan per batch item required");
  LossGrads<T> out;
  for (const auto& b : state.blocks(target)) {
    out.names.push_back(b.first);
    out.grads.emplace_back(b.second->rows(), b.second->cols());
  }
  for (const auto& item : batch) out.answer_tokens += item.answer.size();
  const T scale = masked ? T(1) / static_cast<T>(out.answer_tokens) : T(0);

  for (std::size_t i = 0; i < batch.size(); ++i) {
    ad::Tape<T> tape(true);
    const auto m = graph::bind(tape, state.base, target.base);
    std::optional<graph::BoundAlt> alt;
    if (!plans.empty()) alt = graph::bind_vst(tape, state.vst, target.vst);
    const ad::Var loss = graph::item_loss<T>(tape, m, alt ? &*alt : nullptr, batch[i], plans.empty() ? nullptr : &plans[i],
                                         scale);
    const double v = static_cast<double>(tape.value(loss)(0, 0));
    if (!std::isfinite(v)) fail_internal("loss_and_grads: non-finite loss at batch index " + std::to_string(i));
    out.loss += v;
    tape.backward(loss);
    std::vector<ad::Var> vars;
    if (target.base) vars = graph::vars_of(m);
    if (target.vst && alt) {
      const auto a = graph::vars_of(*alt);
      vars.insert(vars.end(), a.begin(), a.end());
    }
    for (std::size_t k = 0; k < vars.size(); ++k) {
      const Mat<T>& g = tape.grad(vars[k]);
      if (g.empty()) continue;
      auto dst = out.grads[k].flat();
      auto src = g.flat();
      for (std::size_t e = 0; e < dst.size(); ++e) dst[e] += src[e];
    }
  }
  return out;
}

// Loss only (no tape recording), same scaling as loss_and_grads.
template <class T>
double batch_loss(const Params<T>& base, const VstParams<T>* vst, const std::vector<TaskItem>& batch,
                  const std::vector<CompressionPlan>& plans) {
  std::size_t tokens = 0;
  for (const auto& item : batch) tokens += item.answer.size();
  double total = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    ad::Tape<T> tape(false);
    const auto m = graph::bind(tape, base, false);
    std::optional<graph::BoundAlt> alt;
    if (!plans.empty()) alt = graph::bind_vst(tape, *vst, false);
    const ad::Var loss = graph::item_loss<T>(tape, m, alt ? &*alt : nullptr, batch[i], plans.empty() ? nullptr : &plans[i],
                                         T(1) / static_cast<T>(tokens));
    total += static_cast<double>(tape.value(loss)(0, 0));
  }
  return total;
}

struct BlockError {
  std::string name;
  double max_rel_error = 0;
  std::size_t worst_index = 0;
  double analytic = 0, numeric = 0;  // at the worst entry
  std::size_t entries = 0;
};

struct GradCheckReport {
  std::vector<BlockError> blocks;
  double tolerance = 1e-4;
  bool pass = false;
  std::size_t instances = 0;
};

inline void to_json(nlohmann::json& j, const BlockError& b) {
  j = nlohmann::json{{"block", b.name},         {"max_rel_error", b.max_rel_error}, {"worst_index", b.worst_index},
                     {"analytic", b.analytic}, {"numeric", b.numeric},             {"entries", b.entries}};
}

inline void to_json(nlohmann::json& j, const GradCheckReport& r) {
  j = nlohmann::json{{"pass", r.pass}, {"tolerance", r.tolerance}, {"instances", r.instances}, {"blocks", r.blocks}};
}

struct GradCheckConfig {
  ModelConfig model = [] {
    ModelConfig c;
    c.n_layers = 2;
    c.hidden_size = 16;
    c.query_heads = 2;
    c.kv_heads = 1;
    c.head_dim = 8;
    c.intermediate_size = 24;
    c.vocab_size = 40;
    c.context_window = 64;
    return c;
  }();
  Scope scope = Scope::all;
  std::vector<std::size_t> ratios{1, 2, 4};
  std::size_t instances = 3;
  double h = 1e-5;
  double tolerance = 1e-4;
  double init_std = 0.3;
  std::uint64_t seed = 0;
  // Fault injection: add `delta` to one analytic gradient entry.
  std::optional<std::string> fault_block;
  std::size_t fault_index = 0;
  double fault_delta = 1.0;
};

// Random toy instance: two intervals, a 2-token prompt and a 2-token answer.
inline TaskItem random_grad_item(const ModelConfig& cfg, Rng& rng, std::size_t ratio, CompressionPlan& plan) {
  TaskItem item;
  const std::size_t w1 = 3 + rng.uniform_int(6), w2 = 2 + rng.uniform_int(6);
  for (std::size_t i = 0; i < w1 + w2; ++i) item.stream.push_back(static_cast<std::uint32_t>(rng.uniform_int(cfg.vocab_size)));
  for (int i = 0; i < 2; ++i) item.prompt.push_back(static_cast<std::uint32_t>(rng.uniform_int(cfg.vocab_size)));
  for (int i = 0; i < 2; ++i) item.answer.push_back(static_cast<std::uint32_t>(rng.uniform_int(cfg.vocab_size)));
  plan = CompressionPlan{w1 + w2, {{0, w1, ratio}, {w1, w2, ratio}}};
  return item;
}

inline GradCheckReport grad_check(const GradCheckConfig& cfg) {
  require(cfg.instances >= 1 && !cfg.ratios.empty(), "grad_check: need at least one instance and ratio");
  Rng rng(cfg.seed);
  TrainState<double> state{Params<double>::init(cfg.model, rng, cfg.init_std), {}};
  state.vst = VstParams<double>::init(state.base, rng, cfg.init_std, 0.1);
  const TrainTarget target = TrainTarget::of(cfg.scope);

  GradCheckReport report;
  report.tolerance = cfg.tolerance;
  report.instances = cfg.instances;
  auto blocks = state.blocks(target);
  for (const auto& b : blocks) report.blocks.push_back({b.first, 0, 0, 0, 0, b.second->size()});
  if (cfg.fault_block) {
    const bool known = std::any_of(blocks.begin(), blocks.end(), [&](const auto& b) { return b.first == *cfg.fault_block; });
    require(known, "grad_check: unknown fault block '" + *cfg.fault_block + "'");
  }

  for (std::size_t inst = 0; inst < cfg.instances; ++inst) {
    CompressionPlan plan;
    const TaskItem item = random_grad_item(cfg.model, rng, cfg.ratios[inst % cfg.ratios.size()], plan);
    const std::vector<TaskItem> batch{item};
    const std::vector<CompressionPlan> plans{plan};
    auto lg = loss_and_grads(state, batch, plans, target);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      if (cfg.fault_block && blocks[b].first == *cfg.fault_block) lg.grads[b].flat()[cfg.fault_index] += cfg.fault_delta;
      Mat<double>& w = *blocks[b].second;
      for (std::size_t e = 0; e < w.size(); ++e) {
        double& x = w.flat()[e];
        const double saved = x;
        x = saved + cfg.h;
        const double up = batch_loss(state.base, &state.vst, batch, plans);
        x = saved - cfg.h;
        const double down = batch_loss(state.base, &state.vst, batch, plans);
        x = saved;
        const double fd = (up - down) / (2 * cfg.h);
        const double a = lg.grads[b].flat()[e];
        const double rel = std::abs(a - fd) / (std::abs(fd) + 1e-8);
        auto& be = report.blocks[b];
        if (rel > be.max_rel_error) {
          be.max_rel_error = rel;
          be.worst_index = e;
          be.analytic = a;
          be.numeric = fd;
        }
      }
    }
  }
  report.pass = std::all_of(report.blocks.begin(), report.blocks.end(),
                            [&](const BlockError& b) { return b.max_rel_error < cfg.tolerance; });
  return report;
}

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

struct TrainConfig {
  std::size_t total_steps = 2000;
  double learning_rate = 1e-3;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;
  Scope scope = Scope::vst_only;
  Precision precision = Precision::f64;
  std::size_t batch_size = 1;
  bool cosine_decay = false;
  double grad_clip = 1.0;  // global-norm clip; 0 disables

  void validate() const {
    require(learning_rate > 0, "TrainConfig: learning_rate must be > 0");
    require(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
    require(grad_clip >= 0, "TrainConfig: grad_clip must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"total_steps", c.total_steps},
                     {"learning_rate", c.learning_rate},
                     {"optimizer", c.optimizer.kind == OptimizerKind::adam ? "adam" : "sgd"},
                     {"beta1", c.optimizer.beta1},
                     {"beta2", c.optimizer.beta2},
                     {"eps", c.optimizer.eps},
                     {"seed", c.seed},
                     {"trainable_scope", to_string(c.scope)},
                     {"precision", static_cast<int>(c.precision)},
                     {"batch_size", c.batch_size},
                     {"cosine_decay", c.cosine_decay},
                     {"grad_clip", c.grad_clip}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.total_steps = j.value("total_steps", d.total_steps);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  const std::string opt = j.value("optimizer", std::string("adam"));
  if (opt != "adam" && opt != "sgd") fail_input("TrainConfig: unknown optimizer '" + opt + "'");
  c.optimizer.kind = opt == "adam" ? OptimizerKind::adam : OptimizerKind::sgd;
  c.optimizer.beta1 = j.value("beta1", d.optimizer.beta1);
  c.optimizer.beta2 = j.value("beta2", d.optimizer.beta2);
  c.optimizer.eps = j.value("eps", d.optimizer.eps);
  c.seed = j.value("seed", d.seed);
  c.scope = scope_from_string(j.value("trainable_scope", to_string(d.scope)));
  c.precision = precision_from_code(j.value("precision", static_cast<int>(d.precision)));
  c.batch_size = j.value("batch_size", d.batch_size);
  c.cosine_decay = j.value("cosine_decay", d.cosine_decay);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
  c.validate();
}

template <class T>
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}

  void step(const std::vector<std::pair<std::string, Mat<T>*>>& params, const std::vector<Mat<T>>& grads, double lr,
            double grad_scale = 1.0) {
    require(params.size() == grads.size(), "optimizer: parameter/gradient count mismatch");
    ++t_;
    if (cfg_.kind == OptimizerKind::sgd) {
      for (std::size_t b = 0; b < params.size(); ++b) {
        auto w = params[b].second->flat();
        auto g = grads[b].flat();
        for (std::size_t e = 0; e < w.size(); ++e) w[e] -= static_cast<T>(lr * grad_scale * g[e]);
      }
      return;
    }
    if (m_.empty())
      for (const auto& g : grads) {
        m_.emplace_back(g.rows(), g.cols());
        v_.emplace_back(g.rows(), g.cols());
      }
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t b = 0; b < params.size(); ++b) {
      auto w = params[b].second->flat();
      auto g = grads[b].flat();
      auto m = m_[b].flat();
      auto v = v_[b].flat();
      for (std::size_t e = 0; e < w.size(); ++e) {
        const double ge = grad_scale * static_cast<double>(g[e]);
        m[e] = static_cast<T>(cfg_.beta1 * m[e] + (1 - cfg_.beta1) * ge);
        v[e] = static_cast<T>(cfg_.beta2 * v[e] + (1 - cfg_.beta2) * ge * ge);
        w[e] -= static_cast<T>(lr * (m[e] / c1) / (std::sqrt(v[e] / c2) + cfg_.eps));
      }
    }
  }

 private:
  OptimizerConfig cfg_;
  std::uint64_t t_ = 0;
  std::vector<Mat<T>> m_, v_;
};

// Lazily generated, index-addressed training items.
struct TaskDataset {
  std::size_t size = 0;
  std::function<TaskItem(std::size_t)> item;
};

struct CurvePoint {
  std::size_t step = 0;
  std::size_t ratio = 0;  // 0 for full-attention steps
  double loss = 0;
  double grad_norm = 0;
};

inline void write_loss_csv(std::ostream& os, const std::vector<CurvePoint>& curve) {
  os << "step,ratio_sampled,loss,grad_norm\n";
  os.precision(17);
  for (const auto& p : curve) os << p.step << ',' << p.ratio << ',' << p.loss << ',' << p.grad_norm << '\n';
}

inline double mean_loss(const std::vector<CurvePoint>& curve, std::size_t begin, std::size_t end) {
  end = std::min(end, curve.size());
  require(begin < end, "mean_loss: empty window");
  double s = 0;
  for (std::size_t i = begin; i < end; ++i) s += curve[i].loss;
  return s / static_cast<double>(end - begin);
}

template <class T>
struct TrainResult {
  TrainState<T> state;
  std::vector<CurvePoint> curve;
};

using StepHook = std::function<void(const CurvePoint&)>;

namespace detail {

inline std::vector<TaskItem> draw_batch(const TaskDataset& data, std::uint64_t seed, std::size_t step, std::size_t n) {
  Rng rng = Rng::derive(seed ^ 0xba7c4ULL, step);
  std::vector<TaskItem> batch;
  for (std::size_t i = 0; i < n; ++i) batch.push_back(data.item(rng.uniform_int(data.size)));
  return batch;
}

inline double lr_at(const TrainConfig& cfg, std::size_t step) {
  if (!cfg.cosine_decay || cfg.total_steps <= 1) return cfg.learning_rate;
  const double frac = static_cast<double>(step) / static_cast<double>(cfg.total_steps - 1);
  return cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

// Shared optimizer loop. `compute(step, ratio_out)` returns loss and grads.
template <class T, class Compute>
std::vector<CurvePoint> train_loop(TrainState<T>& state, TrainTarget target, const TrainConfig& cfg, Compute&& compute,
                                   const StepHook& hook) {
  cfg.validate();
  Optimizer<T> opt(cfg.optimizer);
  const auto blocks = state.blocks(target);
  std::vector<CurvePoint> curve;
  for (std::size_t step = 0; step < cfg.total_steps; ++step) {
    std::size_t ratio = 0;
    LossGrads<T> lg = compute(step, ratio);
    if (!std::isfinite(lg.loss) || lg.loss > 1e3)
      fail_internal("training diverged at step " + std::to_string(step) + " (loss " + std::to_string(lg.loss) + ")");
    const double norm = lg.norm();
    const double scale = cfg.grad_clip > 0 && norm > cfg.grad_clip ? cfg.grad_clip / norm : 1.0;
    opt.step(blocks, lg.grads, lr_at(cfg, step), scale);
    curve.push_back({step, ratio, lg.loss, norm});
    if (hook) hook(curve.back());
  }
  return curve;
}

}  // namespace detail

// Summary-token training: sample ratio -> plan -> encode -> decode -> loss -> update.
// `data_for(step)` picks the dataset each step draws from.
template <class T, class DataFor>
TrainResult<T> run_training_with(DataFor data_for, const CurriculumSchedule& schedule, const TrainConfig& cfg,
                                 TrainState<T> state, const PartitionPolicy& policy, const StepHook& hook = {}) {
  if (cfg.total_steps > 0) {
    schedule.validate();
    require(schedule.total_steps() >= cfg.total_steps, "run_training: schedule covers " +
                                                           std::to_string(schedule.total_steps()) + " steps, config asks for " +
                                                           std::to_string(cfg.total_steps));
  }
  state.vst.check_against(state.base);
  const TrainTarget target = TrainTarget::of(cfg.scope);
  auto compute = [&](std::size_t step, std::size_t& ratio) {
    const TaskDataset& data = data_for(step);
    require(data.size > 0, "run_training: empty dataset");
    ratio = sample_ratio(schedule, step, cfg.seed);
    const auto batch = detail::draw_batch(data, cfg.seed, step, cfg.batch_size);
    std::vector<CompressionPlan> plans;
    for (const auto& item : batch) plans.push_back(policy.plan(item, ratio));
    return loss_and_grads(state, batch, plans, target);
  };
  auto curve = detail::train_loop(state, target, cfg, compute, hook);
  return {std::move(state), std::move(curve)};
}

template <class T>
TrainResult<T> run_training(const TaskDataset& data, const CurriculumSchedule& schedule, const TrainConfig& cfg,
                            TrainState<T> state, const PartitionPolicy& policy, const StepHook& hook = {}) {
  if (cfg.total_steps > 0) require(data.size > 0, "run_training: empty dataset");
  return run_training_with([&](std::size_t) -> const TaskDataset& { return data; }, schedule, cfg, std::move(state),
                           policy, hook);
}

// Base-model pretraining on the same items with full attention and no
// summary tokens; every base block is trainable.
template <class T>
TrainResult<T> pretrain_base(const TaskDataset& data, const TrainConfig& cfg, TrainState<T> state,
                             const StepHook& hook = {}) {
  if (cfg.total_steps > 0) require(data.size > 0, "pretrain_base: empty dataset");
  const TrainTarget target{true, false};
  auto compute = [&](std::size_t step, std::size_t& ratio) {
    ratio = 0;
    return loss_and_grads(state, detail::draw_batch(data, cfg.seed, step, cfg.batch_size), {}, target);
  };
  auto curve = detail::train_loop(state, target, cfg, compute, hook);
  return {std::move(state), std::move(curve)};
}

}  // namespace vxl
