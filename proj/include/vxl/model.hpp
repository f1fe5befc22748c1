#pragma once

// Toy decoder-only transformer: pre-norm blocks, rotary positions on Q/K,
// grouped-query attention, gated (SiLU) MLP, untied output head.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vxl/autodiff.hpp"
#include "vxl/numerics.hpp"
#include "vxl/tensor_io.hpp"

namespace vxl {

using TokenIds = std::vector<std::uint32_t>;

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t hidden_size = 64;
  std::size_t query_heads = 4;
  std::size_t kv_heads = 4;
  std::size_t head_dim = 16;
  std::size_t intermediate_size = 192;
  std::size_t vocab_size = 512;
  std::size_t context_window = 512;
  Precision precision = Precision::f64;

  std::size_t kv_width() const noexcept { return kv_heads * head_dim; }

  void validate() const {
    require(n_layers >= 1, "ModelConfig: n_layers must be >= 1");
    require(query_heads >= 1 && kv_heads >= 1 && head_dim >= 2 && head_dim % 2 == 0,
            "ModelConfig: heads must be >= 1 and head_dim even");
    require(hidden_size == query_heads * head_dim, "ModelConfig: hidden_size must equal query_heads * head_dim");
    require(query_heads % kv_heads == 0, "ModelConfig: query_heads must be divisible by kv_heads");
    require(intermediate_size >= 1 && vocab_size >= 2, "ModelConfig: intermediate_size >= 1 and vocab_size >= 2");
    require(context_window >= 2, "ModelConfig: context_window must be >= 2");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},
                     {"hidden_size", c.hidden_size},
                     {"query_heads", c.query_heads},
                     {"kv_heads", c.kv_heads},
                     {"head_dim", c.head_dim},
                     {"intermediate_size", c.intermediate_size},
                     {"vocab_size", c.vocab_size},
                     {"context_window", c.context_window},
                     {"precision", static_cast<int>(c.precision)}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.n_layers = j.value("n_layers", d.n_layers);
  c.hidden_size = j.value("hidden_size", d.hidden_size);
  c.query_heads = j.value("query_heads", d.query_heads);
  c.kv_heads = j.value("kv_heads", d.kv_heads);
  c.head_dim = j.value("head_dim", d.head_dim);
  c.intermediate_size = j.value("intermediate_size", d.intermediate_size);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.context_window = j.value("context_window", d.context_window);
  c.precision = precision_from_code(j.value("precision", static_cast<int>(d.precision)));
  c.validate();
}

template <class T>
struct LayerWeights {
  Mat<T> wq, wk, wv, wo;          // D x hq*d, D x hk*d, D x hk*d, hq*d x D
  Mat<T> w_up, w_gate, w_down;    // D x I, D x I, I x D
  Mat<T> attn_norm, mlp_norm;     // 1 x D
};

template <class T>
struct Params {
  ModelConfig config;
  Mat<T> embed;  // V x D
  std::vector<LayerWeights<T>> layers;
  Mat<T> final_norm;  // 1 x D
  Mat<T> lm_head;     // D x V

  static Params init(const ModelConfig& cfg, Rng& rng, double std = 0.02) {
    cfg.validate();
    Params p;
    p.config = cfg;
    const std::size_t D = cfg.hidden_size;
    p.embed = random_normal<T>(cfg.vocab_size, D, std, rng);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      LayerWeights<T> w;
      w.wq = random_normal<T>(D, cfg.query_heads * cfg.head_dim, std, rng);
      w.wk = random_normal<T>(D, cfg.kv_width(), std, rng);
      w.wv = random_normal<T>(D, cfg.kv_width(), std, rng);
      w.wo = random_normal<T>(cfg.query_heads * cfg.head_dim, D, std, rng);
      w.w_up = random_normal<T>(D, cfg.intermediate_size, std, rng);
      w.w_gate = random_normal<T>(D, cfg.intermediate_size, std, rng);
      w.w_down = random_normal<T>(cfg.intermediate_size, D, std, rng);
      w.attn_norm = Mat<T>(1, D, T(1));
      w.mlp_norm = Mat<T>(1, D, T(1));
      p.layers.push_back(std::move(w));
    }
    p.final_norm = Mat<T>(1, D, T(1));
    p.lm_head = random_normal<T>(D, cfg.vocab_size, std, rng);
    return p;
  }

  // Visits every tensor under a stable name, in serialization order.
  template <class Self, class Fn>
  static void visit(Self& self, Fn&& fn) {
    fn(std::string("embed"), self.embed);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      auto& w = self.layers[l];
      const std::string p = "L" + std::to_string(l) + ".";
      fn(p + "wq", w.wq);
      fn(p + "wk", w.wk);
      fn(p + "wv", w.wv);
      fn(p + "wo", w.wo);
      fn(p + "w_up", w.w_up);
      fn(p + "w_gate", w.w_gate);
      fn(p + "w_down", w.w_down);
      fn(p + "attn_norm", w.attn_norm);
      fn(p + "mlp_norm", w.mlp_norm);
    }
    fn(std::string("final_norm"), self.final_norm);
    fn(std::string("lm_head"), self.lm_head);
  }
  template <class Fn>
  void for_each(Fn&& fn) {
    visit(*this, fn);
  }
  template <class Fn>
  void for_each(Fn&& fn) const {
    visit(*this, fn);
  }

  template <class U>
  Params<U> cast() const {
    Params<U> out;
    out.config = config;
    out.embed = embed.template cast<U>();
    for (const auto& w : layers)
      out.layers.push_back({w.wq.template cast<U>(), w.wk.template cast<U>(), w.wv.template cast<U>(),
                            w.wo.template cast<U>(), w.w_up.template cast<U>(), w.w_gate.template cast<U>(),
                            w.w_down.template cast<U>(), w.attn_norm.template cast<U>(), w.mlp_norm.template cast<U>()});
    out.final_norm = final_norm.template cast<U>();
    out.lm_head = lm_head.template cast<U>();
    return out;
  }
};

// Raw key/value activations for one layer (keys are stored post-rotation).
template <class T>
struct LayerKvCache {
  Mat<T> keys;
  Mat<T> values;
  std::vector<std::int64_t> positions;

  std::size_t size() const noexcept { return positions.size(); }
};

namespace graph {

using ad::Tape;
using ad::Var;

struct BoundLayer {
  Var wq, wk, wv, wo, w_up, w_gate, w_down, attn_norm, mlp_norm;
};
struct BoundModel {
  const ModelConfig* config = nullptr;
  Var embed;
  std::vector<BoundLayer> layers;
  Var final_norm, lm_head;
};
// Alternate attention projections used for summary-token rows.
struct BoundAltLayer {
  Var wq, wk, wv, wo;
};
struct BoundAlt {
  Var embed;  // 1 x D
  std::vector<BoundAltLayer> layers;
};

template <class T>
BoundModel bind(Tape<T>& tape, const Params<T>& p, bool trainable) {
  auto b = [&](const Mat<T>& m) { return trainable ? tape.param(m) : tape.constant(m); };
  BoundModel m;
  m.config = &p.config;
  m.embed = b(p.embed);
  for (const auto& w : p.layers)
    m.layers.push_back({b(w.wq), b(w.wk), b(w.wv), b(w.wo), b(w.w_up), b(w.w_gate), b(w.w_down), b(w.attn_norm),
                        b(w.mlp_norm)});
  m.final_norm = b(p.final_norm);
  m.lm_head = b(p.lm_head);
  return m;
}

struct LayerKv {
  Var keys, values;
};

// Marker id for a summary-token slot in PassInput::ids.
inline constexpr std::int64_t kAltSlot = -1;

struct PassInput {
  std::vector<std::int64_t> ids;  // token ids, or kAltSlot
  std::vector<std::int64_t> positions;
};

struct PassOutput {
  Var hidden;                  // rows x D after the last block
  std::vector<LayerKv> fresh;  // per layer, this pass's K (rotated) and V rows
};

// One causal pass over `in` attending to `cache` (every cached row visible)
// and to earlier rows of the same pass.
template <class T>
PassOutput run_pass(Tape<T>& tape, const BoundModel& m, const BoundAlt* alt, const std::vector<LayerKv>& cache,
                    const PassInput& in) {
  const ModelConfig& cfg = *m.config;
  const std::size_t n = in.ids.size();
  require(n == in.positions.size(), "run_pass: ids/positions mismatch");
  require(cache.size() == cfg.n_layers, "run_pass: cache layer count " + std::to_string(cache.size()) +
                                            " != n_layers " + std::to_string(cfg.n_layers));

  std::vector<std::uint32_t> raw_rows, alt_rows, raw_ids;
  for (std::size_t i = 0; i < n; ++i) {
    if (in.ids[i] == kAltSlot) {
      alt_rows.push_back(static_cast<std::uint32_t>(i));
    } else {
      require(in.ids[i] >= 0 && static_cast<std::size_t>(in.ids[i]) < cfg.vocab_size,
              "token id " + std::to_string(in.ids[i]) + " outside vocab " + std::to_string(cfg.vocab_size));
      raw_rows.push_back(static_cast<std::uint32_t>(i));
      raw_ids.push_back(static_cast<std::uint32_t>(in.ids[i]));
    }
  }
  require(alt_rows.empty() || alt, "run_pass: summary slots present but no summary parameters bound");
  const bool mixed = !alt_rows.empty();

  // Applies `raw_w` to raw rows and `alt_w` to summary rows.
  auto project = [&](Var x, Var raw_w, Var alt_w) {
    if (!mixed) return tape.matmul(x, raw_w);
    std::vector<std::pair<Var, std::vector<std::uint32_t>>> parts;
    if (!raw_rows.empty()) parts.push_back({tape.matmul(tape.gather_rows(x, raw_rows), raw_w), raw_rows});
    parts.push_back({tape.matmul(tape.gather_rows(x, alt_rows), alt_w), alt_rows});
    return tape.scatter_rows(n, std::move(parts));
  };

  Var h;
  if (!mixed) {
    h = tape.gather_rows(m.embed, raw_ids);
  } else {
    std::vector<std::pair<Var, std::vector<std::uint32_t>>> parts;
    if (!raw_rows.empty()) parts.push_back({tape.gather_rows(m.embed, raw_ids), raw_rows});
    parts.push_back({tape.gather_rows(alt->embed, std::vector<std::uint32_t>(alt_rows.size(), 0)), alt_rows});
    h = tape.scatter_rows(n, std::move(parts));
  }

  std::size_t n_cache = 0;
  if (!cache.empty()) n_cache = tape.value(cache.front().keys).rows();
  ad::KeyLimits limits(n);
  for (std::size_t i = 0; i < n; ++i) limits[i] = static_cast<std::uint32_t>(n_cache + i + 1);

  PassOutput out;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const BoundLayer& w = m.layers[l];
    const BoundAltLayer* a = mixed ? &alt->layers[l] : nullptr;
    require(tape.value(cache[l].keys).rows() == n_cache, "run_pass: ragged cache across layers");

    const Var hn = tape.rms_norm(h, w.attn_norm);
    std::optional<OpTerm> term(std::in_place, tape.counter(), "qkv");
    Var q = project(hn, w.wq, a ? a->wq : Var{});
    Var k = project(hn, w.wk, a ? a->wk : Var{});
    const Var v = project(hn, w.wv, a ? a->wv : Var{});
    q = tape.rope(q, in.positions, cfg.head_dim);
    k = tape.rope(k, in.positions, cfg.head_dim);
    out.fresh.push_back({k, v});

    const Var keys = tape.concat_rows(cache[l].keys, k);
    const Var values = tape.concat_rows(cache[l].values, v);
    const Var att = tape.attention(q, keys, values, limits, cfg.query_heads, cfg.kv_heads, cfg.head_dim);
    term.emplace(tape.counter(), "out");
    h = tape.add(h, project(att, w.wo, a ? a->wo : Var{}));

    const Var hn2 = tape.rms_norm(h, w.mlp_norm);
    term.emplace(tape.counter(), "up");  // gate and up projections together
    const Var gated = tape.mul(tape.silu(tape.matmul(hn2, w.w_gate)), tape.matmul(hn2, w.w_up));
    term.emplace(tape.counter(), "down");
    h = tape.add(h, tape.matmul(gated, w.w_down));
    term.reset();
    if (!all_finite(tape.value(h))) fail_internal("non-finite activation after layer " + std::to_string(l));
  }
  out.hidden = h;
  return out;
}

template <class T>
Var logits(Tape<T>& tape, const BoundModel& m, Var hidden) {
  OpTerm term(tape.counter(), "lm");
  return tape.matmul(tape.rms_norm(hidden, m.final_norm), m.lm_head);
}

template <class T>
std::vector<LayerKv> empty_cache(Tape<T>& tape, const ModelConfig& cfg) {
  std::vector<LayerKv> c;
  for (std::size_t l = 0; l < cfg.n_layers; ++l)
    c.push_back({tape.constant(Mat<T>(0, cfg.kv_width())), tape.constant(Mat<T>(0, cfg.kv_width()))});
  return c;
}

inline PassInput plain_input(const TokenIds& ids, std::int64_t first_position) {
  PassInput in;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    in.ids.push_back(ids[i]);
    in.positions.push_back(first_position + static_cast<std::int64_t>(i));
  }
  return in;
}

}  // namespace graph

// Full causal attention over `ids` with positions [first_position, ...).
template <class T>
Mat<T> forward_full(const Params<T>& params, const TokenIds& ids, OpCounter* counter = nullptr,
                    std::int64_t first_position = 0) {
  const auto& cfg = params.config;
  if (ids.size() > cfg.context_window)
    fail_input("forward_full: length " + std::to_string(ids.size()) + " exceeds context window " +
               std::to_string(cfg.context_window));
  if (ids.empty()) return Mat<T>(0, cfg.vocab_size);
  ad::Tape<T> tape(false, counter);
  const auto m = graph::bind(tape, params, false);
  const auto cache = graph::empty_cache(tape, cfg);
  const auto out = graph::run_pass<T>(tape, m, nullptr, cache, graph::plain_input(ids, first_position));
  return tape.value(graph::logits(tape, m, out.hidden));
}

template <class T>
std::vector<LayerKvCache<T>> empty_kv_caches(const ModelConfig& cfg) {
  std::vector<LayerKvCache<T>> c(cfg.n_layers);
  for (auto& l : c) {
    l.keys = Mat<T>(0, cfg.kv_width());
    l.values = Mat<T>(0, cfg.kv_width());
  }
  return c;
}

// Runs `new_ids` against `caches` and appends their K/V rows. New positions
// continue after the last cached position unless `first_position` is given.
template <class T>
Mat<T> forward_step(const Params<T>& params, std::vector<LayerKvCache<T>>& caches, const TokenIds& new_ids,
                    std::optional<std::int64_t> first_position = std::nullopt, OpCounter* counter = nullptr) {
  const auto& cfg = params.config;
  require(caches.size() == cfg.n_layers, "forward_step: cache has " + std::to_string(caches.size()) +
                                             " layers, model has " + std::to_string(cfg.n_layers));
  const auto& pos = caches.front().positions;
  for (const auto& c : caches) {
    require(c.keys.rows() == c.size() && c.values.rows() == c.size(), "forward_step: cache rows/positions mismatch");
    require(c.positions == pos, "forward_step: layers disagree on cached positions");
  }
  for (std::size_t i = 1; i < pos.size(); ++i)
    if (pos[i] <= pos[i - 1]) fail_input("forward_step: cached positions are not strictly increasing");
  const std::int64_t next = pos.empty() ? 0 : pos.back() + 1;
  const std::int64_t start = first_position.value_or(next);
  if (!pos.empty() && start <= pos.back())
    fail_input("forward_step: position conflict, new position " + std::to_string(start) + " <= cached " +
               std::to_string(pos.back()));
  if (pos.size() + new_ids.size() > cfg.context_window)
    fail_input("forward_step: context of " + std::to_string(pos.size() + new_ids.size()) + " exceeds window " +
               std::to_string(cfg.context_window));
  if (new_ids.empty()) return Mat<T>(0, cfg.vocab_size);

  ad::Tape<T> tape(false, counter);
  const auto m = graph::bind(tape, params, false);
  std::vector<graph::LayerKv> bound;
  for (const auto& c : caches) bound.push_back({tape.constant(c.keys), tape.constant(c.values)});
  const auto input = graph::plain_input(new_ids, start);
  const auto out = graph::run_pass<T>(tape, m, nullptr, bound, input);
  Mat<T> result = tape.value(graph::logits(tape, m, out.hidden));
  for (std::size_t l = 0; l < caches.size(); ++l) {
    caches[l].keys.append_rows(tape.value(out.fresh[l].keys));
    caches[l].values.append_rows(tape.value(out.fresh[l].values));
    caches[l].positions.insert(caches[l].positions.end(), input.positions.begin(), input.positions.end());
  }
  return result;
}

// Mean negative log-likelihood of `targets` under row-wise softmax(logits).
template <class T>
T cross_entropy(const Mat<T>& logits, const TokenIds& targets) {
  require(logits.rows() == targets.size(), "cross_entropy: " + std::to_string(logits.rows()) + " logit rows vs " +
                                               std::to_string(targets.size()) + " targets");
  if (targets.empty()) return T(0);
  T total = T(0);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] >= logits.cols())
      fail_input("cross_entropy: target id " + std::to_string(targets[i]) + " >= vocab " + std::to_string(logits.cols()));
    total += ad::Tape<T>::row_nll(logits.row(i), targets[i]);
  }
  const T loss = total / static_cast<T>(targets.size());
  if (!std::isfinite(loss)) fail_internal("cross_entropy: non-finite loss");
  return loss;
}

template <class T>
std::uint32_t argmax_row(std::span<const T> row) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i)
    if (row[i] > row[best]) best = i;
  return static_cast<std::uint32_t>(best);
}

// ---- serialization: <prefix>.json manifest + <prefix>.bin VXT1 records ----

template <class T>
void save_params(const std::filesystem::path& prefix, const Params<T>& p) {
  nlohmann::json manifest;
  manifest["config"] = p.config;
  manifest["tensors"] = nlohmann::json::array();
  std::ofstream bin(prefix.string() + ".bin", std::ios::binary);
  if (!bin) fail_input("cannot write " + prefix.string() + ".bin");
  p.for_each([&](const std::string& name, const Mat<T>& m) {
    manifest["tensors"].push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
    io::write_tensor(bin, m, p.config.precision);
  });
  std::ofstream js(prefix.string() + ".json");
  if (!js) fail_input("cannot write " + prefix.string() + ".json");
  js << manifest.dump(2) << "\n";
}

template <class T>
Params<T> load_params(const std::filesystem::path& prefix) {
  std::ifstream js(prefix.string() + ".json");
  if (!js) fail_input("cannot open " + prefix.string() + ".json");
  const auto manifest = nlohmann::json::parse(js);
  const ModelConfig cfg = manifest.at("config").get<ModelConfig>();
  Rng rng(0);
  Params<T> p = Params<T>::init(cfg, rng);
  std::ifstream bin(prefix.string() + ".bin", std::ios::binary);
  if (!bin) fail_input("cannot open " + prefix.string() + ".bin");
  std::size_t i = 0;
  const auto& tensors = manifest.at("tensors");
  p.for_each([&](const std::string& name, Mat<T>& m) {
    require(i < tensors.size() && tensors[i].at("name") == name, "params manifest: expected tensor " + name);
    Mat<T> loaded = io::read_tensor<T>(bin);
    require(loaded.rows() == m.rows() && loaded.cols() == m.cols(), "params: tensor " + name + " has shape " +
                                                                         loaded.shape() + ", expected " + m.shape());
    m = std::move(loaded);
    ++i;
  });
  return p;
}

}  // namespace vxl
