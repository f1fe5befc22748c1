#pragma once

// Closed-form forward FLOPs and KV-cache memory for full attention and for
// chunked summary-token compression. All arithmetic is exact u64 with
// overflow detection.

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vxl/compressor.hpp"
#include "vxl/model.hpp"
#include "vxl/partitioner.hpp"

namespace vxl {

namespace detail {

inline std::uint64_t checked_mul(std::initializer_list<std::uint64_t> xs) {
  std::uint64_t r = 1;
  for (auto x : xs)
    if (__builtin_mul_overflow(r, x, &r)) fail_input("cost model: FLOP count overflows 64 bits");
  return r;
}

inline std::uint64_t checked_add(std::uint64_t a, std::uint64_t b) {
  std::uint64_t r;
  if (__builtin_add_overflow(a, b, &r)) fail_input("cost model: FLOP count overflows 64 bits");
  return r;
}

}  // namespace detail

struct CostInputs {
  std::uint64_t s = 0;      // input length
  std::uint64_t s_pst = 0;  // cached length
  std::uint64_t q_heads = 0, kv_heads = 0, head_dim = 0;
  std::uint64_t hidden = 0, intermediate = 0, vocab = 0;
  std::uint64_t n_layers = 0;

  static CostInputs from(const ModelConfig& c, std::uint64_t s, std::uint64_t s_pst = 0) {
    return {s, s_pst, c.query_heads, c.kv_heads, c.head_dim, c.hidden_size, c.intermediate_size, c.vocab_size, c.n_layers};
  }
};

struct CostOptions {
  // Use h^q * s * (s + s_pst) for the softmax term instead of the printed
  // h^q * (s + s_pst)^2.
  bool corrected_softmax_flops = false;
};

struct CostReport {
  std::uint64_t qkv = 0, qk = 0, soft = 0, av = 0, out = 0;
  std::uint64_t up = 0, gate = 0, down = 0, lm = 0;
  std::uint64_t n_layers = 1;
  bool approximation = false;   // ceil applied where the closed form expects exact division
  bool exceeds_window = false;  // some pass is longer than the model's context window

  std::uint64_t attention() const {
    std::uint64_t r = 0;
    for (auto x : {qkv, qk, soft, av, out}) r = detail::checked_add(r, x);
    return r;
  }
  std::uint64_t other() const {
    std::uint64_t r = 0;
    for (auto x : {up, gate, down, lm}) r = detail::checked_add(r, x);
    return r;
  }
  // Attention and MLP terms repeat per layer; the LM head runs once.
  std::uint64_t total() const {
    std::uint64_t per_layer = attention();
    for (auto x : {up, gate, down}) per_layer = detail::checked_add(per_layer, x);
    return detail::checked_add(detail::checked_mul({n_layers, per_layer}), lm);
  }
};

inline void to_json(nlohmann::json& j, const CostReport& r) {
  j = nlohmann::json{{"F_qkv", r.qkv},   {"F_qk", r.qk},       {"F_soft", r.soft},
                     {"F_av", r.av},     {"F_out", r.out},     {"F_up", r.up},
                     {"F_gate", r.gate}, {"F_down", r.down},   {"F_lm", r.lm},
                     {"F_att", r.attention()}, {"F_oth", r.other()}, {"n_layers", r.n_layers},
                     {"total", r.total()},     {"approximation", r.approximation},
                     {"exceeds_window", r.exceeds_window}};
}

struct AttentionTerms {
  std::uint64_t qkv, qk, soft, av, out;
};

inline AttentionTerms flops_attention(const CostInputs& ci, const CostOptions& opt = {}) {
  using detail::checked_add;
  using detail::checked_mul;
  const std::uint64_t span = checked_add(ci.s, ci.s_pst);
  AttentionTerms t{};
  t.qkv = checked_add(checked_mul({2, ci.s, ci.hidden, ci.head_dim, ci.q_heads}),
                      checked_mul({2, 2, ci.s, ci.hidden, ci.head_dim, ci.kv_heads}));
  t.qk = checked_mul({2, ci.q_heads, ci.s, span, ci.head_dim});
  t.soft = opt.corrected_softmax_flops ? checked_mul({ci.q_heads, ci.s, span}) : checked_mul({ci.q_heads, span, span});
  t.av = checked_mul({2, ci.q_heads, ci.s, span, ci.head_dim});
  t.out = checked_mul({2, ci.s, ci.head_dim, ci.q_heads, ci.hidden});
  return t;
}

struct OtherTerms {
  std::uint64_t up, gate, down, lm;
};

inline OtherTerms flops_other(const CostInputs& ci) {
  using detail::checked_mul;
  return {checked_mul({2, ci.s, ci.hidden, 2, ci.intermediate}), checked_mul({ci.s, ci.intermediate}),
          checked_mul({2, ci.s, ci.hidden, ci.intermediate}), checked_mul({2, ci.s, ci.hidden, ci.vocab})};
}

namespace detail {

inline void add_attention(CostReport& r, const AttentionTerms& t) {
  r.qkv = checked_add(r.qkv, t.qkv);
  r.qk = checked_add(r.qk, t.qk);
  r.soft = checked_add(r.soft, t.soft);
  r.av = checked_add(r.av, t.av);
  r.out = checked_add(r.out, t.out);
}

inline void set_other(CostReport& r, const OtherTerms& t) {
  r.up = t.up;
  r.gate = t.gate;
  r.down = t.down;
  r.lm = t.lm;
}

}  // namespace detail

// One pass of s new tokens over s_pst cached ones.
inline CostReport flops_pass(const ModelConfig& cfg, std::uint64_t s, std::uint64_t s_pst, const CostOptions& opt = {}) {
  const auto ci = CostInputs::from(cfg, s, s_pst);
  CostReport r;
  r.n_layers = cfg.n_layers;
  detail::add_attention(r, flops_attention(ci, opt));
  detail::set_other(r, flops_other(ci));
  r.exceeds_window = s > cfg.context_window;
  return r;
}

inline CostReport flops_full(std::uint64_t n, const ModelConfig& cfg, const CostOptions& opt = {}) {
  return flops_pass(cfg, n, 0, opt);
}

// ceil(n/w) chunks of (w + ceil(w/a)) tokens; chunk i sees (i-1)*ceil(w/a)
// cached rows; the MLP and head run over n + ceil(n/a) tokens.
inline CostReport flops_compressed(std::uint64_t n, std::uint64_t w, std::uint64_t alpha, const ModelConfig& cfg,
                                   const CostOptions& opt = {}) {
  require(w >= 1, "flops_compressed: interval width must be >= 1");
  require(alpha >= 1, "flops_compressed: ratio must be >= 1");
  CostReport r;
  r.n_layers = cfg.n_layers;
  const std::uint64_t chunks = (n + w - 1) / w;
  const std::uint64_t k = (w + alpha - 1) / alpha;
  r.approximation = w % alpha != 0 || (n > 0 && n % w != 0);
  const std::uint64_t chunk_len = detail::checked_add(w, k);
  r.exceeds_window = n > 0 && chunk_len > cfg.context_window;
  for (std::uint64_t i = 0; i < chunks; ++i)
    detail::add_attention(r, flops_attention(CostInputs::from(cfg, chunk_len, detail::checked_mul({i, k})), opt));
  const std::uint64_t s_oth = detail::checked_add(n, (n + alpha - 1) / alpha);
  detail::set_other(r, flops_other(CostInputs::from(cfg, s_oth)));
  return r;
}

struct MemoryReport {
  std::uint64_t kv_rows_full = 0;
  std::uint64_t kv_rows_compressed = 0;
  std::uint64_t bytes_full = 0;
  std::uint64_t bytes_compressed = 0;
  double reduction = 0;  // rows_full / rows_compressed
};

inline void to_json(nlohmann::json& j, const MemoryReport& m) {
  j = nlohmann::json{{"kv_rows_full", m.kv_rows_full},
                     {"kv_rows_compressed", m.kv_rows_compressed},
                     {"bytes_full", m.bytes_full},
                     {"bytes_compressed", m.bytes_compressed},
                     {"reduction", m.reduction}};
}

inline MemoryReport kv_memory(std::uint64_t n, const CompressionPlan& plan, const ModelConfig& cfg,
                              std::uint64_t bytes_per_elem) {
  plan.validate();
  require(plan.total_len == n, "kv_memory: plan covers " + std::to_string(plan.total_len) + " tokens, expected " +
                                   std::to_string(n));
  MemoryReport m;
  m.kv_rows_full = n;
  m.kv_rows_compressed = plan.total_vsts();
  auto bytes = [&](std::uint64_t rows) {
    return detail::checked_mul({rows, 2, cfg.kv_heads, cfg.head_dim, bytes_per_elem, cfg.n_layers});
  };
  m.bytes_full = bytes(m.kv_rows_full);
  m.bytes_compressed = bytes(m.kv_rows_compressed);
  m.reduction = m.kv_rows_compressed == 0 ? 0.0
                                          : static_cast<double>(m.kv_rows_full) / static_cast<double>(m.kv_rows_compressed);
  return m;
}

// Sweep CSV over lengths, fixed interval width and uniform ratio.
inline void write_cost_sweep_csv(std::ostream& os, const std::vector<std::uint64_t>& lengths, std::uint64_t w,
                                 std::uint64_t alpha, const ModelConfig& cfg, const CostOptions& opt = {}) {
  os << "n,flops_full,flops_compressed,kv_rows_full,kv_rows_compressed\n";
  for (auto n : lengths) {
    const auto mem = kv_memory(n, fixed_partition(n, w, alpha), cfg, 8);
    os << n << ',' << flops_full(n, cfg, opt).total() << ',' << flops_compressed(n, w, alpha, cfg, opt).total() << ','
       << mem.kv_rows_full << ',' << mem.kv_rows_compressed << '\n';
  }
}

}  // namespace vxl
