#pragma once

// Summary-token KV compression. Each interval of raw tokens gets one
// summary token (VST) after every `ratio` raw tokens; the interval is
// encoded in a single pass where summary rows use their own Q/K/V/O
// projections, and afterwards only the summary rows' keys/values are kept.
// Later intervals and the decoded prompt attend to that accumulated cache.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vxl/model.hpp"

namespace vxl {

struct Interval {
  std::size_t start = 0;
  std::size_t width = 0;
  std::size_t ratio = 1;

  // ceil(width / ratio): a short tail group still gets its own summary token.
  std::size_t vst_count() const noexcept { return ratio == 0 ? 0 : (width + ratio - 1) / ratio; }
  std::size_t chunk_len() const noexcept { return width + vst_count(); }
  bool operator==(const Interval&) const = default;
};

struct CompressionPlan {
  std::size_t total_len = 0;
  std::vector<Interval> intervals;

  std::size_t total_vsts() const {
    std::size_t k = 0;
    for (const auto& iv : intervals) k += iv.vst_count();
    return k;
  }

  // Contiguous tiling of [0, total_len), ratios >= 1, and (when a window is
  // given) every interval plus its summary tokens fits the window.
  void validate(std::size_t context_window = 0) const {
    std::size_t cursor = 0;
    for (std::size_t i = 0; i < intervals.size(); ++i) {
      const auto& iv = intervals[i];
      const std::string at = "plan interval " + std::to_string(i);
      require(iv.start == cursor, at + ": starts at " + std::to_string(iv.start) + ", expected " + std::to_string(cursor));
      require(iv.width >= 1, at + ": empty interval");
      require(iv.ratio >= 1, at + ": ratio must be >= 1");
      if (context_window > 0)
        require(iv.chunk_len() <= context_window, at + ": width " + std::to_string(iv.width) + " plus " +
                                                      std::to_string(iv.vst_count()) + " summary tokens exceeds window " +
                                                      std::to_string(context_window));
      cursor += iv.width;
    }
    require(cursor == total_len, "plan covers " + std::to_string(cursor) + " tokens, total_len is " +
                                     std::to_string(total_len));
  }

  bool operator==(const CompressionPlan&) const = default;
};

inline void to_json(nlohmann::json& j, const CompressionPlan& p) {
  j = nlohmann::json{{"total_len", p.total_len}, {"intervals", nlohmann::json::array()}};
  for (const auto& iv : p.intervals) j["intervals"].push_back({{"start", iv.start}, {"width", iv.width}, {"ratio", iv.ratio}});
}

inline void from_json(const nlohmann::json& j, CompressionPlan& p) {
  p.total_len = j.at("total_len").get<std::size_t>();
  p.intervals.clear();
  for (const auto& e : j.at("intervals"))
    p.intervals.push_back({e.at("start").get<std::size_t>(), e.at("width").get<std::size_t>(), e.at("ratio").get<std::size_t>()});
  p.validate();
}

// Learned summary-token state: one shared input embedding plus per-layer
// alternate attention projections shaped like the base ones.
template <class T>
struct VstParams {
  struct Layer {
    Mat<T> wq, wk, wv, wo;
  };
  Mat<T> embed;  // 1 x D
  std::vector<Layer> layers;

  // Embedding ~ N(0, 0.02); projections warm-started from the base weights
  // plus N(0, 1e-3) noise.
  static VstParams init(const Params<T>& base, Rng& rng, double embed_std = 0.02, double noise_std = 1e-3) {
    VstParams v;
    v.embed = random_normal<T>(1, base.config.hidden_size, embed_std, rng);
    auto jitter = [&](const Mat<T>& w) {
      Mat<T> out = w;
      for (auto& x : out.flat()) x += static_cast<T>(rng.normal(0.0, noise_std));
      return out;
    };
    for (const auto& w : base.layers) v.layers.push_back({jitter(w.wq), jitter(w.wk), jitter(w.wv), jitter(w.wo)});
    return v;
  }

  void check_against(const Params<T>& base) const {
    require(layers.size() == base.layers.size(), "VstParams: " + std::to_string(layers.size()) + " layers, model has " +
                                                     std::to_string(base.layers.size()));
    require(embed.rows() == 1 && embed.cols() == base.config.hidden_size, "VstParams: embed shape " + embed.shape());
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& a = layers[l];
      const auto& b = base.layers[l];
      require(a.wq.rows() == b.wq.rows() && a.wq.cols() == b.wq.cols() && a.wk.rows() == b.wk.rows() &&
                  a.wk.cols() == b.wk.cols() && a.wv.rows() == b.wv.rows() && a.wv.cols() == b.wv.cols() &&
                  a.wo.rows() == b.wo.rows() && a.wo.cols() == b.wo.cols(),
              "VstParams: layer " + std::to_string(l) + " projection shapes differ from the base model");
    }
  }

  template <class Self, class Fn>
  static void visit(Self& self, Fn&& fn) {
    fn(std::string("vst.embed"), self.embed);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      const std::string p = "vst.L" + std::to_string(l) + ".";
      fn(p + "wq", self.layers[l].wq);
      fn(p + "wk", self.layers[l].wk);
      fn(p + "wv", self.layers[l].wv);
      fn(p + "wo", self.layers[l].wo);
    }
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
  VstParams<U> cast() const {
    VstParams<U> out;
    out.embed = embed.template cast<U>();
    for (const auto& l : layers)
      out.layers.push_back({l.wq.template cast<U>(), l.wk.template cast<U>(), l.wv.template cast<U>(), l.wo.template cast<U>()});
    return out;
  }
};

enum class SlotKind : std::uint8_t { raw, vst };

struct CacheEntry {
  std::uint32_t interval = 0;   // index of the interval that produced the row
  std::int64_t position = 0;    // chunk-local position id
  SlotKind source = SlotKind::vst;
  bool operator==(const CacheEntry&) const = default;
};

template <class T>
struct CompressedCache {
  std::vector<Mat<T>> keys;    // per layer, rows x kv_width (post-rotation)
  std::vector<Mat<T>> values;  // per layer
  std::vector<CacheEntry> entries;

  static CompressedCache empty(const ModelConfig& cfg) {
    CompressedCache c;
    c.keys.assign(cfg.n_layers, Mat<T>(0, cfg.kv_width()));
    c.values.assign(cfg.n_layers, Mat<T>(0, cfg.kv_width()));
    return c;
  }
  std::size_t rows() const noexcept { return entries.size(); }
  std::size_t n_layers() const noexcept { return keys.size(); }
};

struct TraceRow {
  std::size_t chunk_idx = 0;
  std::size_t raw_len = 0;
  std::size_t vst_count = 0;
  std::size_t cache_rows = 0;  // retained rows per layer after the chunk
  std::size_t peak_rows = 0;   // rows per layer live during the chunk pass
  std::uint64_t multiply_adds = 0;
};

struct EncodeTrace {
  std::vector<TraceRow> rows;

  void write_csv(std::ostream& os) const {
    os << "chunk_idx,raw_len,vst_count,cache_rows,peak_rows,multiply_adds\n";
    for (const auto& r : rows)
      os << r.chunk_idx << ',' << r.raw_len << ',' << r.vst_count << ',' << r.cache_rows << ',' << r.peak_rows << ','
         << r.multiply_adds << '\n';
  }
};

inline constexpr std::int64_t kVstSlot = graph::kAltSlot;

// Raw tokens interleaved with summary markers, plus position ids: raw
// tokens count from 0 within the chunk, a summary token reuses the id of
// the raw token just before it.
struct Interleaved {
  std::vector<std::int64_t> slots;
  std::vector<std::int64_t> positions;
  std::size_t vst_count = 0;
};

inline Interleaved interleave(std::span<const std::uint32_t> raw, std::size_t ratio) {
  if (ratio == 0) fail_input("interleave: ratio must be >= 1");
  require(!raw.empty(), "interleave: empty interval");
  Interleaved out;
  out.slots.reserve(raw.size() + raw.size() / ratio + 1);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    out.slots.push_back(raw[i]);
    out.positions.push_back(static_cast<std::int64_t>(i));
    if ((i + 1) % ratio == 0 || i + 1 == raw.size()) {
      out.slots.push_back(kVstSlot);
      out.positions.push_back(static_cast<std::int64_t>(i));
      ++out.vst_count;
    }
  }
  return out;
}

namespace graph {

template <class T>
BoundAlt bind_vst(Tape<T>& tape, const VstParams<T>& v, bool trainable) {
  auto b = [&](const Mat<T>& m) { return trainable ? tape.param(m) : tape.constant(m); };
  BoundAlt a;
  a.embed = b(v.embed);
  for (const auto& l : v.layers) a.layers.push_back({b(l.wq), b(l.wk), b(l.wv), b(l.wo)});
  return a;
}

// Accumulated summary KVs as tape variables, for differentiable encoding.
struct TapeCache {
  std::vector<LayerKv> layers;
  std::vector<CacheEntry> entries;
};

template <class T>
TapeCache bind_cache(Tape<T>& tape, const CompressedCache<T>& c) {
  TapeCache tc;
  for (std::size_t l = 0; l < c.n_layers(); ++l) tc.layers.push_back({tape.constant(c.keys[l]), tape.constant(c.values[l])});
  tc.entries = c.entries;
  return tc;
}

// Encodes one interval against `cache` and appends only its summary rows.
template <class T>
void encode_chunk_on(Tape<T>& tape, const BoundModel& m, const BoundAlt& alt, TapeCache& cache,
                     std::span<const std::uint32_t> raw, std::size_t ratio, std::uint32_t interval_index) {
  const ModelConfig& cfg = *m.config;
  const Interleaved il = interleave(raw, ratio);
  if (il.slots.size() > cfg.context_window)
    fail_input("encode_chunk: chunk of " + std::to_string(raw.size()) + " tokens + " + std::to_string(il.vst_count) +
               " summary tokens exceeds window " + std::to_string(cfg.context_window));
  require(cache.layers.size() == cfg.n_layers, "encode_chunk: cache has " + std::to_string(cache.layers.size()) +
                                                   " layers, model has " + std::to_string(cfg.n_layers));
  const PassInput in{il.slots, il.positions};
  const PassOutput out = run_pass<T>(tape, m, &alt, cache.layers, in);

  std::vector<std::uint32_t> vst_rows;
  for (std::size_t i = 0; i < il.slots.size(); ++i)
    if (il.slots[i] == kVstSlot) {
      vst_rows.push_back(static_cast<std::uint32_t>(i));
      cache.entries.push_back({interval_index, il.positions[i], SlotKind::vst});
    }
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    cache.layers[l].keys = tape.concat_rows(cache.layers[l].keys, tape.gather_rows(out.fresh[l].keys, vst_rows));
    cache.layers[l].values = tape.concat_rows(cache.layers[l].values, tape.gather_rows(out.fresh[l].values, vst_rows));
  }
}

inline std::int64_t next_position(const std::vector<CacheEntry>& entries) {
  return entries.empty() ? 0 : entries.back().position + 1;
}

// Logits for `ids` (prompt, optionally followed by teacher-forced answer
// tokens) attending to the compressed cache and causally to each other.
template <class T>
Var decode_logits_on(Tape<T>& tape, const BoundModel& m, const TapeCache& cache, const TokenIds& ids) {
  const PassOutput out = run_pass<T>(tape, m, nullptr, cache.layers, plain_input(ids, next_position(cache.entries)));
  return logits(tape, m, out.hidden);
}

}  // namespace graph

template <class T>
TraceRow encode_chunk(const Params<T>& params, const VstParams<T>& vst, std::span<const std::uint32_t> raw,
                      std::size_t ratio, std::uint32_t interval_index, CompressedCache<T>& cache,
                      OpCounter* counter = nullptr) {
  const ModelConfig& cfg = params.config;
  if (cache.n_layers() != cfg.n_layers)
    fail_input("encode_chunk: cache layer count " + std::to_string(cache.n_layers()) + " != n_layers " +
               std::to_string(cfg.n_layers));
  OpCounter local;
  OpCounter* c = counter ? counter : &local;
  const std::uint64_t before = c->multiply_adds;
  const std::size_t rows_before = cache.rows();

  ad::Tape<T> tape(false, c);
  const auto m = graph::bind(tape, params, false);
  const auto alt = graph::bind_vst(tape, vst, false);
  auto tc = graph::bind_cache(tape, cache);
  graph::encode_chunk_on<T>(tape, m, alt, tc, raw, ratio, interval_index);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    Mat<T> k = tape.value(tc.layers[l].keys);
    Mat<T> v = tape.value(tc.layers[l].values);
    cache.keys[l] = std::move(k);
    cache.values[l] = std::move(v);
  }
  cache.entries = std::move(tc.entries);

  TraceRow row;
  row.chunk_idx = interval_index;
  row.raw_len = raw.size();
  row.vst_count = cache.rows() - rows_before;
  row.cache_rows = cache.rows();
  row.peak_rows = rows_before + raw.size() + row.vst_count;
  row.multiply_adds = c->multiply_adds - before;
  return row;
}

template <class T>
struct EncodeResult {
  CompressedCache<T> cache;
  EncodeTrace trace;
};

template <class T>
EncodeResult<T> encode_sequence(const Params<T>& params, const VstParams<T>& vst, const TokenIds& ids,
                                const CompressionPlan& plan, OpCounter* counter = nullptr) {
  if (plan.total_len != ids.size())
    fail_input("encode_sequence: plan covers " + std::to_string(plan.total_len) + " tokens, input has " +
               std::to_string(ids.size()));
  plan.validate(params.config.context_window);
  vst.check_against(params);
  EncodeResult<T> r{CompressedCache<T>::empty(params.config), {}};
  for (std::size_t i = 0; i < plan.intervals.size(); ++i) {
    const auto& iv = plan.intervals[i];
    std::span<const std::uint32_t> raw(ids.data() + iv.start, iv.width);
    r.trace.rows.push_back(encode_chunk(params, vst, raw, iv.ratio, static_cast<std::uint32_t>(i), r.cache, counter));
  }
  return r;
}

template <class T>
struct PassthroughResult {
  std::vector<LayerKvCache<T>> caches;
  Mat<T> logits;  // one row per input token
};

// Chunked encoding with no summary tokens and no off-loading; every raw
// KV row is kept and positions run globally.
template <class T>
PassthroughResult<T> passthrough_encode(const Params<T>& params, const TokenIds& ids,
                                        const std::vector<std::size_t>& chunk_sizes = {}) {
  const auto& cfg = params.config;
  if (ids.size() > cfg.context_window)
    fail_input("passthrough_encode: length " + std::to_string(ids.size()) + " exceeds context window " +
               std::to_string(cfg.context_window));
  std::vector<std::size_t> sizes = chunk_sizes;
  if (sizes.empty() && !ids.empty()) sizes = {ids.size()};
  std::size_t sum = 0;
  for (auto s : sizes) sum += s;
  require(sum == ids.size(), "passthrough_encode: chunk sizes sum to " + std::to_string(sum) + ", input has " +
                                 std::to_string(ids.size()));
  PassthroughResult<T> r{empty_kv_caches<T>(cfg), Mat<T>(0, cfg.vocab_size)};
  std::size_t at = 0;
  for (auto s : sizes) {
    if (s == 0) continue;
    const TokenIds part(ids.begin() + static_cast<std::ptrdiff_t>(at), ids.begin() + static_cast<std::ptrdiff_t>(at + s));
    r.logits.append_rows(forward_step(params, r.caches, part));
    at += s;
  }
  return r;
}

template <class T>
struct DecodeResult {
  TokenIds generated;
  std::vector<Mat<T>> step_logits;  // 1 x V logits that produced each generated token
};

// Greedy decoding of `max_new` tokens after `prompt`, conditioned only on
// the compressed cache and the prompt/generated tokens themselves.
template <class T>
DecodeResult<T> decode_with_cache(const Params<T>& params, const CompressedCache<T>& cache, const TokenIds& prompt,
                                  std::size_t max_new) {
  const auto& cfg = params.config;
  if (cache.n_layers() != cfg.n_layers)
    fail_input("decode_with_cache: cache layer count " + std::to_string(cache.n_layers()) + " != n_layers " +
               std::to_string(cfg.n_layers));
  require(!prompt.empty(), "decode_with_cache: empty prompt");
  if (prompt.size() + max_new > cfg.context_window)
    fail_input("decode_with_cache: prompt " + std::to_string(prompt.size()) + " + max_new " + std::to_string(max_new) +
               " exceeds window " + std::to_string(cfg.context_window));

  std::vector<Mat<T>> keys = cache.keys;
  std::vector<Mat<T>> values = cache.values;
  std::int64_t pos = graph::next_position(cache.entries);
  DecodeResult<T> r;
  TokenIds feed = prompt;
  while (r.generated.size() < max_new) {
    ad::Tape<T> tape(false);
    const auto m = graph::bind(tape, params, false);
    std::vector<graph::LayerKv> bound;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) bound.push_back({tape.constant(keys[l]), tape.constant(values[l])});
    const auto out = graph::run_pass<T>(tape, m, nullptr, bound, graph::plain_input(feed, pos));
    const Mat<T>& lg = tape.value(graph::logits(tape, m, tape.gather_rows(out.hidden, {static_cast<std::uint32_t>(feed.size() - 1)})));
    const std::uint32_t next = argmax_row<T>(lg.row(0));
    r.step_logits.push_back(lg);
    r.generated.push_back(next);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      keys[l].append_rows(tape.value(out.fresh[l].keys));
      values[l].append_rows(tape.value(out.fresh[l].values));
    }
    pos += static_cast<std::int64_t>(feed.size());
    feed = {next};
  }
  return r;
}

// ---- serialization ----

template <class T>
void save_cache(const std::filesystem::path& prefix, const CompressedCache<T>& c, Precision prec = precision_of<T>()) {
  nlohmann::json manifest{{"n_layers", c.n_layers()}, {"rows", c.rows()}, {"entries", nlohmann::json::array()}};
  for (const auto& e : c.entries)
    manifest["entries"].push_back({{"interval", e.interval}, {"position", e.position}, {"source", e.source == SlotKind::vst ? "vst" : "raw"}});
  std::ofstream bin(prefix.string() + ".bin", std::ios::binary);
  if (!bin) fail_input("cannot write " + prefix.string() + ".bin");
  for (std::size_t l = 0; l < c.n_layers(); ++l) {
    io::write_tensor(bin, c.keys[l], prec);
    io::write_tensor(bin, c.values[l], prec);
  }
  std::ofstream js(prefix.string() + ".json");
  if (!js) fail_input("cannot write " + prefix.string() + ".json");
  js << manifest.dump(2) << "\n";
}

template <class T>
CompressedCache<T> load_cache(const std::filesystem::path& prefix) {
  std::ifstream js(prefix.string() + ".json");
  if (!js) fail_input("cannot open " + prefix.string() + ".json");
  const auto manifest = nlohmann::json::parse(js);
  CompressedCache<T> c;
  for (const auto& e : manifest.at("entries"))
    c.entries.push_back({e.at("interval").get<std::uint32_t>(), e.at("position").get<std::int64_t>(),
                         e.at("source").get<std::string>() == "vst" ? SlotKind::vst : SlotKind::raw});
  std::ifstream bin(prefix.string() + ".bin", std::ios::binary);
  if (!bin) fail_input("cannot open " + prefix.string() + ".bin");
  const auto layers = manifest.at("n_layers").get<std::size_t>();
  for (std::size_t l = 0; l < layers; ++l) {
    c.keys.push_back(io::read_tensor<T>(bin));
    c.values.push_back(io::read_tensor<T>(bin));
    require(c.keys.back().rows() == c.rows() && c.values.back().rows() == c.rows(),
            "cache file: layer " + std::to_string(l) + " row count disagrees with manifest");
  }
  return c;
}

template <class T>
void save_vst(const std::filesystem::path& prefix, const VstParams<T>& v, Precision prec = precision_of<T>()) {
  nlohmann::json manifest{{"n_layers", v.layers.size()}, {"tensors", nlohmann::json::array()}};
  std::ofstream bin(prefix.string() + ".bin", std::ios::binary);
  if (!bin) fail_input("cannot write " + prefix.string() + ".bin");
  v.for_each([&](const std::string& name, const Mat<T>& m) {
    manifest["tensors"].push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
    io::write_tensor(bin, m, prec);
  });
  std::ofstream js(prefix.string() + ".json");
  js << manifest.dump(2) << "\n";
}

template <class T>
VstParams<T> load_vst(const std::filesystem::path& prefix) {
  std::ifstream js(prefix.string() + ".json");
  if (!js) fail_input("cannot open " + prefix.string() + ".json");
  const auto manifest = nlohmann::json::parse(js);
  VstParams<T> v;
  v.layers.resize(manifest.at("n_layers").get<std::size_t>());
  std::ifstream bin(prefix.string() + ".bin", std::ios::binary);
  if (!bin) fail_input("cannot open " + prefix.string() + ".bin");
  v.for_each([&](const std::string&, Mat<T>& m) { m = io::read_tensor<T>(bin); });
  return v;
}

}  // namespace vxl
