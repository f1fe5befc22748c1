#pragma once

// Synthetic tasks: needle retrieval through a compressed cache, event
// ordering, and uniform M-token "super image" streams. Also the grid
// evaluator that scores needle retrieval over (length, depth) cells.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "vxl/compressor.hpp"
#include "vxl/model.hpp"
#include "vxl/partitioner.hpp"

namespace vxl {

// Reserved token layout. Distractors never use ids below kDistractorLo.
namespace tokens {
inline constexpr std::uint32_t kQuery = 1;       // needle question
inline constexpr std::uint32_t kNeedleMark = 2;  // fills the needle frame around the payload
inline constexpr std::uint32_t kOrderQuery = 3;  // ordering question
inline constexpr std::uint32_t kPayloadLo = 16, kPayloadHi = 48;
inline constexpr std::uint32_t kEventLo = 48, kEventHi = 80;
inline constexpr std::uint32_t kDistractorLo = 128;
inline constexpr std::size_t kPayloadSlot = 1;  // intra-frame slot of the payload
}  // namespace tokens

// One supervised instance: compress `stream`, then answer `prompt`.
struct TaskItem {
  TokenIds stream;
  FrameEmbeddings embeddings;
  TokenIds prompt;
  TokenIds answer;
};

struct NeedleSpec {
  std::size_t haystack_frames = 64;
  double needle_depth = 0.5;
  std::size_t tokens_per_frame = 4;
  std::size_t embed_dim = 16;
  std::size_t vocab_size = 512;
  std::size_t max_stream_tokens = 1 << 16;
  bool two_scene = false;  // distractors switch token range and embedding cluster at a random cut
  std::optional<std::uint32_t> payload;
};

struct NeedleInstance : TaskItem {
  std::size_t needle_frame = 0;
  std::optional<std::size_t> scene_cut;  // first frame of the second scene
};

namespace detail {

inline std::vector<double> random_unit(std::size_t dim, Rng& rng) {
  std::vector<double> v(dim);
  double ss = 0;
  for (double& x : v) {
    x = rng.normal();
    ss += x * x;
  }
  for (double& x : v) x /= std::sqrt(ss);
  return v;
}

// Removes the components along each (unit) vector in `against`, then renormalizes.
inline std::vector<double> orthogonalize(std::vector<double> v, const std::vector<std::vector<double>>& against) {
  for (int pass = 0; pass < 2; ++pass)
    for (const auto& a : against) {
      double dot = 0, aa = 0;
      for (std::size_t c = 0; c < v.size(); ++c) dot += v[c] * a[c], aa += a[c] * a[c];
      for (std::size_t c = 0; c < v.size(); ++c) v[c] -= dot / aa * a[c];
    }
  double ss = 0;
  for (double x : v) ss += x * x;
  for (double& x : v) x /= std::sqrt(ss);
  return v;
}

// Slowly drifting unit vectors: adjacent cosine around 0.99.
inline std::vector<std::vector<double>> random_walk(std::size_t n, std::vector<double> start, Rng& rng) {
  std::vector<std::vector<double>> out;
  const double step = 0.12 / std::sqrt(static_cast<double>(start.size()));
  for (std::size_t f = 0; f < n; ++f) {
    out.push_back(start);
    double ss = 0;
    for (double& x : start) {
      x += step * rng.normal();
      ss += x * x;
    }
    for (double& x : start) x /= std::sqrt(ss);
  }
  return out;
}

inline Mat<double> to_mat(const std::vector<std::vector<double>>& rows) {
  Mat<double> m(rows.size(), rows.empty() ? 0 : rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r) std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
  return m;
}

inline std::uint32_t draw_range(Rng& rng, std::uint32_t lo, std::uint32_t hi) {
  return lo + static_cast<std::uint32_t>(rng.uniform_int(hi - lo));
}

}  // namespace detail

inline std::size_t needle_frame_for(std::size_t frames, double depth) {
  return static_cast<std::size_t>(std::lround(depth * static_cast<double>(frames - 1)));
}

inline NeedleInstance gen_needle(const NeedleSpec& spec, Rng& rng) {
  using namespace tokens;
  if (!(spec.needle_depth >= 0.0 && spec.needle_depth <= 1.0))
    fail_input("gen_needle: depth " + std::to_string(spec.needle_depth) + " outside [0, 1]");
  require(spec.haystack_frames >= 1, "gen_needle: need at least one frame");
  require(spec.tokens_per_frame >= 2, "gen_needle: tokens_per_frame must be >= 2");
  require(spec.vocab_size > kDistractorLo + 1, "gen_needle: vocab too small for the reserved token layout");
  require(spec.embed_dim >= 3, "gen_needle: embed_dim must be >= 3");
  const std::size_t M = spec.tokens_per_frame;
  const std::size_t n_tokens = spec.haystack_frames * M;
  if (n_tokens > spec.max_stream_tokens)
    fail_input("gen_needle: stream of " + std::to_string(n_tokens) + " tokens exceeds limit " +
               std::to_string(spec.max_stream_tokens));

  NeedleInstance inst;
  const std::size_t n = spec.haystack_frames;
  inst.needle_frame = needle_frame_for(n, spec.needle_depth);
  const std::uint32_t payload = spec.payload.value_or(detail::draw_range(rng, kPayloadLo, kPayloadHi));
  require(payload >= kPayloadLo && payload < kPayloadHi, "gen_needle: payload outside the reserved payload range");

  std::size_t cut = n;
  if (spec.two_scene && n >= 4) {
    cut = n / 4 + rng.uniform_int(n / 2);
    inst.scene_cut = cut;
  }
  const auto mid = static_cast<std::uint32_t>((kDistractorLo + spec.vocab_size) / 2);
  inst.stream.resize(n_tokens);
  for (std::size_t f = 0; f < n; ++f) {
    const bool second = f >= cut;
    const std::uint32_t lo = !spec.two_scene ? kDistractorLo : second ? mid : kDistractorLo;
    const std::uint32_t hi = !spec.two_scene ? static_cast<std::uint32_t>(spec.vocab_size) : second ? static_cast<std::uint32_t>(spec.vocab_size) : mid;
    for (std::size_t t = 0; t < M; ++t) inst.stream[f * M + t] = detail::draw_range(rng, lo, hi);
  }
  for (std::size_t t = 0; t < M; ++t)
    inst.stream[inst.needle_frame * M + t] = t == kPayloadSlot ? payload : kNeedleMark;

  auto rows = detail::random_walk(cut, detail::random_unit(spec.embed_dim, rng), rng);
  if (cut < n) {
    auto start = detail::orthogonalize(detail::random_unit(spec.embed_dim, rng), {rows.back()});
    for (auto& r : detail::random_walk(n - cut, start, rng)) rows.push_back(std::move(r));
  }
  std::vector<std::vector<double>> neighbours;
  if (inst.needle_frame > 0) neighbours.push_back(rows[inst.needle_frame - 1]);
  if (inst.needle_frame + 1 < n) neighbours.push_back(rows[inst.needle_frame + 1]);
  rows[inst.needle_frame] = detail::orthogonalize(detail::random_unit(spec.embed_dim, rng), neighbours);

  inst.embeddings.tokens_per_frame = M;
  inst.embeddings.embeddings = detail::to_mat(rows);
  inst.prompt = {kQuery};
  inst.answer = {payload};
  return inst;
}

struct OrderingSpec {
  std::size_t n_events = 3;
  std::size_t clip_frames = 2;
  std::size_t haystack_frames = 32;
  std::size_t tokens_per_frame = 4;
  std::size_t vocab_size = 512;
  std::vector<std::uint32_t> payloads;  // drawn from the event range when empty
};

struct OrderingInstance {
  TokenIds stream;
  TokenIds prompt;
  TokenIds answer;                      // event payloads in stream order
  std::vector<std::size_t> permutation;  // permutation[i] = event placed at clip slot i
};

// Events occupy n_events disjoint clips at shuffled clip slots; each clip
// frame carries its event token at the payload slot.
inline OrderingInstance gen_ordering(const OrderingSpec& spec, Rng& rng) {
  using namespace tokens;
  if (spec.n_events < 2) fail_input("gen_ordering: need at least 2 events");
  require(spec.clip_frames >= 1 && spec.tokens_per_frame >= 2, "gen_ordering: bad clip shape");
  require(spec.vocab_size > kDistractorLo + 1, "gen_ordering: vocab too small for the reserved token layout");
  std::vector<std::uint32_t> payloads = spec.payloads;
  if (payloads.empty()) {
    std::vector<std::uint32_t> pool;
    for (std::uint32_t t = kEventLo; t < kEventHi; ++t) pool.push_back(t);
    rng.shuffle(pool);
    require(spec.n_events <= pool.size(), "gen_ordering: more events than event tokens");
    payloads.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(spec.n_events));
  }
  if (payloads.size() != spec.n_events) fail_input("gen_ordering: payload count does not match n_events");
  auto sorted = payloads;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) fail_input("gen_ordering: duplicate payload tokens");

  const std::size_t slots = spec.haystack_frames / spec.clip_frames;
  if (slots < spec.n_events) fail_input("gen_ordering: haystack too short for the requested events");
  std::vector<std::size_t> slot_ids(slots);
  for (std::size_t i = 0; i < slots; ++i) slot_ids[i] = i;
  rng.shuffle(slot_ids);
  slot_ids.resize(spec.n_events);  // slot_ids[e] = clip slot of event e
  const std::size_t M = spec.tokens_per_frame;

  OrderingInstance inst;
  inst.stream.resize(spec.haystack_frames * M);
  for (auto& t : inst.stream) t = detail::draw_range(rng, kDistractorLo, static_cast<std::uint32_t>(spec.vocab_size));
  for (std::size_t e = 0; e < spec.n_events; ++e)
    for (std::size_t f = 0; f < spec.clip_frames; ++f)
      inst.stream[(slot_ids[e] * spec.clip_frames + f) * M + kPayloadSlot] = payloads[e];

  std::vector<std::size_t> order(spec.n_events);
  for (std::size_t e = 0; e < order.size(); ++e) order[e] = e;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return slot_ids[a] < slot_ids[b]; });
  inst.permutation = order;
  for (auto e : order) inst.answer.push_back(payloads[e]);
  inst.prompt = {kOrderQuery};
  return inst;
}

enum class SuperImageKind { single_image, multi_image, video };

struct SuperImageSpec {
  SuperImageKind kind = SuperImageKind::video;
  std::size_t n_frames = 0;                 // multi_image / video
  std::size_t grid_rows = 0, grid_cols = 0;  // single_image patch grid
  std::size_t tokens_per_patch = 4;
  std::size_t vocab_size = 512;

  std::size_t groups() const { return kind == SuperImageKind::single_image ? grid_rows * grid_cols : n_frames; }
};

// Every kind becomes `groups` runs of M tokens, so downstream code never
// looks at the kind.
inline TokenIds gen_super_image(const SuperImageSpec& spec, Rng& rng) {
  if (spec.groups() == 0) fail_input("gen_super_image: zero frames or patches");
  require(spec.tokens_per_patch >= 1, "gen_super_image: tokens_per_patch must be >= 1");
  require(spec.vocab_size > tokens::kDistractorLo, "gen_super_image: vocab too small");
  TokenIds ids(spec.groups() * spec.tokens_per_patch);
  for (auto& t : ids) t = detail::draw_range(rng, tokens::kDistractorLo, static_cast<std::uint32_t>(spec.vocab_size));
  return ids;
}

// Two tight clusters of frames joined at `cut` (cross-cluster cosine 0).
inline FrameEmbeddings two_scene_embeddings(std::size_t n, std::size_t cut, std::size_t dim, std::size_t M, Rng& rng) {
  require(cut > 0 && cut < n, "two_scene_embeddings: cut must be inside the stream");
  auto a = detail::random_unit(dim, rng);
  auto b = detail::orthogonalize(detail::random_unit(dim, rng), {a});
  std::vector<std::vector<double>> rows;
  for (std::size_t f = 0; f < n; ++f) {
    auto row = f < cut ? a : b;
    for (double& x : row) x += 0.05 * rng.normal() / std::sqrt(static_cast<double>(dim));
    rows.push_back(row);
  }
  FrameEmbeddings fe{M, detail::to_mat(rows)};
  normalize_rows(fe.embeddings);
  return fe;
}

enum class PartitionMode { dynamic, fixed };

// How a stream is cut into intervals at a given ratio.
struct PartitionPolicy {
  PartitionMode mode = PartitionMode::dynamic;
  PartitionConfig config;  // dynamic mode; default_ratio is overridden by the call
  std::size_t fixed_interval_tokens = 256;

  CompressionPlan plan(const TaskItem& item, std::size_t ratio) const {
    if (mode == PartitionMode::fixed) return fixed_partition(item.stream.size(), fixed_interval_tokens, ratio);
    PartitionConfig c = config;
    c.default_ratio = ratio;
    c.ratio_policy = RatioPolicy::uniform;
    return dynamic_partition(item.embeddings, c);
  }
};

struct EvalConfig {
  PartitionPolicy partition;
  std::size_t ratio = 8;
  NeedleSpec needle;  // haystack_frames and needle_depth are set per cell
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
};

struct EvalGrid {
  std::vector<std::size_t> lengths;
  std::vector<double> depths;
  std::size_t trials = 0;
  std::vector<std::vector<std::optional<double>>> accuracy;  // [length][depth]; nullopt = absent

  void write_csv(std::ostream& os) const {
    os << "length_frames,depth,accuracy,trials\n";
    for (std::size_t i = 0; i < lengths.size(); ++i)
      for (std::size_t j = 0; j < depths.size(); ++j) {
        os << lengths[i] << ',' << depths[j] << ',';
        if (accuracy[i][j])
          os << *accuracy[i][j];
        else
          os << "absent";
        os << ',' << trials << '\n';
      }
  }

  // Mean over present cells with length in [lo, hi].
  std::optional<double> mean(std::size_t lo, std::size_t hi) const {
    double sum = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < lengths.size(); ++i)
      if (lengths[i] >= lo && lengths[i] <= hi)
        for (const auto& a : accuracy[i])
          if (a) sum += *a, ++n;
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
  }
};

inline std::uint64_t cell_stream(std::size_t length_idx, std::size_t depth_idx, std::size_t trial) {
  return (static_cast<std::uint64_t>(length_idx) * 1009 + depth_idx) * 1000003 + trial;
}

// Exact-match retrieval of one instance through the compressed cache.
template <class T>
bool needle_correct(const Params<T>& params, const VstParams<T>& vst, const TaskItem& item, const CompressionPlan& plan) {
  const auto enc = encode_sequence(params, vst, item.stream, plan);
  return decode_with_cache(params, enc.cache, item.prompt, item.answer.size()).generated == item.answer;
}

template <class T>
EvalGrid evaluate_grid(const Params<T>& params, const VstParams<T>& vst, const EvalConfig& cfg,
                       const std::vector<std::size_t>& lengths, const std::vector<double>& depths, std::size_t trials) {
  EvalGrid grid;
  grid.trials = trials;
  if (trials == 0) return grid;
  grid.lengths = lengths;
  grid.depths = depths;
  grid.accuracy.assign(lengths.size(), std::vector<std::optional<double>>(depths.size()));

  auto run_cell = [&](std::size_t li, std::size_t di) -> std::optional<double> {
    NeedleSpec spec = cfg.needle;
    spec.haystack_frames = lengths[li];
    spec.needle_depth = depths[di];
    if (spec.haystack_frames * spec.tokens_per_frame > spec.max_stream_tokens) return std::nullopt;
    std::size_t hits = 0;
    try {
      for (std::size_t t = 0; t < trials; ++t) {
        Rng rng = Rng::derive(cfg.seed, cell_stream(li, di, t));
        const auto inst = gen_needle(spec, rng);
        hits += needle_correct(params, vst, inst, cfg.partition.plan(inst, cfg.ratio));
      }
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::input) throw;
      return std::nullopt;  // stream does not fit the model's limits
    }
    return static_cast<double>(hits) / static_cast<double>(trials);
  };

  const std::size_t cells = lengths.size() * depths.size();
  const std::size_t jobs = std::max<std::size_t>(1, std::min(cfg.jobs, cells));
  if (jobs == 1) {
    for (std::size_t c = 0; c < cells; ++c) grid.accuracy[c / depths.size()][c % depths.size()] = run_cell(c / depths.size(), c % depths.size());
    return grid;
  }
  std::vector<std::exception_ptr> errors(jobs);
  std::vector<std::thread> pool;
  for (std::size_t j = 0; j < jobs; ++j)
    pool.emplace_back([&, j] {
      try {
        for (std::size_t c = j; c < cells; c += jobs)
          grid.accuracy[c / depths.size()][c % depths.size()] = run_cell(c / depths.size(), c % depths.size());
      } catch (...) {
        errors[j] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return grid;
}

// JSON-lines dataset; embeddings go to sibling files named by embeddings_ref.
inline void write_needle_dataset(const std::filesystem::path& dir, const NeedleSpec& spec, std::uint64_t seed,
                                 std::size_t count) {
  std::filesystem::create_directories(dir);
  std::ofstream os(dir / "dataset.jsonl");
  if (!os) fail_input("cannot write " + (dir / "dataset.jsonl").string());
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = Rng::derive(seed, i);
    const auto inst = gen_needle(spec, rng);
    const std::string ref = "emb_" + std::to_string(i) + ".vxe";
    save_frame_embeddings(dir / ref, inst.embeddings);
    os << nlohmann::json{{"stream", inst.stream}, {"embeddings_ref", ref}, {"prompt", inst.prompt},
                         {"answer", inst.answer}, {"seed", seed}, {"index", i}}
              .dump()
       << '\n';
  }
}

inline std::vector<TaskItem> read_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "dataset.jsonl");
  if (!is) fail_input("cannot open " + (dir / "dataset.jsonl").string());
  std::vector<TaskItem> items;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail_input("dataset line " + std::to_string(items.size() + 1) + ": " + e.what());
    }
    TaskItem it;
    it.stream = j.at("stream").get<TokenIds>();
    it.prompt = j.at("prompt").get<TokenIds>();
    it.answer = j.at("answer").get<TokenIds>();
    it.embeddings = load_frame_embeddings(dir / j.at("embeddings_ref").get<std::string>());
    items.push_back(std::move(it));
  }
  return items;
}

}  // namespace vxl
