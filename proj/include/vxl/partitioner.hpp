#pragma once

// Semantic segmentation of a frame stream into compression intervals.
// Adjacent-frame cosine similarities are turned into depth scores
//   d_i = max(s_<i) + max(s_>i) - 2 s_i
// and peaks above a threshold become interval boundaries.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vxl/compressor.hpp"
#include "vxl/numerics.hpp"
#include "vxl/tensor_io.hpp"

namespace vxl {

struct FrameEmbeddings {
  std::size_t tokens_per_frame = 4;  // M
  Mat<double> embeddings;            // n_frames x dim, unit rows

  std::size_t n_frames() const noexcept { return embeddings.rows(); }
  std::size_t dim() const noexcept { return embeddings.cols(); }

  void validate() const {
    require(tokens_per_frame >= 1, "FrameEmbeddings: tokens_per_frame must be >= 1");
    for (std::size_t r = 0; r < n_frames(); ++r) {
      double ss = 0;
      for (double x : embeddings.row(r)) ss += x * x;
      require(std::abs(std::sqrt(ss) - 1.0) <= 1e-6, "FrameEmbeddings: frame " + std::to_string(r) + " is not unit norm");
    }
  }
};

inline void normalize_rows(Mat<double>& m) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double ss = 0;
    for (double x : m.row(r)) ss += x * x;
    const double n = std::sqrt(ss);
    require(n > 0, "normalize_rows: zero row " + std::to_string(r));
    for (double& x : m.row(r)) x /= n;
  }
}

struct DepthScores {
  std::vector<double> similarities;  // s_i between frames i and i+1
  std::vector<double> depths;        // same indexing; empty when fewer than 3 similarities
};

enum class RatioPolicy { uniform, table };

struct PartitionConfig {
  std::optional<double> threshold;  // unset: mean(d) + 0.5 * std(d) per sequence
  std::size_t min_interval_frames = 1;
  std::size_t max_interval_tokens = 256;
  std::size_t default_ratio = 8;
  RatioPolicy ratio_policy = RatioPolicy::uniform;
  std::vector<std::size_t> ratio_table;  // interval i uses table[min(i, size-1)]

  void validate(std::size_t tokens_per_frame) const {
    require(max_interval_tokens >= tokens_per_frame, "PartitionConfig: max_interval_tokens " +
                                                         std::to_string(max_interval_tokens) + " < tokens per frame " +
                                                         std::to_string(tokens_per_frame));
    require(min_interval_frames >= 1, "PartitionConfig: min_interval_frames must be >= 1");
    require(default_ratio >= 1, "PartitionConfig: default_ratio must be >= 1");
    if (ratio_policy == RatioPolicy::table) {
      require(!ratio_table.empty(), "PartitionConfig: table policy needs a non-empty ratio_table");
      for (auto r : ratio_table) require(r >= 1, "PartitionConfig: ratio_table entries must be >= 1");
    }
  }

  std::size_t ratio_for(std::size_t interval) const {
    if (ratio_policy == RatioPolicy::uniform) return default_ratio;
    return ratio_table[std::min(interval, ratio_table.size() - 1)];
  }
};

inline void to_json(nlohmann::json& j, const PartitionConfig& c) {
  j = nlohmann::json{{"min_interval_frames", c.min_interval_frames},
                     {"max_interval_tokens", c.max_interval_tokens},
                     {"default_ratio", c.default_ratio},
                     {"ratio_policy", c.ratio_policy == RatioPolicy::uniform ? "uniform" : "table"},
                     {"ratio_table", c.ratio_table}};
  j["threshold"] = c.threshold ? nlohmann::json(*c.threshold) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, PartitionConfig& c) {
  PartitionConfig d;
  c.threshold = j.contains("threshold") && !j["threshold"].is_null() ? std::optional<double>(j["threshold"].get<double>())
                                                                      : std::nullopt;
  c.min_interval_frames = j.value("min_interval_frames", d.min_interval_frames);
  c.max_interval_tokens = j.value("max_interval_tokens", d.max_interval_tokens);
  c.default_ratio = j.value("default_ratio", d.default_ratio);
  const std::string policy = j.value("ratio_policy", std::string("uniform"));
  require(policy == "uniform" || policy == "table", "PartitionConfig: unknown ratio_policy '" + policy + "'");
  c.ratio_policy = policy == "uniform" ? RatioPolicy::uniform : RatioPolicy::table;
  c.ratio_table = j.value("ratio_table", std::vector<std::size_t>{});
}

inline std::vector<double> similarity_series(const FrameEmbeddings& fe) {
  if (fe.n_frames() < 2) fail_input("similarity_series: need at least 2 frames, got " + std::to_string(fe.n_frames()));
  std::vector<double> s(fe.n_frames() - 1);
  for (std::size_t i = 0; i + 1 < fe.n_frames(); ++i) {
    double dot = 0;
    for (std::size_t c = 0; c < fe.dim(); ++c) dot += fe.embeddings(i, c) * fe.embeddings(i + 1, c);
    s[i] = std::clamp(dot, -1.0, 1.0);
  }
  return s;
}

// Left/right maxima range over the whole sub-series on each side. The two
// endpoints have one empty side and use d = max(other side) - s.
inline DepthScores depth_scores(std::vector<double> sims) {
  DepthScores ds;
  ds.similarities = std::move(sims);
  const auto& s = ds.similarities;
  const std::size_t n = s.size();
  if (n < 3) return ds;
  std::vector<double> left(n), right(n);  // max strictly before / after i
  left[0] = -INFINITY;
  for (std::size_t i = 1; i < n; ++i) left[i] = std::max(left[i - 1], s[i - 1]);
  right[n - 1] = -INFINITY;
  for (std::size_t i = n - 1; i-- > 0;) right[i] = std::max(right[i + 1], s[i + 1]);
  ds.depths.resize(n);
  ds.depths[0] = right[0] - s[0];
  ds.depths[n - 1] = left[n - 1] - s[n - 1];
  for (std::size_t i = 1; i + 1 < n; ++i) ds.depths[i] = left[i] + right[i] - 2.0 * s[i];
  return ds;
}

inline double adaptive_threshold(const std::vector<double>& d) {
  if (d.empty()) return 0.0;
  double mean = 0;
  for (double x : d) mean += x;
  mean /= static_cast<double>(d.size());
  double var = 0;
  for (double x : d) var += (x - mean) * (x - mean);
  return mean + 0.5 * std::sqrt(var / static_cast<double>(d.size()));
}

// Boundary frame indices: a boundary b starts a new interval at frame b,
// i.e. it cuts between frames b-1 and b (similarity index b-1).
inline std::vector<std::size_t> find_boundaries(const DepthScores& ds, const PartitionConfig& cfg) {
  const auto& d = ds.depths;
  if (d.size() < 3) return {};
  const double delta = cfg.threshold.value_or(adaptive_threshold(d));
  std::vector<std::size_t> peaks;  // similarity indices
  for (std::size_t i = 1; i + 1 < d.size(); ++i)
    if (d[i] > d[i - 1] && d[i] > d[i + 1] && d[i] > delta) peaks.push_back(i);
  std::stable_sort(peaks.begin(), peaks.end(), [&](std::size_t a, std::size_t b) { return d[a] > d[b]; });
  std::vector<std::size_t> kept;
  for (std::size_t p : peaks) {
    const bool clear = std::all_of(kept.begin(), kept.end(), [&](std::size_t k) {
      return (p > k ? p - k : k - p) >= cfg.min_interval_frames;
    });
    if (clear) kept.push_back(p);
  }
  std::sort(kept.begin(), kept.end());
  for (auto& k : kept) k += 1;
  return kept;
}

// Frame spans between boundaries become token intervals; spans wider than
// max_interval_tokens are split into near-equal frame-aligned pieces.
inline CompressionPlan plan_from_boundaries(const std::vector<std::size_t>& boundaries, const FrameEmbeddings& fe,
                                            const PartitionConfig& cfg) {
  cfg.validate(fe.tokens_per_frame);
  const std::size_t n = fe.n_frames();
  std::vector<std::size_t> cuts{0};
  for (std::size_t b : boundaries) {
    if (b == 0 || b >= n) fail_input("plan_from_boundaries: boundary " + std::to_string(b) + " outside (0, " + std::to_string(n) + ")");
    if (b <= cuts.back()) fail_input("plan_from_boundaries: boundaries must be strictly increasing");
    cuts.push_back(b);
  }
  if (n > 0) cuts.push_back(n);

  const std::size_t M = fe.tokens_per_frame;
  const std::size_t max_frames = cfg.max_interval_tokens / M;
  CompressionPlan plan;
  plan.total_len = n * M;
  for (std::size_t c = 0; c + 1 < cuts.size(); ++c) {
    const std::size_t frames = cuts[c + 1] - cuts[c];
    const std::size_t pieces = (frames + max_frames - 1) / max_frames;
    std::size_t frame = cuts[c];
    for (std::size_t p = 0; p < pieces; ++p) {
      const std::size_t f = frames / pieces + (p < frames % pieces ? 1 : 0);
      plan.intervals.push_back({frame * M, f * M, 0});
      frame += f;
    }
  }
  for (std::size_t i = 0; i < plan.intervals.size(); ++i) plan.intervals[i].ratio = cfg.ratio_for(i);
  plan.validate();
  return plan;
}

inline CompressionPlan dynamic_partition(const FrameEmbeddings& fe, const PartitionConfig& cfg,
                                         DepthScores* scores_out = nullptr, std::vector<std::size_t>* boundaries_out = nullptr) {
  std::vector<std::size_t> boundaries;
  DepthScores ds;
  if (fe.n_frames() >= 2) {
    ds = depth_scores(similarity_series(fe));
    boundaries = find_boundaries(ds, cfg);
  }
  if (scores_out) *scores_out = ds;
  if (boundaries_out) *boundaries_out = boundaries;
  return plan_from_boundaries(boundaries, fe, cfg);
}

// Equal intervals of `interval_tokens` (the last may be shorter).
inline CompressionPlan fixed_partition(std::size_t n, std::size_t interval_tokens, std::size_t ratio) {
  require(interval_tokens >= 1, "fixed_partition: interval_tokens must be >= 1");
  require(ratio >= 1, "fixed_partition: ratio must be >= 1");
  CompressionPlan plan;
  plan.total_len = n;
  for (std::size_t start = 0; start < n; start += interval_tokens)
    plan.intervals.push_back({start, std::min(interval_tokens, n - start), ratio});
  return plan;
}

// CSV rows: frame_idx is the boundary frame the row would start (cut
// between frame_idx-1 and frame_idx).
inline void write_depth_csv(std::ostream& os, const DepthScores& ds, const std::vector<std::size_t>& boundaries) {
  os << "frame_idx,similarity,depth,is_boundary\n";
  for (std::size_t i = 0; i < ds.similarities.size(); ++i) {
    const bool b = std::find(boundaries.begin(), boundaries.end(), i + 1) != boundaries.end();
    os << i + 1 << ',' << ds.similarities[i] << ',';
    if (i < ds.depths.size()) os << ds.depths[i];
    os << ',' << (b ? 1 : 0) << '\n';
  }
}

// Embeddings file: one JSON header line {n_frames, dim, M} then a VXT1 record.
inline void save_frame_embeddings(const std::filesystem::path& path, const FrameEmbeddings& fe) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail_input("cannot write " + path.string());
  os << nlohmann::json{{"n_frames", fe.n_frames()}, {"dim", fe.dim()}, {"M", fe.tokens_per_frame}}.dump() << '\n';
  io::write_tensor(os, fe.embeddings);
}

inline FrameEmbeddings load_frame_embeddings(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail_input("cannot open " + path.string());
  std::string header;
  std::getline(is, header);
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    fail_input("embeddings file " + path.string() + ": bad JSON header: " + e.what());
  }
  FrameEmbeddings fe;
  fe.tokens_per_frame = h.at("M").get<std::size_t>();
  fe.embeddings = io::read_tensor<double>(is);
  require(fe.n_frames() == h.at("n_frames").get<std::size_t>() && fe.dim() == h.at("dim").get<std::size_t>(),
          "embeddings file " + path.string() + ": header disagrees with tensor shape " + fe.embeddings.shape());
  fe.validate();
  return fe;
}

}  // namespace vxl
