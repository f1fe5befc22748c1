#include <cmath>
#include <filesystem>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "vxl/model.hpp"

namespace vxl {
namespace {

using testing::random_ids;
using testing::random_params;
using testing::tiny_config;

TEST(ModelConfig, ValidatesShapes) {
  ModelConfig c = tiny_config();
  EXPECT_NO_THROW(c.validate());
  c.hidden_size = 17;
  EXPECT_THROW(c.validate(), Error);
  c = tiny_config();
  c.kv_heads = 3;
  EXPECT_THROW(c.validate(), Error);
  c = tiny_config();
  c.context_window = 1;
  EXPECT_THROW(c.validate(), Error);
}

TEST(ModelConfig, JsonUsesFieldNames) {
  const nlohmann::json j = ModelConfig{};
  for (const char* key : {"n_layers", "hidden_size", "query_heads", "kv_heads", "head_dim", "intermediate_size",
                          "vocab_size", "context_window", "precision"})
    EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_EQ(j.get<ModelConfig>(), ModelConfig{});
  EXPECT_EQ(j["hidden_size"], 64);
  EXPECT_EQ(j["context_window"], 512);
}

TEST(ForwardFull, SingleTokenShape) {
  const auto p = random_params(tiny_config(), 1);
  const auto logits = forward_full(p, {3});
  EXPECT_EQ(logits.rows(), 1u);
  EXPECT_EQ(logits.cols(), 32u);
}

TEST(ForwardFull, IsDeterministic) {
  const auto p = random_params(tiny_config(), 2);
  Rng rng(3);
  const auto ids = random_ids(20, 32, rng);
  EXPECT_EQ(forward_full(p, ids), forward_full(p, ids));
}

TEST(ForwardFull, IsCausal) {
  const auto p = random_params(tiny_config(1), 4);
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const auto ids = random_ids(12, 32, rng);
    const auto base = forward_full(p, ids);
    const std::size_t t = rng.uniform_int(ids.size());
    auto altered = ids;
    for (std::size_t i = t + 1; i < ids.size(); ++i) altered[i] = 0;
    std::reverse(altered.begin() + static_cast<std::ptrdiff_t>(t + 1), altered.end());
    const auto other = forward_full(p, altered);
    for (std::size_t r = 0; r <= t; ++r)
      for (std::size_t c = 0; c < base.cols(); ++c) ASSERT_EQ(base(r, c), other(r, c));
  }
}

TEST(ForwardFull, RejectsOverlongInput) {
  auto cfg = tiny_config();
  cfg.context_window = 8;
  const auto p = random_params(cfg, 6);
  EXPECT_THROW(forward_full(p, TokenIds(9, 1)), Error);
  EXPECT_THROW(forward_full(p, TokenIds{40}), Error);
}

TEST(ForwardFull, ShiftingPositionsLeavesLogitsUnchanged) {
  const auto p = random_params(tiny_config(), 7);
  Rng rng(8);
  const auto ids = random_ids(16, 32, rng);
  EXPECT_LT(max_abs_diff(forward_full(p, ids), forward_full(p, ids, nullptr, 1000)), 1e-9);
}

TEST(ForwardStep, EmptyCacheReproducesFullExactly) {
  const auto p = random_params(tiny_config(), 9);
  Rng rng(10);
  const auto ids = random_ids(16, 32, rng);
  auto caches = empty_kv_caches<double>(p.config);
  EXPECT_EQ(forward_step(p, caches, ids), forward_full(p, ids));
}

TEST(ForwardStep, OneTokenAtATimeMatchesFull) {
  const auto p = random_params(tiny_config(), 11);
  Rng rng(12);
  const auto ids = random_ids(16, 32, rng);
  const auto full = forward_full(p, ids);
  auto caches = empty_kv_caches<double>(p.config);
  Mat<double> stepped(0, 32);
  for (auto id : ids) stepped.append_rows(forward_step(p, caches, {id}));
  EXPECT_LT(max_abs_diff(full, stepped), 1e-9);
}

TEST(ForwardStep, AnyPrefixSuffixSplitMatchesFull) {
  const auto p = random_params(tiny_config(1), 13);
  Rng rng(14);
  for (int trial = 0; trial < 10; ++trial) {
    const auto ids = random_ids(2 + rng.uniform_int(40), 32, rng);
    const std::size_t cut = rng.uniform_int(ids.size() + 1);
    auto caches = empty_kv_caches<double>(p.config);
    Mat<double> stepped = forward_step(p, caches, TokenIds(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(cut)));
    stepped.append_rows(forward_step(p, caches, TokenIds(ids.begin() + static_cast<std::ptrdiff_t>(cut), ids.end())));
    EXPECT_LT(max_abs_diff(forward_full(p, ids), stepped), 1e-9);
  }
}

TEST(ForwardStep, CacheGrowsByNewTokens) {
  const auto p = random_params(tiny_config(), 15);
  auto caches = empty_kv_caches<double>(p.config);
  forward_step(p, caches, {1, 2, 3});
  forward_step(p, caches, {4, 5});
  for (const auto& c : caches) {
    EXPECT_EQ(c.size(), 5u);
    EXPECT_EQ(c.keys.rows(), 5u);
    EXPECT_EQ(c.values.rows(), 5u);
  }
}

TEST(ForwardStep, PositionConflictIsAnError) {
  const auto p = random_params(tiny_config(), 16);
  auto caches = empty_kv_caches<double>(p.config);
  forward_step(p, caches, {1, 2, 3});
  EXPECT_THROW(forward_step(p, caches, {4}, std::int64_t{1}), Error);
  EXPECT_NO_THROW(forward_step(p, caches, {4}, std::int64_t{10}));
  caches.pop_back();
  EXPECT_THROW(forward_step(p, caches, {4}), Error);
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
  EXPECT_NEAR(cross_entropy(Mat<double>(3, 4, 0.0), {0, 1, 3}), std::log(4.0), 1e-15);
}

TEST(CrossEntropy, SaturatedCorrectLogitsGiveNearZero) {
  Mat<double> logits(2, 4, 0.0);
  logits(0, 2) = 20.0;
  logits(1, 0) = 20.0;
  EXPECT_LT(cross_entropy(logits, {2, 0}), 1e-8);
}

TEST(CrossEntropy, MatchesScalarLoopReference) {
  Rng rng(17);
  const auto logits = random_normal<double>(8, 32, 3.0, rng);
  const auto targets = random_ids(8, 32, rng);
  double ref = 0;
  for (std::size_t r = 0; r < 8; ++r) {
    double z = 0;
    for (std::size_t c = 0; c < 32; ++c) z += std::exp(logits(r, c));
    ref += std::log(z) - logits(r, targets[r]);
  }
  EXPECT_NEAR(cross_entropy(logits, targets), ref / 8, 1e-12);
}

TEST(CrossEntropy, TargetOutsideVocabIsAnError) {
  EXPECT_THROW(cross_entropy(Mat<double>(1, 4), {4}), Error);
  EXPECT_THROW(cross_entropy(Mat<double>(2, 4), {1}), Error);
}

TEST(Params, SaveLoadRoundTrip) {
  const auto p = random_params(tiny_config(1), 18);
  const auto dir = std::filesystem::temp_directory_path() / "vxl_model_test";
  std::filesystem::create_directories(dir);
  save_params(dir / "m", p);
  const auto q = load_params<double>(dir / "m");
  EXPECT_EQ(q.config, p.config);
  Rng rng(19);
  const auto ids = random_ids(10, 32, rng);
  EXPECT_EQ(forward_full(q, ids), forward_full(p, ids));
}

TEST(Precision, SinglePrecisionTracksDouble) {
  const auto p = random_params(tiny_config(), 20);
  Rng rng(21);
  const auto ids = random_ids(12, 32, rng);
  const auto a = forward_full(p, ids);
  const auto b = forward_full(p.cast<float>(), ids).cast<double>();
  EXPECT_LT(max_abs_diff(a, b), 1e-3);
}

}  // namespace
}  // namespace vxl
