#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "vxl/compressor.hpp"
#include "vxl/harness.hpp"
#include "vxl/partitioner.hpp"
#include "vxl/tensor_io.hpp"

namespace vxl {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct CliResult {
  int code = -1;
  json status;
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() / ("vxl_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  CliResult vxl(const std::string& args, const std::string& env = "") {
    const fs::path out = dir / "stdout.txt";
    const std::string cmd = env + (env.empty() ? "" : " ") + VXL_CLI_PATH + " " + args + " > " + out.string() + " 2> " +
                            (dir / "stderr.txt").string();
    const int raw = std::system(cmd.c_str());
    CliResult r;
    r.code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    std::istringstream lines(slurp(out));
    std::string line, last;
    int n = 0;
    while (std::getline(lines, line))
      if (!line.empty()) last = line, ++n;
    EXPECT_EQ(n, 1) << "expected one status line";
    if (!last.empty()) r.status = json::parse(last);
    return r;
  }

  std::string path(const std::string& name) const { return (dir / name).string(); }

  void write(const std::string& name, const json& j) { std::ofstream(dir / name) << j.dump(); }

  fs::path dir;
};

ModelConfig small_model() {
  ModelConfig c;
  c.hidden_size = 32;
  c.query_heads = 2;
  c.kv_heads = 2;
  c.head_dim = 16;
  c.intermediate_size = 64;
  c.vocab_size = 256;
  c.context_window = 300;
  return c;
}

TEST_F(Cli, CostReportsCompressedBelowFull) {
  const auto r = vxl("cost --n 4096 --w 512 --alpha 8 --sweep 1024,4096 --out " + path("o"));
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(r.status["status"], "ok");
  EXPECT_LT(r.status["flops_compressed"].get<std::uint64_t>(), r.status["flops_full"].get<std::uint64_t>());
  const auto report = json::parse(slurp(dir / "o" / "cost.json"));
  EXPECT_EQ(report["compressed"]["total"], r.status["flops_compressed"]);
  EXPECT_EQ(slurp(dir / "o" / "sweep.csv").substr(0, 57), "n,flops_full,flops_compressed,kv_rows_full,kv_rows_compre");
  EXPECT_TRUE(fs::exists(dir / "o" / "effective_config.json"));
}

TEST_F(Cli, GradcheckDefaultPasses) {
  const auto r = vxl("gradcheck --instances 1 --out " + path("o"));
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.status["pass"], true);
}

TEST_F(Cli, GradcheckReportsInjectedFault) {
  const auto r = vxl("gradcheck --instances 1 --scope vst_only --fault-block vst.embed --out " + path("o"));
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.status["status"], "fail");
}

TEST_F(Cli, PartitionConstantStreamGivesMaximalIntervals) {
  FrameEmbeddings fe;
  fe.embeddings = Mat<double>(100, 4);
  for (std::size_t r = 0; r < 100; ++r) fe.embeddings(r, 0) = 1.0;
  save_frame_embeddings(dir / "flat.vxe", fe);
  const auto r = vxl("partition --embeddings " + path("flat.vxe") + " --out " + path("o"));
  ASSERT_EQ(r.code, 0);
  const auto plan = json::parse(slurp(dir / "o" / "plan.json")).get<CompressionPlan>();
  ASSERT_EQ(plan.intervals.size(), 2u);  // 400 tokens under a 256-token cap
  EXPECT_EQ(plan.intervals[0].width + plan.intervals[1].width, 400u);
  EXPECT_TRUE(r.status["boundaries"].empty());
}

TEST_F(Cli, PartitionFindsSceneCut) {
  Rng rng(9);
  save_frame_embeddings(dir / "two.vxe", two_scene_embeddings(40, 17, 16, 4, rng));
  const auto r = vxl("partition --embeddings " + path("two.vxe") + " --out " + path("o"));
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(r.status["boundaries"], json::array({17}));
  EXPECT_EQ(r.status["intervals"], 2);
  EXPECT_NE(slurp(dir / "o" / "depth.csv").find('\n'), std::string::npos);
}

TEST_F(Cli, PartitionMissingFileIsInputError) {
  const auto r = vxl("partition --embeddings " + path("nope.vxe") + " --out " + path("o"));
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(r.status["status"], "error");
  EXPECT_FALSE(slurp(dir / "stderr.txt").empty());
}

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(vxl("").code, 2);
  EXPECT_EQ(vxl("cost --alpha 0").code, 2);
  EXPECT_EQ(vxl("frobnicate").code, 2);
}

TEST_F(Cli, PassthroughMatchesFullAttention) {
  Rng rng(3);
  const auto params = Params<double>::init(small_model(), rng, 0.1);
  save_params(dir / "p", params);
  TokenIds ids(150);
  for (auto& x : ids) x = static_cast<std::uint32_t>(rng.uniform_int(256));
  write("ids.json", ids);
  write("plan.json", fixed_partition(ids.size(), 40, 1));
  const auto r = vxl("encode --passthrough --params " + path("p") + " --ids " + path("ids.json") + " --plan " +
                     path("plan.json") + " --out " + path("o"));
  ASSERT_EQ(r.code, 0);
  const auto logits = io::load_tensor(dir / "o" / "logits.vxt").values;
  EXPECT_LT(max_abs_diff(logits, forward_full(params, ids)), 1e-9);
}

TEST_F(Cli, SavedCacheDecodesBitIdentically) {
  Rng rng(4);
  const auto params = Params<double>::init(small_model(), rng, 0.1);
  const auto vst = VstParams<double>::init(params, rng);
  save_params(dir / "p", params);
  save_vst(dir / "v", vst);
  TokenIds ids(96);
  for (auto& x : ids) x = static_cast<std::uint32_t>(rng.uniform_int(256));
  write("ids.json", ids);
  const auto plan = fixed_partition(ids.size(), 32, 4);
  write("plan.json", plan);
  const auto enc = vxl("encode --params " + path("p") + " --vst " + path("v") + " --ids " + path("ids.json") +
                       " --plan " + path("plan.json") + " --out " + path("e"));
  ASSERT_EQ(enc.code, 0);
  EXPECT_EQ(enc.status["cache_rows"], 24);
  EXPECT_TRUE(fs::exists(dir / "e" / "trace.csv"));
  const auto dec = vxl("decode --params " + path("p") + " --cache " + path("e/cache") + " --prompt 1,2,3 --max-new 4 --out " +
                       path("d"));
  ASSERT_EQ(dec.code, 0);

  const auto direct = decode_with_cache(params, encode_sequence(params, vst, ids, plan).cache, {1, 2, 3}, 4);
  EXPECT_EQ(dec.status["generated"].get<TokenIds>(), direct.generated);
  const auto logits = io::load_tensor(dir / "d" / "logits.vxt").values;
  ASSERT_EQ(logits.rows(), 4u);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < logits.cols(); ++c) ASSERT_EQ(logits(i, c), direct.step_logits[i](0, c));
}

TEST_F(Cli, PlanIdsMismatchIsInputError) {
  write("ids.json", TokenIds(10, 5));
  write("plan.json", fixed_partition(12, 4, 2));
  const auto r = vxl("encode --ids " + path("ids.json") + " --plan " + path("plan.json") + " --out " + path("o"));
  EXPECT_EQ(r.code, 2);
}

TEST_F(Cli, SeedFallsBackToEnvironment) {
  write("ids.json", TokenIds{5, 6, 7, 8});
  const std::string args = "encode --passthrough --ids " + path("ids.json");
  ASSERT_EQ(vxl(args + " --seed 5 --out " + path("a")).code, 0);
  ASSERT_EQ(vxl(args + " --out " + path("b"), "VXL_SEED=5").code, 0);
  ASSERT_EQ(vxl(args + " --out " + path("c"), "VXL_SEED=6").code, 0);
  EXPECT_EQ(slurp(dir / "a" / "logits.vxt"), slurp(dir / "b" / "logits.vxt"));
  EXPECT_NE(slurp(dir / "a" / "logits.vxt"), slurp(dir / "c" / "logits.vxt"));
  EXPECT_EQ(vxl(args + " --out " + path("d"), "VXL_SEED=x").code, 2);
}

TEST_F(Cli, DumpAndLoadRoundTrip) {
  Mat<double> m(2, 3, std::vector<double>{1.5, -2, 0.125, 3, 4, 1e-300});
  io::save_tensor(dir / "m.vxt", m);
  const auto d = vxl("dump --in " + path("m.vxt") + " --out " + path("d"));
  ASSERT_EQ(d.code, 0);
  EXPECT_EQ(d.status["tensors"][0]["rows"], 2);
  const auto l = vxl("load --in " + path("d/tensor_0.csv") + " --out " + path("l"));
  ASSERT_EQ(l.code, 0);
  EXPECT_EQ(io::load_tensor(dir / "l" / "tensor.vxt").values, m);
}

json tiny_run_config() {
  return {{"model", small_model()},
          {"pretrain_task", {{"min_frames", 2}, {"max_frames", 6}, {"vocab_size", 256}}},
          {"pretrain", {{"total_steps", 3}, {"batch_size", 2}, {"trainable_scope", "all"}}},
          {"task", {{"min_frames", 4}, {"max_frames", 8}, {"vocab_size", 256}}},
          {"train", {{"total_steps", 4}, {"batch_size", 2}}},
          {"eval_lengths", {6, 12}},
          {"eval_depths", {0.0, 1.0}},
          {"eval_trials", 2}};
}

TEST_F(Cli, TrainIsByteReproducibleAndEvalConsumesItsOutput) {
  write("run.json", tiny_run_config());
  for (const char* o : {"a", "b"}) {
    const auto r = vxl("train --config " + path("run.json") + " --seed 7 --out " + path(o));
    ASSERT_EQ(r.code, 0) << slurp(dir / "stderr.txt");
    EXPECT_EQ(r.status["steps"], 4);
  }
  for (const char* f : {"loss.csv", "pretrain_loss.csv", "base.bin", "vst.bin", "effective_config.json"})
    EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
  const auto cfg = json::parse(slurp(dir / "a" / "effective_config.json"));
  EXPECT_EQ(cfg["train"]["total_steps"], 4);
  EXPECT_EQ(cfg["seed"], 7);

  const auto e = vxl("eval --config " + path("run.json") + " --base " + path("a/base") + " --vst " + path("a/vst") +
                     " --ratio 2 --out " + path("g"));
  ASSERT_EQ(e.code, 0) << slurp(dir / "stderr.txt");
  EXPECT_EQ(e.status["ratio"], 2);
  EXPECT_EQ(slurp(dir / "g" / "grid.csv").substr(0, 33), "length_frames,depth,accuracy,tria");
}

TEST_F(Cli, FlagsOverrideConfigValues) {
  write("run.json", tiny_run_config());
  const auto r = vxl("train --config " + path("run.json") + " --steps 2 --lr 0.01 --out " + path("o"));
  ASSERT_EQ(r.code, 0);
  const auto cfg = json::parse(slurp(dir / "o" / "effective_config.json"));
  EXPECT_EQ(cfg["train"]["total_steps"], 2);
  EXPECT_EQ(cfg["train"]["learning_rate"], 0.01);
  EXPECT_EQ(r.status["steps"], 2);
}

TEST_F(Cli, AblateWritesPairedSummary) {
  write("run.json", tiny_run_config());
  const auto r = vxl("ablate --config " + path("run.json") + " --seeds 2 --final-window 2 --out " + path("o"));
  ASSERT_EQ(r.code, 0) << slurp(dir / "stderr.txt");
  const auto s = json::parse(slurp(dir / "o" / "ablation.json"));
  EXPECT_EQ(s["runs"].size(), 2u);
  EXPECT_TRUE(s.contains("loss_ordering_holds"));
  EXPECT_TRUE(r.status["loss_ordering_holds"].is_boolean());
}

TEST_F(Cli, BadConfigIsInputError) {
  write("run.json", json{{"train", {{"optimizer", "lbfgs"}}}});
  EXPECT_EQ(vxl("train --config " + path("run.json") + " --out " + path("o")).code, 2);
}

}  // namespace
}  // namespace vxl
