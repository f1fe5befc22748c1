#include <functional>

#include <gtest/gtest.h>

#include "vxl/autodiff.hpp"

namespace vxl {
namespace {

using ad::Tape;
using ad::Var;
using BuildFn = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

// Scalarizes an op's output with a fixed random weighting and compares
// the tape gradient against central differences for every input entry.
void check_gradients(std::vector<Mat<double>> inputs, const BuildFn& build, std::uint64_t seed = 11) {
  Rng rng(seed);
  Mat<double> weight;
  auto scalar = [&](Tape<double>& tape, const std::vector<Var>& vars) {
    const Var out = build(tape, vars);
    const auto& ov = tape.value(out);
    if (weight.empty()) weight = random_normal<double>(ov.rows(), ov.cols(), 1.0, rng);
    const Var w = tape.constant(weight);
    const Var left = tape.constant(Mat<double>(1, ov.rows(), 1.0));
    const Var right = tape.constant(Mat<double>(ov.cols(), 1, 1.0));
    return tape.matmul(tape.matmul(left, tape.mul(out, w)), right);
  };
  auto evaluate = [&]() {
    Tape<double> tape(false);
    std::vector<Var> vars;
    for (auto& m : inputs) vars.push_back(tape.constant(m));
    return tape.value(scalar(tape, vars))(0, 0);
  };

  Tape<double> tape(true);
  std::vector<Var> vars;
  for (auto& m : inputs) vars.push_back(tape.param(m));
  const Var loss = scalar(tape, vars);
  tape.backward(loss);

  const double h = 1e-6;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Mat<double> g = tape.grad(vars[i]).empty() ? Mat<double>(inputs[i].rows(), inputs[i].cols())
                                                     : tape.grad(vars[i]);
    for (std::size_t e = 0; e < inputs[i].size(); ++e) {
      double& x = inputs[i].data()[e];
      const double keep = x;
      x = keep + h;
      const double up = evaluate();
      x = keep - h;
      const double down = evaluate();
      x = keep;
      const double fd = (up - down) / (2 * h);
      EXPECT_NEAR(g.data()[e], fd, 1e-6 * (1.0 + std::abs(fd))) << "input " << i << " entry " << e;
    }
  }
}

Mat<double> rnd(std::size_t r, std::size_t c, std::uint64_t seed, double std = 1.0) {
  Rng rng(seed);
  return random_normal<double>(r, c, std, rng);
}

TEST(TapeGradients, Matmul) {
  check_gradients({rnd(3, 4, 1), rnd(4, 2, 2)}, [](auto& t, const auto& v) { return t.matmul(v[0], v[1]); });
}

TEST(TapeGradients, AddMulSilu) {
  check_gradients({rnd(3, 4, 3), rnd(3, 4, 4)},
                  [](auto& t, const auto& v) { return t.silu(t.mul(t.add(v[0], v[1]), v[0])); });
}

TEST(TapeGradients, RmsNormWithGain) {
  check_gradients({rnd(3, 6, 5), rnd(1, 6, 6)}, [](auto& t, const auto& v) { return t.rms_norm(v[0], v[1]); });
}

TEST(TapeGradients, GatherScatterConcat) {
  check_gradients({rnd(4, 3, 7), rnd(2, 3, 8)}, [](auto& t, const auto& v) {
    const Var g = t.gather_rows(v[0], {3, 0, 0, 2});
    const Var s = t.scatter_rows(6, {{g, {5, 1, 2, 0}}, {v[1], {4, 3}}});
    return t.concat_rows(s, v[0]);
  });
}

TEST(TapeGradients, Rope) {
  check_gradients({rnd(3, 8, 9)}, [](auto& t, const auto& v) { return t.rope(v[0], {0, 5, 17}, 4); });
}

TEST(TapeGradients, GroupedAttentionWithPrefixLimits) {
  // 4 query heads share 2 kv heads; 5 keys, 3 queries with limits 3,4,5.
  check_gradients({rnd(3, 4 * 2, 10), rnd(5, 2 * 2, 11), rnd(5, 2 * 2, 12)}, [](auto& t, const auto& v) {
    return t.attention(v[0], v[1], v[2], {3, 4, 5}, 4, 2, 2);
  });
}

TEST(TapeGradients, CrossEntropy) {
  check_gradients({rnd(4, 5, 13)}, [](auto& t, const auto& v) { return t.cross_entropy(v[0], {1, 3}, {4, 0}, 0.5); });
}

TEST(Tape, AttentionCountsDenseScoreAndValueProducts) {
  OpCounter counter;
  Tape<double> tape(false, &counter);
  const Var q = tape.constant(rnd(3, 8, 1));
  const Var k = tape.constant(rnd(5, 4, 2));
  const Var v = tape.constant(rnd(5, 4, 3));
  tape.attention(q, k, v, {1, 2, 3}, 4, 2, 2);
  EXPECT_EQ(counter.multiply_adds, 2u * 4 * 3 * 5 * 2);
}

TEST(Tape, RopeIsRelative) {
  // <R(p)q, R(p')k> depends only on p - p'.
  const auto q = rnd(1, 8, 20), k = rnd(1, 8, 21);
  auto dot = [&](std::int64_t pq, std::int64_t pk) {
    Tape<double> t;
    const auto& a = t.value(t.rope(t.constant(q), {pq}, 8));
    const auto& b = t.value(t.rope(t.constant(k), {pk}, 8));
    double s = 0;
    for (std::size_t i = 0; i < 8; ++i) s += a(0, i) * b(0, i);
    return s;
  };
  EXPECT_NEAR(dot(7, 3), dot(107, 103), 1e-12);
}

TEST(Tape, NoGradientWhenNothingRequiresIt) {
  Tape<double> tape(true);
  const auto a = rnd(2, 2, 1);
  const Var x = tape.constant(a);
  const Var y = tape.cross_entropy(tape.matmul(x, x), {0}, {1}, 1.0);
  tape.backward(y);
  EXPECT_TRUE(tape.grad(x).empty());
}

TEST(Tape, BackwardNeedsScalarRoot) {
  Tape<double> tape(true);
  const auto a = rnd(2, 2, 1);
  EXPECT_THROW(tape.backward(tape.param(a)), Error);
}

}  // namespace
}  // namespace vxl
