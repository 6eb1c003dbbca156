#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

#include "grassmann/gradcheck.hpp"
#include "grassmann/ops.hpp"

using namespace grassmann;

namespace {

Tensord random_tensor(std::mt19937_64& rng, Shape shape, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = normal(rng);
  return Tensord::from(std::move(shape), std::move(v));
}

// Independent reference: plain triple loop.
std::vector<double> naive_matmul(const Tensord& a, const Tensord& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) out[i * n + j] += a.at(i * k + p) * b.at(p * n + j);
  return out;
}

std::vector<double> to_vec(const Tensord& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

// ---- matmul ---------------------------------------------------------------------

TEST(Matmul, IdentityLeavesOperandUnchanged) {
  auto eye = Tensord::from({2, 2}, {1, 0, 0, 1});
  auto b = Tensord::from({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(to_vec(matmul(eye, b)), to_vec(b));
}

TEST(Matmul, SmallExample) {
  auto a = Tensord::from({2, 2}, {1, 2, 3, 4});
  auto b = Tensord::from({2, 1}, {1, 1});
  auto c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(to_vec(c), (std::vector<double>{3, 7}));
  EXPECT_EQ(to_vec(c), naive_matmul(a, b));
}

TEST(Matmul, ZeroAnnihilates) {
  std::mt19937_64 rng(1);
  auto b = random_tensor(rng, {3, 4});
  auto c = matmul(Tensord::zeros({2, 3}), b);
  for (double v : c.values()) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, MatchesNaiveOracleOnRandomShapes) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<std::size_t> dim(1, 17);
  for (int trial = 0; trial < 50; ++trial) {
    auto a = random_tensor(rng, {dim(rng), dim(rng)});
    auto b = random_tensor(rng, {a.dim(1), dim(rng)});
    const auto got = to_vec(matmul(a, b));
    const auto want = naive_matmul(a, b);
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(Matmul, InnerExtentMismatchThrows) {
  EXPECT_THROW(matmul(Tensord::zeros({2, 3}), Tensord::zeros({2, 3})), ShapeError);
}

// ---- elementwise ------------------------------------------------------------------

TEST(Elementwise, Examples) {
  auto x = Tensord::from({3}, {1.5, -2, 4});
  EXPECT_EQ(to_vec(add(x, Tensord::zeros({3}))), to_vec(x));
  auto cat = concat_last(Tensord::from({2}, {1, 2}), Tensord::from({1}, {3}));
  EXPECT_EQ(to_vec(cat), (std::vector<double>{1, 2, 3}));
  EXPECT_EQ(to_vec(mul(Tensord::from({2}, {2, 3}), Tensord::from({2}, {4, 5}))), (std::vector<double>{8, 15}));
  EXPECT_EQ(to_vec(scale(x, 2.0)), (std::vector<double>{3, -4, 8}));
  EXPECT_EQ(to_vec(sub(x, x)), (std::vector<double>{0, 0, 0}));
}

TEST(Elementwise, RowBroadcast) {
  auto m = Tensord::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto row = Tensord::from({3}, {10, 20, 30});
  EXPECT_EQ(to_vec(add(m, row)), (std::vector<double>{11, 22, 33, 14, 25, 36}));
}

TEST(Elementwise, IncompatibleShapesThrow) {
  EXPECT_THROW(add(Tensord::zeros({2, 3}), Tensord::zeros({2, 2})), ShapeError);
  EXPECT_THROW(concat_last(Tensord::zeros({2, 3}), Tensord::zeros({3, 1})), ShapeError);
}

// ---- activations ------------------------------------------------------------------

TEST(Activations, Examples) {
  EXPECT_DOUBLE_EQ(sigmoid(Tensord::scalar(0.0)).item(), 0.5);
  EXPECT_NEAR(gelu(Tensord::scalar(1.0)).item(), 0.5 * (1 + std::erf(1 / std::sqrt(2.0))), 1e-15);
  EXPECT_NEAR(gelu(Tensord::scalar(1.0)).item(), 0.84134, 1e-5);
  for (double c : {-50.0, 0.0, 3.0, 700.0}) {
    auto s = softmax_last(Tensord::from({1, 3}, {c, c, c}));
    for (double v : s.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  }
}

TEST(Activations, SoftmaxRowsSumToOneAndIgnoreShift) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor(rng, {4, 7}, 5.0);
    auto s = softmax_last(x);
    auto shifted = softmax_last(add(x, Tensord::scalar(123.25)));
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0;
      for (std::size_t c = 0; c < 7; ++c) {
        total += s.at(r * 7 + c);
        EXPECT_NEAR(s.at(r * 7 + c), shifted.at(r * 7 + c), 1e-12);
      }
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
  }
}

// ---- layer norm ---------------------------------------------------------------------

TEST(LayerNorm, ConstantRowMapsToZero) {
  auto y = layer_norm(Tensord::full({1, 5}, 3.0), Tensord::full({5}, 1.0), Tensord::zeros({5}));
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, ReferenceFormula) {
  auto y = layer_norm(Tensord::from({1, 3}, {1, 2, 3}), Tensord::full({3}, 1.0), Tensord::zeros({3}));
  const double var = 2.0 / 3.0, s = std::sqrt(var + kLayerNormEps);
  EXPECT_NEAR(y.at(0), -1 / s, 1e-12);
  EXPECT_NEAR(y.at(1), 0.0, 1e-12);
  EXPECT_NEAR(y.at(2), 1 / s, 1e-12);
  EXPECT_NEAR(y.at(2), std::sqrt(1.5), 1e-4);
}

TEST(LayerNorm, StandardisedInputIsNearlyUnchanged) {
  auto x = Tensord::from({1, 4}, {-1, -1, 1, 1});
  auto y = layer_norm(x, Tensord::full({4}, 1.0), Tensord::zeros({4}));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y.at(i), x.at(i), 1e-5);
}

TEST(LayerNorm, RowStatistics) {
  std::mt19937_64 rng(4);
  auto x = random_tensor(rng, {32, 16}, 3.0);
  auto y = layer_norm(x, Tensord::full({16}, 1.0), Tensord::zeros({16}));
  for (std::size_t r = 0; r < 32; ++r) {
    double mean = 0, var = 0;
    for (std::size_t c = 0; c < 16; ++c) mean += y.at(r * 16 + c);
    mean /= 16;
    for (std::size_t c = 0; c < 16; ++c) var += (y.at(r * 16 + c) - mean) * (y.at(r * 16 + c) - mean);
    var /= 16;
    EXPECT_LE(std::abs(mean), 1e-6);
    EXPECT_NEAR(var, 1.0, 1e-4);
  }
}

// ---- dropout --------------------------------------------------------------------------

TEST(Dropout, IdentityCases) {
  std::mt19937_64 rng(5);
  auto x = random_tensor(rng, {8, 8});
  EXPECT_EQ(to_vec(dropout(x, 0.0, true, 7)), to_vec(x));
  EXPECT_EQ(to_vec(dropout(x, 0.9, false, 7)), to_vec(x));
}

TEST(Dropout, DeterministicMaskPreservesMean) {
  auto x = Tensord::full({100000}, 1.0);
  auto a = dropout(x, 0.5, true, 11);
  auto b = dropout(x, 0.5, true, 11);
  EXPECT_EQ(to_vec(a), to_vec(b));
  const double mean = std::accumulate(a.values().begin(), a.values().end(), 0.0) / 1e5;
  EXPECT_NEAR(mean, 1.0, 0.05);
  for (double v : a.values()) EXPECT_TRUE(v == 0.0 || v == 2.0);
}

TEST(Dropout, RejectsBadRate) {
  auto x = Tensord::zeros({3});
  EXPECT_THROW(dropout(x, 1.0, true, 0), std::invalid_argument);
  EXPECT_THROW(dropout(x, -0.1, true, 0), std::invalid_argument);
}

// ---- cross entropy ------------------------------------------------------------------

TEST(CrossEntropy, Examples) {
  const std::vector<std::int32_t> t3{0, 4, 2};
  auto uniform = cross_entropy(Tensord::full({3, 7}, 0.3), std::span<const std::int32_t>(t3));
  EXPECT_NEAR(uniform.item(), std::log(7.0), 1e-12);

  const std::vector<std::int32_t> t1{0};
  auto two = cross_entropy(Tensord::from({1, 2}, {1, 0}), std::span<const std::int32_t>(t1));
  EXPECT_NEAR(two.item(), -std::log(std::exp(1.0) / (std::exp(1.0) + 1)), 1e-12);
  EXPECT_NEAR(two.item(), 0.3133, 1e-4);

  auto confident = cross_entropy(Tensord::from({1, 2}, {60, 0}), std::span<const std::int32_t>(t1));
  EXPECT_LT(confident.item(), 1e-20);
}

TEST(CrossEntropy, TargetOutOfRangeThrows) {
  const std::vector<std::int32_t> bad{3};
  EXPECT_THROW(cross_entropy(Tensord::zeros({1, 3}), std::span<const std::int32_t>(bad)), std::out_of_range);
}

// ---- backward -------------------------------------------------------------------------

TEST(Backward, SumOfSquares) {
  auto x = Tensord::from({4}, {1, -2, 0.5, 3}, true);
  sum(mul(x, x)).backward();
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2 * x.at(i));
}

TEST(Backward, SumOfProductMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  auto a = random_tensor(rng, {3, 4});
  auto b = random_tensor(rng, {4, 2});
  EXPECT_LE(grad_check([&] { return sum(matmul(a, b)); }, {a, b}), 1e-6);
}

TEST(Backward, ConstantOutputGivesZeroGrads) {
  auto x = Tensord::from({3}, {1, 2, 3}, true);
  sum(scale(x, 0.0)).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, GradsAccumulateUntilCleared) {
  auto x = Tensord::from({2}, {1.5, -1}, true);
  auto loss = [&] { return sum(mul(x, x)); };
  loss().backward();
  loss().backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
  x.zero_grad();
  loss().backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 3.0);
}

TEST(Backward, SharedSubexpressionSumsBothPaths) {
  auto x = Tensord::from({1}, {2.0}, true);
  auto y = mul(x, x);
  sum(add(y, y)).backward();  // d/dx 2x^2 = 4x
  EXPECT_DOUBLE_EQ(x.grad()[0], 8.0);
}

TEST(Backward, NonScalarOutputThrows) {
  auto x = Tensord::from({2}, {1, 2}, true);
  EXPECT_THROW(mul(x, x).backward(), ShapeError);
}

TEST(Backward, NoGradGuardStopsRecording) {
  auto x = Tensord::from({2}, {1, 2}, true);
  Tensord y;
  {
    NoGradGuard guard;
    y = mul(x, x);
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(grad_enabled());
}

TEST(Forward, NonFiniteResultIsAnError) {
  auto x = Tensord::from({2}, {1e308, 1e308});
  EXPECT_THROW(add(x, x), NonFiniteError);
  EXPECT_THROW(scale(x, std::numeric_limits<double>::infinity()), NonFiniteError);
}

TEST(Forward, ReplayIsBitIdentical) {
  std::mt19937_64 rng(8);
  auto x = random_tensor(rng, {6, 5});
  auto w = random_tensor(rng, {4, 5});
  auto bias = random_tensor(rng, {4});
  auto gain = random_tensor(rng, {4});
  auto run = [&] {
    auto h = gelu(linear(x, w, bias));
    return softmax_last(dropout(layer_norm(h, gain, bias), 0.3, true, 99));
  };
  const auto a = run(), b = run();
  ASSERT_EQ(a.numel(), b.numel());
  EXPECT_EQ(std::memcmp(a.values().data(), b.values().data(), a.numel() * sizeof(double)), 0);
}

// ---- gradient checker -------------------------------------------------------------------

TEST(GradCheck, LinearFunctionIsExact) {
  std::mt19937_64 rng(9);
  auto x = random_tensor(rng, {3, 4});
  auto w = random_tensor(rng, {2, 4});
  EXPECT_LE(grad_check([&] { return linear(x, w, Tensord()); }, {x, w}), 1e-9);
}

TEST(GradCheck, DetectsCorruptedRule) {
  // Square with a deliberately wrong derivative 3x instead of 2x.
  auto bad_square = [](const Tensord& x) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) * x.at(i);
    return make_op<double>("bad_square", x.shape(), std::move(out), {x}, [](Node<double>& n) {
      auto& p = *n.parents[0];
      auto& g = p.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += 3 * p.value[i] * n.grad[i];
    });
  };
  std::mt19937_64 rng(10);
  auto x = random_tensor(rng, {5});
  EXPECT_GE(grad_check([&] { return bad_square(x); }, {x}), 1e-2);
}

// Randomised composites of every diffcore op, in double at h = 1e-5.
TEST(GradCheck, RandomCompositesMatchFiniteDifferences) {
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<std::size_t> dim(3, 6);
  double worst = 0;
  for (int trial = 0; trial < 120; ++trial) {
    const std::size_t rows = dim(rng), in = dim(rng), out = dim(rng);
    auto x = random_tensor(rng, {rows, in});
    auto w = random_tensor(rng, {out, in}, 0.5);
    auto b = random_tensor(rng, {out}, 0.1);
    auto gain = random_tensor(rng, {out}, 0.2);
    for (auto& g : gain.mutable_values()) g += 1.0;
    auto other = random_tensor(rng, {rows, out});
    std::vector<std::int32_t> targets(rows);
    for (auto& t : targets) t = std::int32_t(rng() % (2 * out));
    const auto seed = rng();
    std::function<Tensord()> f;
    switch (trial % 4) {
      case 0:
        f = [&] { return layer_norm(gelu(linear(x, w, b)), gain, b); };
        break;
      case 1:
        f = [&] { return mul(softmax_last(linear(x, w, b)), sub(other, sigmoid(other))); };
        break;
      case 2:
        f = [&] {
          auto h = concat_last(gelu(linear(x, w, b)), other);
          return cross_entropy(dropout(h, 0.2, true, seed), std::span<const std::int32_t>(targets));
        };
        break;
      default:
        f = [&] { return mean(mul(scale(matmul(x, reshape(w, {in, out})), 0.5), add(other, gain))); };
        break;
    }
    worst = std::max(worst, grad_check(f, {x, w, b, gain, other}));
  }
  EXPECT_LE(worst, 1e-5);
}
