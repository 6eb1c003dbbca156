#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "grassmann/checks.hpp"
#include "grassmann/model.hpp"
#include "grassmann/optim.hpp"

using namespace grassmann;

namespace {

ModelConfig toy_config() {
  ModelConfig c;
  c.vocab_size = 10;
  c.model_dim = 4;
  c.reduced_dim = 2;
  c.layers = 1;
  c.ffn_dim = 16;
  c.max_len = 8;
  c.window_schedule = WindowSchedule::repeated({1, 2}, 1);
  c.tie_lm_head = false;
  return c;
}

ModelConfig small_config(BlockKind kind) {
  ModelConfig c;
  c.block_kind = kind;
  c.vocab_size = 32;
  c.model_dim = 16;
  c.reduced_dim = 4;
  c.layers = 2;
  c.ffn_dim = 32;
  c.max_len = 128;
  c.heads = 2;
  c.window_schedule = WindowSchedule::repeated({1, 2, 4}, 2);
  return c;
}

std::vector<std::int32_t> random_tokens(std::mt19937_64& rng, std::size_t n, std::size_t vocab) {
  std::vector<std::int32_t> t(n);
  for (auto& x : t) x = std::int32_t(rng() % vocab);
  return t;
}

}  // namespace

TEST(ParamCount, ToyModel) {
  const auto b = param_count(toy_config());
  EXPECT_EQ(b.total, 340u);
  // 40 + 32 + 10 + 8 + 36 + 148 + 16 + 40 + 10
  std::size_t sum = 0;
  for (const auto& [name, n] : b.components) sum += n;
  EXPECT_EQ(sum, b.total);
  auto model = init_params<double>(toy_config(), 0);
  EXPECT_EQ(model.parameter_elements(), 340u);
}

TEST(ParamCount, PublishedPresetsWithinFivePercent) {
  const std::vector<std::pair<std::string, double>> published{{"grassmann-6x128", 13.00e6},
                                                              {"transformer-6x128", 12.59e6},
                                                              {"grassmann-12x256", 18.16e6},
                                                              {"transformer-12x256", 17.32e6}};
  for (const auto& [name, target] : published) {
    const double total = double(param_count(preset(name)).total);
    EXPECT_LE(std::abs(total - target) / target, 0.05) << name << " has " << total;
  }
}

TEST(ParamCount, MatchesOptimizerOwnedElements) {
  for (auto kind : {BlockKind::Grassmann, BlockKind::Attention}) {
    auto model = init_params<float>(small_config(kind), 1);
    std::vector<Tensorf> params;
    model.for_each_parameter([&](const std::string&, Tensorf& t) { params.push_back(t); });
    Adam<float> opt(params, {});
    EXPECT_EQ(opt.parameter_elements(), param_count(model.config).total);
  }
}

TEST(Presets, AllValidAndUnknownRejected) {
  for (const auto& name : preset_names()) EXPECT_NO_THROW(preset(name)) << name;
  EXPECT_THROW(preset("grassmann-huge"), std::invalid_argument);
}

TEST(Config, CanonicalTextRoundTrip) {
  for (const auto& name : preset_names()) {
    const auto c = preset(name);
    EXPECT_EQ(parse_config_text(to_canonical_text(c)), c) << name;
  }
  auto c = toy_config();
  c.dropout = 0.25;
  c.pairing = Pairing::Forward;
  EXPECT_EQ(parse_config_text(to_canonical_text(c)), c);
}

TEST(Config, ValidationRejectsBadShapes) {
  auto c = toy_config();
  c.reduced_dim = 4;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = small_config(BlockKind::Attention);
  c.heads = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Init, DeterministicInSeed) {
  auto a = init_params<float>(small_config(BlockKind::Grassmann), 7);
  auto b = init_params<float>(small_config(BlockKind::Grassmann), 7);
  auto c = init_params<float>(small_config(BlockKind::Grassmann), 8);
  auto pa = a.named_parameters(), pb = b.named_parameters(), pc = c.named_parameters();
  ASSERT_EQ(pa.size(), pb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    auto va = pa[i].second.values(), vb = pb[i].second.values(), vc = pc[i].second.values();
    EXPECT_TRUE(std::equal(va.begin(), va.end(), vb.begin())) << pa[i].first;
    any_diff = any_diff || !std::equal(va.begin(), va.end(), vc.begin());
  }
  EXPECT_TRUE(any_diff);
}

TEST(Init, WeightStandardDeviation) {
  auto model = init_params<float>(preset("grassmann-6x128"), 3);
  double s = 0, ss = 0;
  std::size_t n = 0;
  for (auto& [name, t] : model.named_parameters()) {
    if (t.rank() != 2) continue;
    for (float v : t.values()) {
      s += v;
      ss += double(v) * v;
      ++n;
    }
  }
  ASSERT_GE(n, 1'000'000u);
  const double mean = s / double(n), sd = std::sqrt(ss / double(n) - mean * mean);
  EXPECT_NEAR(sd, 0.02, 0.02 * 0.02);
}

TEST(Init, BiasesZeroGainsOne) {
  auto model = init_params<double>(small_config(BlockKind::Grassmann), 4);
  for (auto& [name, t] : model.named_parameters()) {
    if (name.ends_with(".bias"))
      for (double v : t.values()) EXPECT_EQ(v, 0.0) << name;
    if (name.ends_with(".gain"))
      for (double v : t.values()) EXPECT_EQ(v, 1.0) << name;
  }
}

TEST(Forward, LogitShapes) {
  for (auto kind : {BlockKind::Grassmann, BlockKind::Attention}) {
    auto model = init_params<float>(small_config(kind), 5);
    std::mt19937_64 rng(5);
    for (std::size_t len : {1u, 128u}) {
      auto tokens = random_tokens(rng, len, 32);
      EXPECT_EQ(lm_forward(model, std::span<const std::int32_t>(tokens)).shape(), (Shape{len, 32}));
    }
    auto batch = random_tokens(rng, 3 * 16, 32);
    EXPECT_EQ(lm_forward(model, std::span<const std::int32_t>(batch), std::size_t(16)).shape(), (Shape{48, 32}));
    auto too_long = random_tokens(rng, 129, 32);
    EXPECT_THROW(lm_forward(model, std::span<const std::int32_t>(too_long)), std::exception);
  }
}

TEST(Forward, UntrainedLossNearUniform) {
  for (auto kind : {BlockKind::Grassmann, BlockKind::Attention}) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      auto model = init_params<float>(preset(kind == BlockKind::Grassmann ? "grassmann-desk" : "transformer-desk"), seed);
      std::mt19937_64 rng(seed);
      auto tokens = random_tokens(rng, 65, 256);
      std::span<const std::int32_t> in(tokens.data(), 64), tgt(tokens.data() + 1, 64);
      NoGradGuard no_grad;
      const double loss = cross_entropy(lm_forward(model, in), tgt).item();
      EXPECT_NEAR(loss / std::log(256.0), 1.0, 0.15) << "seed " << seed;
    }
  }
}

TEST(Forward, FullModelCausality) {
  for (auto kind : {BlockKind::Grassmann, BlockKind::Attention}) {
    auto model = init_params<double>(small_config(kind), 6);
    std::mt19937_64 rng(6);
    auto probe = checks::probe_causality(model, random_tokens(rng, 24, 32));
    EXPECT_TRUE(probe.prefix_unchanged) << to_string(kind) << " leaks at " << probe.first_violation;
    EXPECT_TRUE(probe.suffix_changed);
  }
  auto causal = checks::causality_suite();
  for (const auto& r : causal) EXPECT_TRUE(r.passed) << checks::describe(r);
}

TEST(Forward, DoubleAndFloatAgree) {
  auto md = init_params<double>(small_config(BlockKind::Grassmann), 9);
  auto mf = cast_model<float>(md);
  std::mt19937_64 rng(9);
  auto tokens = random_tokens(rng, 32, 32);
  auto a = lm_forward(md, std::span<const std::int32_t>(tokens));
  auto b = lm_forward(mf, std::span<const std::int32_t>(tokens));
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.at(i), b.at(i), 1e-4);
}

TEST(Generate, GreedyIsDeterministicAndMatchesStepwiseArgmax) {
  auto model = init_params<float>(small_config(BlockKind::Grassmann), 10);
  const std::vector<std::int32_t> prompt{1, 2, 3};
  auto a = generate(model, prompt, 8, 0.0, 1);
  auto b = generate(model, prompt, 8, 0.0, 99);
  EXPECT_EQ(a, b);
  ASSERT_EQ(a.size(), 11u);

  std::vector<std::int32_t> ctx = prompt;
  for (int step = 0; step < 8; ++step) {
    auto logits = lm_forward(model, std::span<const std::int32_t>(ctx));
    auto last = logits.values().subspan((ctx.size() - 1) * 32, 32);
    ctx.push_back(std::int32_t(std::max_element(last.begin(), last.end()) - last.begin()));
  }
  EXPECT_EQ(a, ctx);
}

TEST(Generate, EdgeCases) {
  auto model = init_params<float>(small_config(BlockKind::Attention), 11);
  EXPECT_EQ(generate(model, {4, 5}, 0, 1.0, 0), (std::vector<std::int32_t>{4, 5}));
  EXPECT_THROW(generate(model, {}, 3, 1.0, 0), std::invalid_argument);
  EXPECT_THROW(generate(model, {1}, 3, -1.0, 0), std::invalid_argument);
  auto sampled = generate(model, {1}, 20, 1.0, 5);
  EXPECT_EQ(sampled, generate(model, {1}, 20, 1.0, 5));
  for (auto t : sampled) {
    EXPECT_GE(t, 0);
    EXPECT_LT(t, 32);
  }
  // Longer than max_len: the context window slides.
  EXPECT_EQ(generate(model, std::vector<std::int32_t>(127, 3), 4, 0.0, 0).size(), 131u);
}
