#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "grassmann/checkpoint.hpp"
#include "grassmann/corpus.hpp"
#include "grassmann/optim.hpp"
#include "grassmann/trainer.hpp"

using namespace grassmann;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("grassmann_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ModelConfig tiny_config(BlockKind kind) {
  ModelConfig c;
  c.block_kind = kind;
  c.vocab_size = 256;
  c.model_dim = 32;
  c.reduced_dim = 8;
  c.layers = 1;
  c.ffn_dim = 64;
  c.max_len = 32;
  c.heads = 2;
  c.dropout = 0.0;
  c.window_schedule = WindowSchedule::repeated({1, 2, 4}, 1);
  return c;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << bytes;
}

}  // namespace

// ---- corpus -------------------------------------------------------------------------

TEST(Corpus, ByteEncoding) {
  EXPECT_EQ(encode_bytes("abc"), (std::vector<std::int32_t>{97, 98, 99}));
  const std::string text = "Call me Ishmael.\n\xc3\xa9\xff";
  const auto ids = encode_bytes(text);
  for (auto id : ids) {
    EXPECT_GE(id, 0);
    EXPECT_LT(id, 256);
  }
  EXPECT_EQ(decode_bytes(ids), text);
}

TEST(Corpus, Split) {
  auto c = split_corpus(std::vector<std::int32_t>(1000, 1), 0.9);
  EXPECT_EQ(c.train.size(), 900u);
  EXPECT_EQ(c.valid.size(), 100u);
  EXPECT_THROW(split_corpus({1, 2}, 1.0), std::invalid_argument);
}

TEST(Corpus, LoadRejectsShortOrMissingFiles) {
  auto dir = temp_dir("corpus");
  write_bytes(dir / "short.txt", "abc");
  EXPECT_THROW(load_corpus((dir / "short.txt").string(), 0.9, 8), std::runtime_error);
  EXPECT_THROW(load_corpus((dir / "missing.txt").string()), std::runtime_error);
  auto bundled = load_corpus(std::string(GRASSMANN_DATA_DIR) + "/moby_dick.txt");
  EXPECT_EQ(bundled.train.size() + bundled.valid.size(), 1'000'000u);
}

TEST(Batches, TargetsAreInputsShiftedByOne) {
  std::vector<std::int32_t> seg(100);
  for (std::size_t i = 0; i < seg.size(); ++i) seg[i] = std::int32_t(i);
  BatchIterator it(seg, 8, 3, 1);
  EXPECT_EQ(it.window_count(), 12u);
  EXPECT_EQ(it.batches_per_epoch(), 4u);
  Batch b;
  std::size_t batches = 0;
  std::vector<std::size_t> seen;
  while (it.next(b)) {
    ++batches;
    ASSERT_EQ(b.inputs.size(), 24u);
    for (std::size_t i = 0; i < 24; ++i) EXPECT_EQ(b.targets[i], b.inputs[i] + 1);
    for (std::size_t w = 0; w < 3; ++w) seen.push_back(std::size_t(b.inputs[w * 8]));
  }
  EXPECT_EQ(batches, 4u);
  std::sort(seen.begin(), seen.end());
  EXPECT_TRUE(std::adjacent_find(seen.begin(), seen.end()) == seen.end());
}

TEST(Batches, OrderDependsOnlyOnSeed) {
  std::vector<std::int32_t> seg(1000, 0);
  BatchIterator a(seg, 10, 4, 5), b(seg, 10, 4, 5), c(seg, 10, 4, 6);
  EXPECT_EQ(a.window_starts(), b.window_starts());
  EXPECT_NE(a.window_starts(), c.window_starts());
  EXPECT_THROW(BatchIterator(seg, 1000, 1, 0), std::invalid_argument);
}

// ---- optimizer ----------------------------------------------------------------------

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  auto w = Tensord::from({3}, {1, -2, 3}, true);
  w.mutable_grad();
  Adam<double> opt({w}, {});
  opt.step();
  EXPECT_EQ(std::vector<double>(w.values().begin(), w.values().end()), (std::vector<double>{1, -2, 3}));
}

TEST(Adam, FirstStepMovesBySignTimesLearningRate) {
  auto w = Tensord::from({3}, {1, -2, 3}, true);
  auto g = w.mutable_grad();
  g[0] = 0.5;
  g[1] = -0.01;
  g[2] = 0.2;
  AdamConfig cfg;
  cfg.clip_norm = 0;
  Adam<double> opt({w}, cfg);
  opt.step();
  EXPECT_NEAR(w.at(0), 1 - 3e-4, 1e-9);
  EXPECT_NEAR(w.at(1), -2 + 3e-4, 1e-9);
  EXPECT_NEAR(w.at(2), 3 - 3e-4, 1e-9);
}

TEST(Adam, MinimisesQuadratic) {
  auto w = Tensord::from({4}, {1, -2, 0.5, 3}, true);
  AdamConfig cfg;
  cfg.lr = 0.1;
  Adam<double> opt({w}, cfg);
  double initial = 0;
  for (double v : w.values()) initial += v * v;
  for (int i = 0; i < 100; ++i) {
    opt.zero_grad();
    sum(mul(w, w)).backward();
    opt.step();
  }
  double final = 0;
  for (double v : w.values()) final += v * v;
  EXPECT_LT(final, 0.01 * initial);
}

TEST(Adam, ClipsGlobalNorm) {
  auto a = Tensord::from({2}, {0, 0}, true);
  auto b = Tensord::from({1}, {0}, true);
  a.mutable_grad()[0] = 3;
  a.mutable_grad()[1] = 4;
  b.mutable_grad()[0] = 12;
  Adam<double> opt({a, b}, {});
  EXPECT_DOUBLE_EQ(opt.grad_norm(), 13.0);
  EXPECT_DOUBLE_EQ(opt.clip_gradients(1.0), 13.0);
  EXPECT_NEAR(opt.grad_norm(), 1.0, 1e-12);
  EXPECT_NEAR(a.grad()[0], 3.0 / 13.0, 1e-12);
}

TEST(Adam, NonFiniteGradientIsAnError) {
  auto w = Tensord::from({1}, {1}, true);
  w.mutable_grad()[0] = std::numeric_limits<double>::quiet_NaN();
  Adam<double> opt({w}, {});
  EXPECT_THROW(opt.step(), NonFiniteError);
}

// ---- evaluation ---------------------------------------------------------------------

TEST(Evaluate, IndependentOfBatchSizeAndRepeatable) {
  auto model = init_params<double>(tiny_config(BlockKind::Grassmann), 1);
  std::mt19937_64 rng(1);
  std::vector<std::int32_t> seg(32 * 9 + 1);
  for (auto& t : seg) t = std::int32_t(rng() % 256);
  const double a = evaluate(model, seg, 32, 1);
  const double b = evaluate(model, seg, 32, 4);
  EXPECT_NEAR(a, b, 1e-10 * a);
  EXPECT_EQ(evaluate(model, seg, 32, 4), b);
}

TEST(Evaluate, UntrainedModelIsNearUniformOnRandomBytes) {
  auto model = init_params<float>(tiny_config(BlockKind::Attention), 2);
  std::mt19937_64 rng(2);
  std::vector<std::int32_t> seg(32 * 64 + 1);
  for (auto& t : seg) t = std::int32_t(rng() % 256);
  EXPECT_NEAR(evaluate(model, seg, 32, 16), 256.0, 0.2 * 256.0);
}

// ---- checkpoints --------------------------------------------------------------------

TEST(Checkpoint, RoundTripIsBitExact) {
  auto dir = temp_dir("ckpt");
  for (auto kind : {BlockKind::Grassmann, BlockKind::Attention}) {
    auto model = init_params<float>(tiny_config(kind), 3);
    save_checkpoint(model, (dir / "m.grfl").string());
    auto loaded = load_checkpoint<float>((dir / "m.grfl").string());
    EXPECT_EQ(loaded.config, model.config);
    auto pa = model.named_parameters(), pb = loaded.named_parameters();
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
      EXPECT_EQ(pa[i].first, pb[i].first);
      ASSERT_EQ(pa[i].second.numel(), pb[i].second.numel());
      EXPECT_EQ(std::memcmp(pa[i].second.values().data(), pb[i].second.values().data(),
                            pa[i].second.numel() * sizeof(float)),
                0)
          << pa[i].first;
    }
    EXPECT_EQ(serialize_checkpoint(loaded), serialize_checkpoint(model));
  }
}

TEST(Checkpoint, HeaderLayout) {
  auto model = init_params<float>(tiny_config(BlockKind::Grassmann), 4);
  const auto bytes = serialize_checkpoint(model);
  EXPECT_EQ(bytes.substr(0, 4), "GRFL");
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + 4, 4);
  EXPECT_EQ(version, 1u);
  std::uint64_t config_len;
  std::memcpy(&config_len, bytes.data() + 8, 8);
  EXPECT_EQ(bytes.substr(16, config_len), to_canonical_text(model.config));
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  auto dir = temp_dir("ckpt_bad");
  auto model = init_params<float>(tiny_config(BlockKind::Grassmann), 5);
  const auto bytes = serialize_checkpoint(model);

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  write_bytes(dir / "magic.grfl", bad_magic);
  EXPECT_THROW(load_checkpoint<float>((dir / "magic.grfl").string()), CheckpointError);

  write_bytes(dir / "short.grfl", bytes.substr(0, bytes.size() - 7));
  EXPECT_THROW(load_checkpoint<float>((dir / "short.grfl").string()), CheckpointError);

  EXPECT_THROW(load_checkpoint<float>((dir / "absent.grfl").string()), CheckpointError);
}

TEST(Checkpoint, MismatchNamesTheTensor) {
  auto dir = temp_dir("ckpt_mismatch");
  auto model = init_params<float>(tiny_config(BlockKind::Grassmann), 6);
  save_checkpoint(model, (dir / "m.grfl").string());
  auto other_cfg = tiny_config(BlockKind::Grassmann);
  other_cfg.ffn_dim = 48;
  auto other = init_params<float>(other_cfg, 6);
  try {
    load_checkpoint_into(other, (dir / "m.grfl").string());
    FAIL() << "expected CheckpointError";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("blocks.0.ffn.up.weight"), std::string::npos) << e.what();
  }
}

// ---- training -----------------------------------------------------------------------

TEST(Train, MemorisesRepeatingPattern) {
  auto dir = temp_dir("memorise");
  std::mt19937_64 rng(7);
  std::vector<std::int32_t> pattern(64);
  for (auto& t : pattern) t = std::int32_t(rng() % 256);
  std::vector<std::int32_t> ids;
  for (int rep = 0; rep < 80; ++rep) ids.insert(ids.end(), pattern.begin(), pattern.end());
  auto corpus = split_corpus(ids, 0.8);

  auto model = init_params<float>(tiny_config(BlockKind::Grassmann), 7);
  TrainConfig cfg;
  cfg.block_size = 32;
  cfg.batch_size = 8;
  cfg.epochs = 12;
  cfg.adam.lr = 3e-3;
  cfg.seed = 7;
  auto result = train(model, corpus, cfg, (dir / "best.grfl").string(), (dir / "log.csv").string());
  ASSERT_EQ(result.log.size(), 12u);
  EXPECT_LT(result.log.back().train_loss, 0.1 * result.initial_loss);
  EXPECT_LT(result.best_val_ppl, result.initial_val_ppl);
  EXPECT_EQ(result.updated_elements, param_count(model.config).total);

  // The saved checkpoint reproduces the best validation perplexity.
  auto best = load_checkpoint<float>((dir / "best.grfl").string());
  EXPECT_NEAR(evaluate(best, corpus.valid, 32, 16), result.best_val_ppl, 1e-6 * result.best_val_ppl);

  std::ifstream log(dir / "log.csv");
  std::size_t lines = 0;
  for (std::string line; std::getline(log, line);) ++lines;
  EXPECT_EQ(lines, 12u);
}

TEST(Train, ZeroEpochsSavesInitialParameters) {
  auto dir = temp_dir("zero_epochs");
  std::vector<std::int32_t> ids(2000);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = std::int32_t(i % 251);
  auto corpus = split_corpus(ids, 0.9);
  auto model = init_params<float>(tiny_config(BlockKind::Attention), 8);
  TrainConfig cfg;
  cfg.block_size = 32;
  cfg.epochs = 0;
  auto result = train(model, corpus, cfg, (dir / "best.grfl").string());
  EXPECT_TRUE(result.log.empty());
  EXPECT_EQ(result.best_epoch, 0u);
  EXPECT_EQ(read_bytes(dir / "best.grfl"), serialize_checkpoint(model));
}

TEST(Train, SameSeedGivesSameLog) {
  auto dir = temp_dir("determinism");
  std::mt19937_64 rng(9);
  std::vector<std::int32_t> ids(6000);
  for (auto& t : ids) t = std::int32_t(rng() % 64);
  auto corpus = split_corpus(ids, 0.9);
  TrainConfig cfg;
  cfg.block_size = 32;
  cfg.batch_size = 4;
  cfg.epochs = 2;
  cfg.seed = 9;
  for (auto kind : {BlockKind::Grassmann, BlockKind::Attention}) {
    auto cfg_model = tiny_config(kind);
    cfg_model.dropout = 0.1;
    std::vector<std::byte> padding;
    auto run = [&] {
      auto model = init_params<float>(cfg_model, 9);
      auto result = train(model, corpus, cfg, (dir / "best.grfl").string());
      return std::make_pair(result, serialize_checkpoint(model));
    };
    const auto a = run();
    padding.resize(40);  // perturb heap layout between the runs
    const auto b = run();
    ASSERT_EQ(a.first.log.size(), b.first.log.size());
    for (std::size_t i = 0; i < a.first.log.size(); ++i) {
      EXPECT_EQ(a.first.log[i].train_loss, b.first.log[i].train_loss) << to_string(kind);
      EXPECT_EQ(a.first.log[i].val_ppl, b.first.log[i].val_ppl) << to_string(kind);
    }
    EXPECT_EQ(a.first.initial_loss, b.first.initial_loss);
    EXPECT_TRUE(a.second == b.second) << to_string(kind) << " parameters differ after training";
  }
}

TEST(Train, RejectsBlockLongerThanModel) {
  auto dir = temp_dir("too_long");
  auto model = init_params<float>(tiny_config(BlockKind::Grassmann), 10);
  TrainConfig cfg;
  cfg.block_size = 64;
  auto corpus = split_corpus(std::vector<std::int32_t>(1000, 1), 0.5);
  EXPECT_THROW(train(model, corpus, cfg, (dir / "x.grfl").string()), std::invalid_argument);
}
