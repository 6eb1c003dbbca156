// Training loop, perplexity evaluation and the per-epoch log.
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "grassmann/checkpoint.hpp"
#include "grassmann/corpus.hpp"
#include "grassmann/model.hpp"
#include "grassmann/optim.hpp"

namespace grassmann {

struct TrainConfig {
  std::size_t block_size = 128;
  std::size_t batch_size = 16;
  std::size_t epochs = 3;
  AdamConfig adam;
  std::uint64_t seed = 0;
  std::size_t eval_interval = 1;  // epochs between validation passes
  std::size_t eval_batch_size = 16;

  void validate() const {
    if (block_size == 0 || batch_size == 0 || eval_batch_size == 0 || eval_interval == 0)
      throw std::invalid_argument("block size, batch sizes and eval interval must be positive");
    adam.validate();
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0;
  double val_ppl = 0;  // NaN when validation was skipped this epoch
  double seconds = 0;
};

struct TrainResult {
  std::vector<EpochRecord> log;
  double initial_loss = std::numeric_limits<double>::quiet_NaN();  // first batch, before any update
  double initial_val_ppl = 0;
  double best_val_ppl = 0;
  std::size_t best_epoch = 0;  // 0 means the initial parameters
  std::size_t steps = 0;
  std::size_t updated_elements = 0;  // elements the optimizer owns
};

/// `epoch,train_loss,val_ppl,seconds`
inline std::string format_log_line(const EpochRecord& r) {
  std::ostringstream os;
  os.precision(10);
  os << r.epoch << ',' << r.train_loss << ',' << r.val_ppl << ',' << r.seconds;
  return os.str();
}

/// Per-token cross-entropy summed in double over every length-L window of the
/// segment, in source order, `batch_size` windows per forward pass.
template <class T>
double cross_entropy_sum(const LanguageModel<T>& model, std::span<const std::int32_t> segment, std::size_t seq_len,
                         std::size_t batch_size, std::size_t& tokens) {
  if (segment.size() <= seq_len)
    throw std::invalid_argument("evaluate: segment of " + std::to_string(segment.size()) +
                                " tokens is too short for L=" + std::to_string(seq_len));
  NoGradGuard no_grad;
  const std::size_t windows = (segment.size() - 1) / seq_len;
  const std::size_t vocab = model.config.vocab_size;
  double total = 0;
  tokens = 0;
  for (std::size_t w0 = 0; w0 < windows; w0 += batch_size) {
    const std::size_t nb = std::min(batch_size, windows - w0);
    std::span<const std::int32_t> inputs(segment.data() + w0 * seq_len, nb * seq_len);
    auto logits = lm_forward(model, inputs, seq_len);
    const auto lv = logits.values();
    for (std::size_t i = 0; i < nb * seq_len; ++i) {
      const auto row = lv.subspan(i * vocab, vocab);
      const std::int32_t target = segment[w0 * seq_len + i + 1];
      double mx = -std::numeric_limits<double>::infinity();
      for (T v : row) mx = std::max(mx, double(v));
      double s = 0;
      for (T v : row) s += std::exp(double(v) - mx);
      total += std::log(s) + mx - double(row[std::size_t(target)]);
    }
    tokens += nb * seq_len;
  }
  return total;
}

/// exp of the token-weighted mean cross-entropy over the segment.
template <class T>
double evaluate(const LanguageModel<T>& model, std::span<const std::int32_t> segment, std::size_t seq_len,
                std::size_t batch_size) {
  std::size_t tokens = 0;
  const double total = cross_entropy_sum(model, segment, seq_len, batch_size, tokens);
  return std::exp(total / double(tokens));
}

using ProgressFn = std::function<void(const std::string&)>;

/// Trains with Adam for `cfg.epochs` epochs. The checkpoint at `checkpoint_path`
/// always holds the parameters with the best validation perplexity seen so far,
/// starting with the initial parameters. When `log_path` is non-empty one line
/// per epoch is appended there.
template <class T>
TrainResult train(LanguageModel<T>& model, const Corpus& corpus, const TrainConfig& cfg,
                  const std::string& checkpoint_path, const std::string& log_path = "",
                  const ProgressFn& progress = {}) {
  cfg.validate();
  if (cfg.block_size > model.config.max_len)
    throw std::invalid_argument("block size exceeds the model's max_len");
  std::vector<Tensor<T>> params;
  model.for_each_parameter([&](const std::string&, Tensor<T>& t) { params.push_back(t); });
  Adam<T> opt(params, cfg.adam);

  TrainResult result;
  result.updated_elements = opt.parameter_elements();
  result.initial_val_ppl = evaluate(model, corpus.valid, cfg.block_size, cfg.eval_batch_size);
  result.best_val_ppl = result.initial_val_ppl;
  save_checkpoint(model, checkpoint_path);

  std::ofstream log_file;
  if (!log_path.empty()) {
    log_file.open(log_path, std::ios::trunc);
    if (!log_file) throw std::runtime_error("cannot write training log '" + log_path + "'");
  }
  std::mt19937_64 dropout_rng(cfg.seed ^ 0xd1b54a32d192ed03ULL);
  Batch batch;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    BatchIterator it(corpus.train, cfg.block_size, cfg.batch_size, cfg.seed + epoch);
    double loss_sum = 0;
    std::size_t batches = 0;
    while (it.next(batch)) {
      opt.zero_grad();
      double loss_value = 0;
      try {
        auto logits = lm_forward(model, batch.inputs, cfg.block_size, true, dropout_rng());
        auto loss = cross_entropy(logits, std::span<const std::int32_t>(batch.targets));
        loss_value = loss.item();
        loss.backward();
        opt.step();
      } catch (const NonFiniteError& e) {
        throw NonFiniteError("training diverged at epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(result.steps + 1) + ": " + e.what());
      }
      if (batches == 0 && epoch == 1) result.initial_loss = loss_value;
      loss_sum += loss_value;
      ++batches;
      ++result.steps;
      if (progress && batches % 50 == 0) {
        std::ostringstream os;
        os << "epoch " << epoch << " batch " << batches << '/' << it.batches_per_epoch() << " loss "
           << loss_sum / double(batches);
        progress(os.str());
      }
    }
    if (batches == 0) throw std::invalid_argument("training segment yields no full batch");
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / double(batches);
    rec.val_ppl = std::numeric_limits<double>::quiet_NaN();
    if (epoch % cfg.eval_interval == 0 || epoch == cfg.epochs) {
      rec.val_ppl = evaluate(model, corpus.valid, cfg.block_size, cfg.eval_batch_size);
      if (rec.val_ppl < result.best_val_ppl) {
        result.best_val_ppl = rec.val_ppl;
        result.best_epoch = epoch;
        save_checkpoint(model, checkpoint_path);
      }
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.log.push_back(rec);
    if (log_file) log_file << format_log_line(rec) << '\n' << std::flush;
    if (progress) progress(format_log_line(rec));
  }
  return result;
}

}  // namespace grassmann
