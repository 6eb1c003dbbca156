// Byte-level corpora and next-token batching.
#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace grassmann {

inline constexpr std::size_t kByteVocab = 256;

inline std::vector<std::int32_t> encode_bytes(std::string_view text) {
  std::vector<std::int32_t> ids(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) ids[i] = std::int32_t(static_cast<unsigned char>(text[i]));
  return ids;
}

inline std::string decode_bytes(std::span<const std::int32_t> ids) {
  std::string out(ids.size(), '\0');
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= std::int32_t(kByteVocab))
      throw std::out_of_range("decode_bytes: id " + std::to_string(ids[i]) + " is not a byte");
    out[i] = char(static_cast<unsigned char>(ids[i]));
  }
  return out;
}

/// Token ids split into a leading training segment and a trailing validation segment.
struct Corpus {
  std::vector<std::int32_t> train;
  std::vector<std::int32_t> valid;
};

inline Corpus split_corpus(std::vector<std::int32_t> ids, double split_fraction) {
  if (!(split_fraction > 0 && split_fraction < 1))
    throw std::invalid_argument("split fraction must lie in (0, 1)");
  const auto n_train = std::size_t(double(ids.size()) * split_fraction);
  Corpus c;
  c.valid.assign(ids.begin() + std::ptrdiff_t(n_train), ids.end());
  ids.resize(n_train);
  c.train = std::move(ids);
  return c;
}

/// Reads a UTF-8 text file as bytes. The file must hold at least
/// 2 * block_size bytes.
inline Corpus load_corpus(const std::string& path, double split_fraction = 0.9, std::size_t block_size = 1) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open corpus '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 2 * block_size)
    throw std::runtime_error("corpus '" + path + "' has " + std::to_string(bytes.size()) +
                             " bytes, need at least " + std::to_string(2 * block_size));
  return split_corpus(encode_bytes(bytes), split_fraction);
}

struct Batch {
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
  std::vector<std::int32_t> inputs;   // [B x L] row-major
  std::vector<std::int32_t> targets;  // inputs shifted by one source position
};

/// Non-overlapping length-L windows starting at multiples of L, each with
/// its shifted target window. An epoch visits every window at most once in an
/// order shuffled by the seed; a trailing partial batch is dropped.
class BatchIterator {
 public:
  BatchIterator(std::span<const std::int32_t> segment, std::size_t seq_len, std::size_t batch_size,
                std::uint64_t seed)
      : segment_(segment), seq_len_(seq_len), batch_size_(batch_size) {
    if (seq_len == 0 || batch_size == 0) throw std::invalid_argument("batch_iter: L and B must be positive");
    if (segment.size() <= seq_len)
      throw std::invalid_argument("batch_iter: segment of " + std::to_string(segment.size()) +
                                  " tokens is too short for L=" + std::to_string(seq_len));
    starts_.resize(window_count());
    for (std::size_t i = 0; i < starts_.size(); ++i) starts_[i] = i * seq_len;
    std::mt19937_64 rng(seed);
    std::shuffle(starts_.begin(), starts_.end(), rng);
  }

  std::size_t window_count() const { return (segment_.size() - 1) / seq_len_; }
  std::size_t batches_per_epoch() const { return window_count() / batch_size_; }

  bool next(Batch& batch) {
    if (cursor_ + batch_size_ > starts_.size()) return false;
    batch.batch_size = batch_size_;
    batch.seq_len = seq_len_;
    batch.inputs.resize(batch_size_ * seq_len_);
    batch.targets.resize(batch_size_ * seq_len_);
    for (std::size_t b = 0; b < batch_size_; ++b) {
      const std::size_t s = starts_[cursor_ + b];
      std::copy_n(segment_.begin() + std::ptrdiff_t(s), seq_len_, batch.inputs.begin() + std::ptrdiff_t(b * seq_len_));
      std::copy_n(segment_.begin() + std::ptrdiff_t(s + 1), seq_len_,
                  batch.targets.begin() + std::ptrdiff_t(b * seq_len_));
    }
    cursor_ += batch_size_;
    return true;
  }

  const std::vector<std::size_t>& window_starts() const { return starts_; }

 private:
  std::span<const std::int32_t> segment_;
  std::size_t seq_len_;
  std::size_t batch_size_;
  std::vector<std::size_t> starts_;
  std::size_t cursor_ = 0;
};

}  // namespace grassmann
