// Binary model checkpoints.
//
// Layout (all integers little-endian):
//   "GRFL"                      magic
//   u32 version = 1
//   u64 config length, then the canonical config text
//   u32 tensor count, then per tensor:
//     u32 name length, name bytes, u32 dtype (0 = f32, 1 = f64),
//     u32 rank, u64 extents[rank], u64 byte offset into the data section
//   raw IEEE-754 little-endian tensor data, in table order
#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "grassmann/model.hpp"

namespace grassmann {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::array<char, 4> kCheckpointMagic{'G', 'R', 'F', 'L'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class U>
void put_le(std::string& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(char((std::uint64_t(value) >> (8 * i)) & 0xff));
}

template <class F>
void put_float_le(std::string& out, F value) {
  using Bits = std::conditional_t<sizeof(F) == 4, std::uint32_t, std::uint64_t>;
  put_le(out, std::bit_cast<Bits>(value));
}

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}

  template <class U>
  U get() {
    need(sizeof(U));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= std::uint64_t(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return U(v);
  }

  std::string bytes(std::size_t n) {
    need(n);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  template <class F>
  F get_float() {
    using Bits = std::conditional_t<sizeof(F) == 4, std::uint32_t, std::uint64_t>;
    return std::bit_cast<F>(get<Bits>());
  }

  std::size_t position() const { return pos_; }
  void seek(std::size_t p) {
    if (p > data_.size()) throw CheckpointError("checkpoint truncated");
    pos_ = p;
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::string data_;
  std::size_t pos_ = 0;
};

struct TableEntry {
  std::string name;
  DType dtype;
  Shape shape;
  std::uint64_t offset;
};

}  // namespace detail

template <class T>
std::string serialize_checkpoint(LanguageModel<T>& model) {
  auto params = model.named_parameters();
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  const auto config = to_canonical_text(model.config);
  detail::put_le<std::uint64_t>(out, config.size());
  out += config;
  detail::put_le<std::uint32_t>(out, std::uint32_t(params.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, t] : params) {
    detail::put_le<std::uint32_t>(out, std::uint32_t(name.size()));
    out += name;
    detail::put_le<std::uint32_t>(out, std::uint32_t(dtype_of<T>()));
    detail::put_le<std::uint32_t>(out, std::uint32_t(t.rank()));
    for (auto e : t.shape()) detail::put_le<std::uint64_t>(out, e);
    detail::put_le<std::uint64_t>(out, offset);
    offset += t.numel() * sizeof(T);
  }
  for (const auto& [name, t] : params)
    for (T v : t.values()) detail::put_float_le(out, v);
  return out;
}

template <class T>
void save_checkpoint(LanguageModel<T>& model, const std::string& path) {
  const auto bytes = serialize_checkpoint(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint '" + path + "'");
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw CheckpointError("failed writing checkpoint '" + path + "'");
}

namespace detail {

struct ParsedCheckpoint {
  ModelConfig config;
  std::vector<TableEntry> table;
  std::size_t data_start = 0;
};

inline ParsedCheckpoint parse_header(Reader& in) {
  auto magic = in.bytes(4);
  if (std::memcmp(magic.data(), kCheckpointMagic.data(), 4) != 0) throw CheckpointError("bad checkpoint magic");
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  ParsedCheckpoint parsed;
  const auto config_len = in.get<std::uint64_t>();
  parsed.config = parse_config_text(in.bytes(config_len));
  const auto count = in.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    TableEntry e;
    e.name = in.bytes(in.get<std::uint32_t>());
    const auto dtype = in.get<std::uint32_t>();
    if (dtype > 1) throw CheckpointError("tensor '" + e.name + "' has unknown dtype " + std::to_string(dtype));
    e.dtype = DType(dtype);
    const auto rank = in.get<std::uint32_t>();
    for (std::uint32_t k = 0; k < rank; ++k) e.shape.push_back(std::size_t(in.get<std::uint64_t>()));
    e.offset = in.get<std::uint64_t>();
    parsed.table.push_back(std::move(e));
  }
  parsed.data_start = in.position();
  return parsed;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

template <class T>
void fill_model(LanguageModel<T>& model, Reader& in, const ParsedCheckpoint& parsed) {
  auto params = model.named_parameters();
  if (params.size() != parsed.table.size())
    throw CheckpointError("checkpoint holds " + std::to_string(parsed.table.size()) + " tensors, model has " +
                          std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = parsed.table[i];
    auto& [name, t] = params[i];
    if (e.name != name)
      throw CheckpointError("tensor " + std::to_string(i) + " is '" + e.name + "', model expects '" + name + "'");
    if (e.shape != t.shape())
      throw CheckpointError("tensor '" + name + "' has shape " + shape_str(e.shape) + ", model expects " +
                            shape_str(t.shape()));
    in.seek(parsed.data_start + e.offset);
    auto values = t.mutable_values();
    for (auto& v : values)
      v = e.dtype == DType::Float32 ? T(in.get_float<float>()) : T(in.get_float<double>());
  }
}

}  // namespace detail

/// Loads parameters into an existing model. Any difference in tensor names or
/// shapes is an error naming the offending tensor.
template <class T>
void load_checkpoint_into(LanguageModel<T>& model, const std::string& path) {
  detail::Reader in(detail::read_file(path));
  auto parsed = detail::parse_header(in);
  detail::fill_model(model, in, parsed);
}

/// Reconstructs a model from the config embedded in the checkpoint.
template <class T>
LanguageModel<T> load_checkpoint(const std::string& path) {
  detail::Reader in(detail::read_file(path));
  auto parsed = detail::parse_header(in);
  auto model = init_params<T>(parsed.config, 0);
  detail::fill_model(model, in, parsed);
  return model;
}

}  // namespace grassmann
