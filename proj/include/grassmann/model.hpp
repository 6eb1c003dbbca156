// Language models built from stacked mixing blocks: token + positional
// embeddings, N blocks, and a linear vocabulary head.
#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "grassmann/mixing.hpp"

namespace grassmann {

enum class BlockKind { Grassmann, Attention };

inline const char* to_string(BlockKind k) { return k == BlockKind::Grassmann ? "grassmann" : "attention"; }

inline BlockKind parse_block_kind(const std::string& s) {
  if (s == "grassmann") return BlockKind::Grassmann;
  if (s == "attention" || s == "transformer") return BlockKind::Attention;
  throw std::invalid_argument("unknown block kind '" + s + "'");
}

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t model_dim = 128;
  std::size_t reduced_dim = 16;
  std::size_t layers = 4;
  std::size_t ffn_dim = 512;
  std::size_t max_len = 128;
  std::size_t heads = 4;
  BlockKind block_kind = BlockKind::Grassmann;
  WindowSchedule window_schedule = WindowSchedule::repeated({1, 2, 4, 8}, 4);
  double dropout = 0.1;
  bool tie_lm_head = false;
  double init_std = 0.02;
  Pairing pairing = Pairing::Backward;

  void validate() const {
    if (vocab_size < 2) throw std::invalid_argument("vocab_size must be >= 2");
    if (layers < 1) throw std::invalid_argument("layers must be >= 1");
    if (model_dim < 1 || ffn_dim < 1 || max_len < 1) throw std::invalid_argument("dimensions must be positive");
    if (!(dropout >= 0 && dropout < 1)) throw std::invalid_argument("dropout must lie in [0, 1)");
    if (block_kind == BlockKind::Grassmann) {
      if (reduced_dim < 2 || reduced_dim >= model_dim)
        throw std::invalid_argument("reduced_dim must satisfy 2 <= r < d");
      window_schedule.validate(layers, max_len);
    } else if (heads == 0 || model_dim % heads != 0) {
      throw std::invalid_argument("model_dim must be divisible by heads");
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

// ---- canonical text form ----------------------------------------------------

inline std::string format_schedule(const WindowSchedule& s) {
  std::ostringstream os;
  for (std::size_t l = 0; l < s.per_layer.size(); ++l) {
    if (l) os << ';';
    for (std::size_t i = 0; i < s.per_layer[l].size(); ++i) os << (i ? "," : "") << s.per_layer[l][i];
  }
  return os.str();
}

inline std::vector<std::size_t> parse_size_list(const std::string& text, char sep = ',') {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, sep)) {
    if (item.empty()) continue;
    std::size_t pos = 0;
    const auto v = std::stoull(item, &pos);
    if (pos != item.size()) throw std::invalid_argument("not an integer: '" + item + "'");
    out.push_back(std::size_t(v));
  }
  return out;
}

/// Layers separated by ';', offsets by ','. A single set without ';' is
/// repeated across `layers`.
inline WindowSchedule parse_schedule(const std::string& text, std::size_t layers) {
  if (text.find(';') == std::string::npos) return WindowSchedule::repeated(parse_size_list(text), layers);
  WindowSchedule s;
  std::stringstream ss(text);
  std::string layer;
  while (std::getline(ss, layer, ';')) s.per_layer.push_back(normalize_offsets(parse_size_list(layer)));
  return s;
}

/// One `key=value` line per field, fixed order. Doubles use round-trip precision.
inline std::string to_canonical_text(const ModelConfig& c) {
  std::ostringstream os;
  os.precision(17);
  os << "block_kind=" << to_string(c.block_kind) << '\n'
     << "vocab_size=" << c.vocab_size << '\n'
     << "model_dim=" << c.model_dim << '\n'
     << "reduced_dim=" << c.reduced_dim << '\n'
     << "layers=" << c.layers << '\n'
     << "ffn_dim=" << c.ffn_dim << '\n'
     << "max_len=" << c.max_len << '\n'
     << "heads=" << c.heads << '\n'
     << "window_schedule=" << format_schedule(c.window_schedule) << '\n'
     << "dropout=" << c.dropout << '\n'
     << "tie_lm_head=" << (c.tie_lm_head ? "true" : "false") << '\n'
     << "init_std=" << c.init_std << '\n'
     << "pairing=" << to_string(c.pairing) << '\n';
  return os.str();
}

/// Parses the canonical text form. Unspecified keys keep their defaults;
/// `ffn_dim` defaults to 4 * model_dim and the schedule to {1,2,4,8} per layer.
/// Blank lines and lines starting with '#' are ignored.
inline ModelConfig parse_config_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("config line without '=': " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  ModelConfig c;
  auto take = [&](const std::string& key) -> const std::string* {
    auto it = kv.find(key);
    return it == kv.end() ? nullptr : &it->second;
  };
  auto size_of = [](const std::string& v) { return std::size_t(std::stoull(v)); };
  if (auto v = take("block_kind")) c.block_kind = parse_block_kind(*v);
  if (auto v = take("vocab_size")) c.vocab_size = size_of(*v);
  if (auto v = take("model_dim")) c.model_dim = size_of(*v);
  if (auto v = take("reduced_dim")) c.reduced_dim = size_of(*v);
  if (auto v = take("layers")) c.layers = size_of(*v);
  c.ffn_dim = 4 * c.model_dim;
  if (auto v = take("ffn_dim")) c.ffn_dim = size_of(*v);
  if (auto v = take("max_len")) c.max_len = size_of(*v);
  if (auto v = take("heads")) c.heads = size_of(*v);
  c.window_schedule = WindowSchedule::repeated({1, 2, 4, 8}, c.layers);
  if (auto v = take("window_schedule")) c.window_schedule = parse_schedule(*v, c.layers);
  if (auto v = take("dropout")) c.dropout = std::stod(*v);
  if (auto v = take("tie_lm_head")) c.tie_lm_head = (*v == "true" || *v == "1");
  if (auto v = take("init_std")) c.init_std = std::stod(*v);
  if (auto v = take("pairing")) c.pairing = parse_pairing(*v);
  static const std::vector<std::string> known{"block_kind", "vocab_size", "model_dim", "reduced_dim",
                                              "layers",     "ffn_dim",    "max_len",   "heads",
                                              "window_schedule", "dropout", "tie_lm_head",
                                              "init_std",   "pairing"};
  for (const auto& [key, _] : kv)
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw std::invalid_argument("unknown config key '" + key + "'");
  c.validate();
  return c;
}

// ---- presets ---------------------------------------------------------------

/// Named configurations. The four published ones use a 30,522-token vocabulary
/// with the output head tied to the token embedding; the `*-desk` presets are
/// byte-level models sized for CPU training.
inline ModelConfig preset(const std::string& name) {
  ModelConfig c;
  c.dropout = 0.1;
  auto published = [&](BlockKind kind, std::size_t layers, std::size_t max_len) {
    c.block_kind = kind;
    c.vocab_size = 30522;
    c.model_dim = 256;
    c.reduced_dim = 32;
    c.layers = layers;
    c.ffn_dim = 1024;
    c.max_len = max_len;
    c.heads = 4;
    c.tie_lm_head = true;
    if (layers == 6)
      c.window_schedule = WindowSchedule::repeated({1, 2, 4, 8, 12, 16}, 6);
    else
      c.window_schedule = WindowSchedule::per_layer_single({1, 1, 2, 2, 4, 4, 8, 8, 12, 12, 16, 16});
  };
  auto desk = [&](BlockKind kind) {
    c.block_kind = kind;
    c.vocab_size = 256;
    c.model_dim = 128;
    c.reduced_dim = 16;
    c.layers = 4;
    c.ffn_dim = 512;
    c.max_len = 128;
    c.heads = 4;
    c.window_schedule = WindowSchedule::repeated({1, 2, 4, 8}, 4);
  };
  if (name == "grassmann-6x128") published(BlockKind::Grassmann, 6, 128);
  else if (name == "transformer-6x128") published(BlockKind::Attention, 6, 128);
  else if (name == "grassmann-12x256") published(BlockKind::Grassmann, 12, 256);
  else if (name == "transformer-12x256") published(BlockKind::Attention, 12, 256);
  else if (name == "grassmann-desk") desk(BlockKind::Grassmann);
  else if (name == "transformer-desk") desk(BlockKind::Attention);
  else throw std::invalid_argument("unknown preset '" + name + "'");
  c.validate();
  return c;
}

inline std::vector<std::string> preset_names() {
  return {"grassmann-6x128", "transformer-6x128", "grassmann-12x256", "transformer-12x256",
          "grassmann-desk", "transformer-desk"};
}

// ---- parameter counting ------------------------------------------------------

struct ParamBreakdown {
  std::vector<std::pair<std::string, std::size_t>> components;
  std::size_t total = 0;
};

/// Exact learnable element count, grouped by component and summed over layers.
inline ParamBreakdown param_count(const ModelConfig& c) {
  const std::size_t d = c.model_dim, f = c.ffn_dim, n = c.layers;
  ParamBreakdown b;
  auto add = [&](std::string name, std::size_t count) {
    b.components.emplace_back(std::move(name), count);
    b.total += count;
  };
  add("token_embedding", c.vocab_size * d);
  add("position_embedding", c.max_len * d);
  if (c.block_kind == BlockKind::Grassmann) {
    const std::size_t r = c.reduced_dim, pc = geometry::plucker_dim(r);
    add("reduction", n * (r * d + r));
    add("plucker_projection", n * (d * pc + d));
    add("gate", n * (d * 2 * d + d));
  } else {
    add("attention_qkv", n * 3 * (d * d + d));
    add("attention_output", n * (d * d + d));
  }
  add("feed_forward", n * (f * d + f + d * f + d));
  add("layer_norms", n * 4 * d);
  add("lm_head_weight", c.tie_lm_head ? 0 : c.vocab_size * d);
  add("lm_head_bias", c.vocab_size);
  return b;
}

// ---- the model ---------------------------------------------------------------

template <class T>
struct LanguageModel {
  ModelConfig config;
  Tensor<T> token_embedding;     // [V x d]
  Tensor<T> position_embedding;  // [L_max x d]
  std::vector<GrassmannBlockParams<T>> grassmann_blocks;
  std::vector<AttentionBlockParams<T>> attention_blocks;
  Tensor<T> lm_head_weight;  // [V x d]; undefined when tied
  Tensor<T> lm_head_bias;    // [V]

  const Tensor<T>& head_weight() const { return config.tie_lm_head ? token_embedding : lm_head_weight; }

  /// Every learned array in canonical order.
  template <class Fn>
  void for_each_parameter(Fn&& fn) {
    fn("token_embedding", token_embedding);
    fn("position_embedding", position_embedding);
    for (std::size_t i = 0; i < grassmann_blocks.size(); ++i)
      grassmann::for_each_parameter(grassmann_blocks[i], "blocks." + std::to_string(i) + ".", fn);
    for (std::size_t i = 0; i < attention_blocks.size(); ++i)
      grassmann::for_each_parameter(attention_blocks[i], "blocks." + std::to_string(i) + ".", fn);
    if (!config.tie_lm_head) fn("lm_head.weight", lm_head_weight);
    fn("lm_head.bias", lm_head_bias);
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for_each_parameter([&](const std::string& name, Tensor<T>& t) { out.emplace_back(name, t); });
    return out;
  }

  std::size_t parameter_elements() {
    std::size_t total = 0;
    for_each_parameter([&](const std::string&, Tensor<T>& t) { total += t.numel(); });
    return total;
  }

  void zero_grad() {
    for_each_parameter([](const std::string&, Tensor<T>& t) { t.zero_grad(); });
  }
};

/// Weights ~ N(0, init_std), biases 0, norm gains 1. Deterministic in `seed`.
template <class T>
LanguageModel<T> init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  LanguageModel<T> m;
  m.config = config;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, config.init_std);
  auto weight = [&](std::size_t rows, std::size_t cols) {
    std::vector<T> v(rows * cols);
    for (auto& x : v) x = T(normal(rng));
    return Tensor<T>::from({rows, cols}, std::move(v), true);
  };
  auto zeros = [](std::size_t n) { return Tensor<T>::zeros({n}, true); };
  auto ones = [](std::size_t n) { return Tensor<T>::full({n}, T(1), true); };
  auto lin = [&](std::size_t out, std::size_t in) { return LinearParams<T>{weight(out, in), zeros(out)}; };
  auto norm = [&](std::size_t n) { return NormParams<T>{ones(n), zeros(n)}; };
  const std::size_t d = config.model_dim, f = config.ffn_dim;

  m.token_embedding = weight(config.vocab_size, d);
  m.position_embedding = weight(config.max_len, d);
  for (std::size_t l = 0; l < config.layers; ++l) {
    if (config.block_kind == BlockKind::Grassmann) {
      GrassmannBlockParams<T> b;
      b.reduction = lin(config.reduced_dim, d);
      b.plucker_proj = lin(d, geometry::plucker_dim(config.reduced_dim));
      b.gate = lin(d, 2 * d);
      b.ffn = {lin(f, d), lin(d, f)};
      b.norm1 = norm(d);
      b.norm2 = norm(d);
      b.dropout = config.dropout;
      m.grassmann_blocks.push_back(std::move(b));
    } else {
      AttentionBlockParams<T> b;
      b.query = lin(d, d);
      b.key = lin(d, d);
      b.value = lin(d, d);
      b.output = lin(d, d);
      b.ffn = {lin(f, d), lin(d, f)};
      b.norm1 = norm(d);
      b.norm2 = norm(d);
      b.heads = config.heads;
      b.dropout = config.dropout;
      m.attention_blocks.push_back(std::move(b));
    }
  }
  if (!config.tie_lm_head) m.lm_head_weight = weight(config.vocab_size, d);
  m.lm_head_bias = zeros(config.vocab_size);
  return m;
}

/// Converts a model between precisions (values only).
template <class To, class From>
LanguageModel<To> cast_model(LanguageModel<From>& src) {
  auto dst = init_params<To>(src.config, 0);
  auto src_params = src.named_parameters();
  std::size_t i = 0;
  dst.for_each_parameter([&](const std::string&, Tensor<To>& t) {
    auto from = src_params[i++].second.values();
    auto to = t.mutable_values();
    for (std::size_t k = 0; k < to.size(); ++k) to[k] = To(from[k]);
  });
  return dst;
}

/// Gathers token rows of E and adds positional rows 0..L-1 for each of the
/// `tokens.size() / seq_len` sequences.
template <class T>
Tensor<T> embed_tokens(std::span<const std::int32_t> tokens, std::size_t seq_len, const Tensor<T>& table,
                       const Tensor<T>& positions) {
  if (seq_len == 0 || tokens.empty() || tokens.size() % seq_len != 0)
    throw ShapeError("embed_tokens: token count is not a multiple of the sequence length");
  if (seq_len > positions.dim(0))
    throw std::out_of_range("embed_tokens: length " + std::to_string(seq_len) + " exceeds max_len " +
                            std::to_string(positions.dim(0)));
  std::vector<std::int32_t> pos(tokens.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = std::int32_t(i % seq_len);
  return add(embedding(table, tokens), embedding(positions, std::span<const std::int32_t>(pos)));
}

template <class T>
Tensor<T> embed_tokens(std::span<const std::int32_t> tokens, const Tensor<T>& table, const Tensor<T>& positions) {
  return embed_tokens(tokens, tokens.size(), table, positions);
}

/// Logits [n x V] for `tokens.size() / seq_len` sequences of length seq_len.
/// Block i draws its dropout mask from seed + i.
template <class T>
Tensor<T> lm_forward(const LanguageModel<T>& m, std::span<const std::int32_t> tokens, std::size_t seq_len,
                     bool training = false, std::uint64_t dropout_seed = 0) {
  for (auto id : tokens)
    if (id < 0 || std::size_t(id) >= m.config.vocab_size)
      throw std::out_of_range("lm_forward: token " + std::to_string(id) + " outside vocabulary");
  auto h = embed_tokens(tokens, seq_len, m.token_embedding, m.position_embedding);
  for (std::size_t l = 0; l < m.config.layers; ++l) {
    ForwardOptions opt{training, dropout_seed + 0x9e3779b97f4a7c15ULL * (l + 1), m.config.pairing};
    if (m.config.block_kind == BlockKind::Grassmann)
      h = grassmann_block_forward(h, m.grassmann_blocks[l], m.config.window_schedule.per_layer[l], seq_len, opt);
    else
      h = attention_block_forward(h, m.attention_blocks[l], seq_len, true, opt);
  }
  return linear(h, m.head_weight(), m.lm_head_bias);
}

template <class T>
Tensor<T> lm_forward(const LanguageModel<T>& m, std::span<const std::int32_t> tokens, bool training = false,
                     std::uint64_t dropout_seed = 0) {
  return lm_forward(m, tokens, tokens.size(), training, dropout_seed);
}

/// Autoregressive sampling. temperature == 0 selects the argmax. The context is
/// truncated to the last max_len tokens.
template <class T>
std::vector<std::int32_t> generate(const LanguageModel<T>& m, std::vector<std::int32_t> prompt,
                                   std::size_t max_new, double temperature, std::uint64_t seed) {
  if (prompt.empty()) throw std::invalid_argument("generate: prompt must not be empty");
  if (temperature < 0) throw std::invalid_argument("generate: temperature must be >= 0");
  NoGradGuard no_grad;
  std::mt19937_64 rng(seed);
  const std::size_t vocab = m.config.vocab_size;
  for (std::size_t step = 0; step < max_new; ++step) {
    const std::size_t ctx = std::min(prompt.size(), m.config.max_len);
    std::span<const std::int32_t> window(prompt.data() + prompt.size() - ctx, ctx);
    auto logits = lm_forward(m, window);
    auto last = logits.values().subspan((ctx - 1) * vocab, vocab);
    std::int32_t next = 0;
    if (temperature == 0) {
      next = std::int32_t(std::max_element(last.begin(), last.end()) - last.begin());
    } else {
      std::vector<double> w(vocab);
      const double mx = *std::max_element(last.begin(), last.end());
      for (std::size_t i = 0; i < vocab; ++i) w[i] = std::exp((double(last[i]) - mx) / temperature);
      std::discrete_distribution<std::int32_t> pick(w.begin(), w.end());
      next = pick(rng);
    }
    prompt.push_back(next);
  }
  return prompt;
}

}  // namespace grassmann
