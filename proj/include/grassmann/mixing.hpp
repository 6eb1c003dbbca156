// Sequence-mixing blocks: the causal Grassmann layer and the multi-head
// self-attention baseline it is compared against.
//
// All block functions take hidden states as a [n x d] tensor holding n / L
// independent sequences of length L stacked row-wise. Mixing never crosses a
// sequence boundary.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "grassmann/geometry.hpp"
#include "grassmann/ops.hpp"

namespace grassmann {

/// Which neighbour a position is paired with.
/// Backward pairs t with t - delta, so position t only sees tokens <= t.
/// Forward pairs t with t + delta; it leaks future tokens and is only
/// meaningful for non-autoregressive use.
enum class Pairing { Backward, Forward };

inline const char* to_string(Pairing p) { return p == Pairing::Backward ? "backward" : "forward"; }

inline Pairing parse_pairing(const std::string& s) {
  if (s == "backward") return Pairing::Backward;
  if (s == "forward") return Pairing::Forward;
  throw std::invalid_argument("unknown pairing '" + s + "'");
}

using OffsetSet = std::vector<std::size_t>;

/// Sorts and deduplicates; rejects empty sets and zero offsets.
inline OffsetSet normalize_offsets(OffsetSet offsets) {
  if (offsets.empty()) throw std::invalid_argument("offset set must not be empty");
  std::sort(offsets.begin(), offsets.end());
  offsets.erase(std::unique(offsets.begin(), offsets.end()), offsets.end());
  if (offsets.front() == 0) throw std::invalid_argument("offsets must be >= 1");
  return offsets;
}

/// Per-layer offset sets.
struct WindowSchedule {
  std::vector<OffsetSet> per_layer;

  static WindowSchedule repeated(const OffsetSet& offsets, std::size_t layers) {
    return WindowSchedule{std::vector<OffsetSet>(layers, normalize_offsets(offsets))};
  }

  /// One single-offset set per layer, e.g. (1,1,2,2,...) for deeper models.
  static WindowSchedule per_layer_single(const std::vector<std::size_t>& offsets) {
    WindowSchedule s;
    for (auto o : offsets) s.per_layer.push_back(normalize_offsets({o}));
    return s;
  }

  void validate(std::size_t layers, std::size_t max_len) const {
    if (per_layer.size() != layers)
      throw std::invalid_argument("window schedule has " + std::to_string(per_layer.size()) +
                                  " layers, model has " + std::to_string(layers));
    for (const auto& set : per_layer) {
      if (set.empty()) throw std::invalid_argument("window schedule contains an empty layer");
      for (auto o : set)
        if (o < 1 || o >= max_len)
          throw std::invalid_argument("offset " + std::to_string(o) + " outside [1, max_len)");
    }
  }

  bool operator==(const WindowSchedule&) const = default;
};

/// Offsets usable at 1-based position t of a length-L sequence.
inline OffsetSet valid_offsets(std::size_t t, const OffsetSet& offsets, std::size_t length,
                               Pairing pairing = Pairing::Backward) {
  OffsetSet out;
  for (auto delta : offsets) {
    const bool ok = pairing == Pairing::Backward ? t > delta : t + delta <= length;
    if (ok) out.push_back(delta);
  }
  return out;
}

template <class T>
struct PluckerFeatures {
  Tensor<T> mean;        // [n x C(r,2)], mean of normalised Plücker vectors over valid offsets
  std::vector<T> valid;  // 1 where the position has at least one valid offset, else 0
};

namespace detail {

// Row index of the partner paired with `row` (position t within its sequence),
// and whether the earlier token is the partner. Returns false when invalid.
inline bool partner_row(std::size_t row, std::size_t t, std::size_t delta, std::size_t length,
                        Pairing pairing, std::size_t& partner) {
  if (pairing == Pairing::Backward) {
    if (t < delta) return false;
    partner = row - delta;
  } else {
    if (t + delta >= length) return false;
    partner = row + delta;
  }
  return true;
}

}  // namespace detail

/// For each position, averages the normalised Plücker vectors of the planes
/// spanned with every valid partner. The earlier token of a pair is always the
/// first argument of the embedding.
template <class T>
PluckerFeatures<T> plucker_mean_features(const Tensor<T>& z, std::size_t seq_len,
                                         const OffsetSet& offsets, Pairing pairing,
                                         T eps = T(geometry::kDefaultEps)) {
  if (z.rank() != 2) throw ShapeError("plucker features: Z must be rank 2");
  const std::size_t n = z.dim(0), r = z.dim(1);
  if (r < 2) throw ShapeError("plucker features: reduced dimension must be >= 2");
  if (seq_len == 0 || n % seq_len != 0)
    throw ShapeError("plucker features: " + std::to_string(n) + " rows is not a whole number of length-" +
                     std::to_string(seq_len) + " sequences");
  const std::size_t c = geometry::plucker_dim(r);
  const auto& zv = z.node().value;
  std::vector<T> out(n * c, T(0));
  std::vector<T> valid(n, T(0));
  std::vector<T> p(c);
  for (std::size_t row = 0; row < n; ++row) {
    const std::size_t t = row % seq_len;
    std::size_t count = 0;
    T* acc = out.data() + row * c;
    for (auto delta : offsets) {
      std::size_t partner;
      if (!detail::partner_row(row, t, delta, seq_len, pairing, partner)) continue;
      const std::size_t first = std::min(row, partner), second = std::max(row, partner);
      geometry::plucker_minors<T>({zv.data() + first * r, r}, {zv.data() + second * r, r}, p);
      geometry::normalize_in_place<T>(p, eps);
      for (std::size_t k = 0; k < c; ++k) acc[k] += p[k];
      ++count;
    }
    if (count > 0) {
      const T inv = T(1) / T(count);
      for (std::size_t k = 0; k < c; ++k) acc[k] *= inv;
      valid[row] = T(1);
    }
  }
  auto mean = make_op<T>(
      "plucker_mean_features", {n, c}, std::move(out), {z},
      [n, r, c, seq_len, offsets, pairing, eps](Node<T>& node) {
        const auto& zval = node.parents[0]->value;
        auto& gz = node.parents[0]->ensure_grad();
        std::vector<T> p(c), gp(c), gpair(c);
        for (std::size_t row = 0; row < n; ++row) {
          const std::size_t t = row % seq_len;
          std::size_t count = 0;
          std::size_t partner;
          for (auto delta : offsets)
            if (detail::partner_row(row, t, delta, seq_len, pairing, partner)) ++count;
          if (count == 0) continue;
          const T inv = T(1) / T(count);
          for (std::size_t k = 0; k < c; ++k) gp[k] = node.grad[row * c + k] * inv;
          for (auto delta : offsets) {
            if (!detail::partner_row(row, t, delta, seq_len, pairing, partner)) continue;
            const std::size_t first = std::min(row, partner), second = std::max(row, partner);
            std::span<const T> u(zval.data() + first * r, r), v(zval.data() + second * r, r);
            geometry::plucker_minors<T>(u, v, p);
            const T norm = geometry::normalize_in_place<T>(p, eps);
            std::fill(gpair.begin(), gpair.end(), T(0));
            geometry::normalize_backward<T>(p, norm, eps, gp, gpair);
            geometry::plucker_minors_backward<T>(u, v, gpair, {gz.data() + first * r, r},
                                                 {gz.data() + second * r, r});
          }
        }
      });
  return {std::move(mean), std::move(valid)};
}

template <class T>
struct LinearParams {
  Tensor<T> weight;  // [out x in]
  Tensor<T> bias;    // [out]
};

template <class T>
struct NormParams {
  Tensor<T> gain;
  Tensor<T> bias;
};

template <class T>
struct FeedForwardParams {
  LinearParams<T> up;    // W1 [d_ff x d], b1 [d_ff]
  LinearParams<T> down;  // W2 [d x d_ff], b2 [d]
};

template <class T>
struct GrassmannBlockParams {
  LinearParams<T> reduction;     // [r x d]
  LinearParams<T> plucker_proj;  // [d x C(r,2)]
  LinearParams<T> gate;          // [d x 2d]
  FeedForwardParams<T> ffn;
  NormParams<T> norm1;
  NormParams<T> norm2;
  double dropout = 0.1;
};

template <class T>
struct AttentionBlockParams {
  // Per-head projections are stored concatenated: head h owns rows
  // [h*d_h, (h+1)*d_h) of each [d x d] weight.
  LinearParams<T> query;
  LinearParams<T> key;
  LinearParams<T> value;
  LinearParams<T> output;
  FeedForwardParams<T> ffn;
  NormParams<T> norm1;
  NormParams<T> norm2;
  std::size_t heads = 4;
  double dropout = 0.1;
};

/// Calls fn(name, tensor) for every learned array in canonical order.
template <class T, class Fn>
void for_each_parameter(GrassmannBlockParams<T>& p, const std::string& prefix, Fn&& fn) {
  fn(prefix + "reduction.weight", p.reduction.weight);
  fn(prefix + "reduction.bias", p.reduction.bias);
  fn(prefix + "plucker_proj.weight", p.plucker_proj.weight);
  fn(prefix + "plucker_proj.bias", p.plucker_proj.bias);
  fn(prefix + "gate.weight", p.gate.weight);
  fn(prefix + "gate.bias", p.gate.bias);
  fn(prefix + "ffn.up.weight", p.ffn.up.weight);
  fn(prefix + "ffn.up.bias", p.ffn.up.bias);
  fn(prefix + "ffn.down.weight", p.ffn.down.weight);
  fn(prefix + "ffn.down.bias", p.ffn.down.bias);
  fn(prefix + "norm1.gain", p.norm1.gain);
  fn(prefix + "norm1.bias", p.norm1.bias);
  fn(prefix + "norm2.gain", p.norm2.gain);
  fn(prefix + "norm2.bias", p.norm2.bias);
}

template <class T, class Fn>
void for_each_parameter(AttentionBlockParams<T>& p, const std::string& prefix, Fn&& fn) {
  fn(prefix + "query.weight", p.query.weight);
  fn(prefix + "query.bias", p.query.bias);
  fn(prefix + "key.weight", p.key.weight);
  fn(prefix + "key.bias", p.key.bias);
  fn(prefix + "value.weight", p.value.weight);
  fn(prefix + "value.bias", p.value.bias);
  fn(prefix + "output.weight", p.output.weight);
  fn(prefix + "output.bias", p.output.bias);
  fn(prefix + "ffn.up.weight", p.ffn.up.weight);
  fn(prefix + "ffn.up.bias", p.ffn.up.bias);
  fn(prefix + "ffn.down.weight", p.ffn.down.weight);
  fn(prefix + "ffn.down.bias", p.ffn.down.bias);
  fn(prefix + "norm1.gain", p.norm1.gain);
  fn(prefix + "norm1.bias", p.norm1.bias);
  fn(prefix + "norm2.gain", p.norm2.gain);
  fn(prefix + "norm2.bias", p.norm2.bias);
}

template <class T>
Tensor<T> apply(const LinearParams<T>& p, const Tensor<T>& x) {
  return linear(x, p.weight, p.bias);
}

// ---- Grassmann layer ------------------------------------------------------

template <class T>
Tensor<T> reduce_states(const Tensor<T>& h, const LinearParams<T>& reduction) {
  return apply(reduction, h);
}

/// Projects the averaged Plücker features into model space. Positions without
/// a valid offset get an exact zero vector (the projection bias is not added).
///
/// Averaging before projecting equals projecting each offset and averaging,
/// since the projection is affine and the mean weights sum to one.
template <class T>
Tensor<T> grassmann_features(const Tensor<T>& z, std::size_t seq_len, const OffsetSet& offsets,
                             const LinearParams<T>& plucker_proj,
                             Pairing pairing = Pairing::Backward, T eps = T(geometry::kDefaultEps)) {
  auto feats = plucker_mean_features(z, seq_len, offsets, pairing, eps);
  if (plucker_proj.weight.dim(1) != feats.mean.cols())
    throw ShapeError("grassmann_features: projection expects " +
                     std::to_string(plucker_proj.weight.dim(1)) + " Plücker coordinates, got " +
                     std::to_string(feats.mean.cols()));
  return scale_rows(apply(plucker_proj, feats.mean), std::move(feats.valid));
}

/// alpha = sigmoid(W_gate [h; g] + b_gate); returns alpha*h + (1-alpha)*g.
template <class T>
Tensor<T> gated_fusion(const Tensor<T>& h, const Tensor<T>& g, const LinearParams<T>& gate) {
  if (h.shape() != g.shape())
    throw ShapeError("gated_fusion: " + shape_str(h.shape()) + " vs " + shape_str(g.shape()));
  auto alpha = sigmoid(apply(gate, concat_last(h, g)));
  return add(g, mul(alpha, sub(h, g)));
}

template <class T>
Tensor<T> gate_values(const Tensor<T>& h, const Tensor<T>& g, const LinearParams<T>& gate) {
  return sigmoid(apply(gate, concat_last(h, g)));
}

template <class T>
Tensor<T> feed_forward(const Tensor<T>& x, const FeedForwardParams<T>& ffn) {
  return apply(ffn.down, gelu(apply(ffn.up, x)));
}

struct ForwardOptions {
  bool training = false;
  std::uint64_t dropout_seed = 0;
  Pairing pairing = Pairing::Backward;
};

/// Post-norm scaffold shared by both block kinds:
/// hhat = Dropout(LayerNorm(mixed)); out = LayerNorm(hhat + FFN(hhat)).
template <class T>
Tensor<T> norm_ffn_scaffold(const Tensor<T>& mixed, const FeedForwardParams<T>& ffn,
                            const NormParams<T>& norm1, const NormParams<T>& norm2, double rate,
                            const ForwardOptions& opt) {
  auto hhat = dropout(layer_norm(mixed, norm1.gain, norm1.bias), rate, opt.training, opt.dropout_seed);
  return layer_norm(add(hhat, feed_forward(hhat, ffn)), norm2.gain, norm2.bias);
}

template <class T>
Tensor<T> grassmann_block_forward(const Tensor<T>& h, const GrassmannBlockParams<T>& p,
                                  const OffsetSet& offsets, std::size_t seq_len,
                                  const ForwardOptions& opt = {}) {
  auto z = reduce_states(h, p.reduction);
  auto g = grassmann_features(z, seq_len, offsets, p.plucker_proj, opt.pairing);
  auto mixed = gated_fusion(h, g, p.gate);
  return norm_ffn_scaffold(mixed, p.ffn, p.norm1, p.norm2, p.dropout, opt);
}

// ---- Self-attention baseline ----------------------------------------------

namespace detail {

// Scaled dot-product attention for one (sequence, head) slice. Writes the
// attention matrix into `attn` ([L x L], row-major) and the head output into
// `out`. Masked entries are exactly zero.
template <class T, class QB, class KB, class VB, class OB>
void attention_head(const QB& q, const KB& k, const VB& v, OB out, RowMatrix<T>& attn, bool causal) {
  const Eigen::Index len = q.rows();
  const T scale = T(1) / std::sqrt(T(q.cols()));
  attn.resize(len, len);
  if (causal) {
    for (Eigen::Index i = 0; i < len; ++i) {
      auto row = attn.row(i);
      row.head(i + 1).noalias() = (k.topRows(i + 1) * q.row(i).transpose()).transpose() * scale;
      const T mx = row.head(i + 1).maxCoeff();
      row.head(i + 1) = (row.head(i + 1).array() - mx).exp().matrix();
      row.head(i + 1) /= row.head(i + 1).sum();
      row.tail(len - i - 1).setZero();
    }
    for (Eigen::Index i = 0; i < len; ++i)
      out.row(i).noalias() = attn.row(i).head(i + 1) * v.topRows(i + 1);
  } else {
    attn.noalias() = (q * k.transpose()) * scale;
    for (Eigen::Index i = 0; i < len; ++i) {
      auto row = attn.row(i);
      const T mx = row.maxCoeff();
      row = (row.array() - mx).exp().matrix();
      row /= row.sum();
    }
    out.noalias() = attn * v;
  }
}

}  // namespace detail

/// Attention matrices of every (sequence, head), for inspection. Index
/// [b * heads + h].
template <class T>
std::vector<RowMatrix<T>> attention_weights(const Tensor<T>& q, const Tensor<T>& k, std::size_t seq_len,
                                            std::size_t heads, bool causal) {
  const std::size_t n = q.rows(), d = q.cols(), dh = d / heads;
  std::vector<RowMatrix<T>> result;
  auto qm = detail::as_matrix(q.node().value, n, d);
  auto km = detail::as_matrix(k.node().value, n, d);
  RowMatrix<T> scratch(seq_len, dh);
  for (std::size_t b = 0; b < n / seq_len; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      RowMatrix<T> attn;
      auto qs = qm.block(b * seq_len, h * dh, seq_len, dh);
      auto ks = km.block(b * seq_len, h * dh, seq_len, dh);
      detail::attention_head<T>(qs, ks, ks, scratch.block(0, 0, seq_len, dh), attn, causal);
      result.push_back(std::move(attn));
    }
  return result;
}

/// Multi-head scaled dot-product attention over [n x d] query/key/value
/// tensors; heads occupy contiguous column blocks of width d / heads.
template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               std::size_t seq_len, std::size_t heads, bool causal) {
  if (q.shape() != k.shape() || q.shape() != v.shape() || q.rank() != 2)
    throw ShapeError("attention: q, k, v must share a rank-2 shape");
  const std::size_t n = q.dim(0), d = q.dim(1);
  if (heads == 0 || d % heads != 0)
    throw ShapeError("attention: width " + std::to_string(d) + " is not divisible by " +
                     std::to_string(heads) + " heads");
  if (seq_len == 0 || n % seq_len != 0) throw ShapeError("attention: rows not a multiple of seq_len");
  const std::size_t dh = d / heads, batches = n / seq_len;
  std::vector<T> out(n * d);
  auto qm = detail::as_matrix(q.node().value, n, d);
  auto km = detail::as_matrix(k.node().value, n, d);
  auto vm = detail::as_matrix(v.node().value, n, d);
  auto om = detail::as_matrix(out, n, d);
  const bool record = grad_enabled() && (q.requires_grad() || k.requires_grad() || v.requires_grad());
  std::vector<RowMatrix<T>> saved(record ? batches * heads : 0);
  RowMatrix<T> attn;
  for (std::size_t b = 0; b < batches; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      const auto r0 = Eigen::Index(b * seq_len), c0 = Eigen::Index(h * dh);
      const auto len = Eigen::Index(seq_len), w = Eigen::Index(dh);
      detail::attention_head<T>(qm.block(r0, c0, len, w), km.block(r0, c0, len, w),
                                vm.block(r0, c0, len, w), om.block(r0, c0, len, w), attn, causal);
      if (record) saved[b * heads + h] = attn;
    }
  return make_op<T>(
      "multi_head_attention", {n, d}, std::move(out), {q, k, v},
      [n, d, dh, heads, batches, seq_len, saved = std::move(saved)](Node<T>& node) {
        auto& pq = *node.parents[0];
        auto& pk = *node.parents[1];
        auto& pv = *node.parents[2];
        auto qm = detail::as_matrix(std::as_const(pq.value), n, d);
        auto km = detail::as_matrix(std::as_const(pk.value), n, d);
        auto vm = detail::as_matrix(std::as_const(pv.value), n, d);
        auto gm = detail::as_matrix(std::as_const(node.grad), n, d);
        std::vector<T> gq(n * d, T(0)), gk(n * d, T(0)), gv(n * d, T(0));
        auto gqm = detail::as_matrix(gq, n, d);
        auto gkm = detail::as_matrix(gk, n, d);
        auto gvm = detail::as_matrix(gv, n, d);
        const T scale = T(1) / std::sqrt(T(dh));
        RowMatrix<T> dattn, dscores;
        for (std::size_t b = 0; b < batches; ++b)
          for (std::size_t h = 0; h < heads; ++h) {
            const auto r0 = Eigen::Index(b * seq_len), c0 = Eigen::Index(h * dh);
            const auto len = Eigen::Index(seq_len), w = Eigen::Index(dh);
            const auto& a = saved[b * heads + h];
            auto go = gm.block(r0, c0, len, w);
            gvm.block(r0, c0, len, w).noalias() = a.transpose() * go;
            dattn.noalias() = go * vm.block(r0, c0, len, w).transpose();
            const auto rowdot = (dattn.array() * a.array()).rowwise().sum().eval();
            dscores = (a.array() * (dattn.array().colwise() - rowdot)).matrix() * scale;
            gqm.block(r0, c0, len, w).noalias() = dscores * km.block(r0, c0, len, w);
            gkm.block(r0, c0, len, w).noalias() = dscores.transpose() * qm.block(r0, c0, len, w);
          }
        auto accumulate = [](Node<T>& p, const std::vector<T>& g) {
          if (!p.requires_grad) return;
          auto& dst = p.ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
        };
        accumulate(pq, gq);
        accumulate(pk, gk);
        accumulate(pv, gv);
      });
}

template <class T>
Tensor<T> attention_block_forward(const Tensor<T>& h, const AttentionBlockParams<T>& p,
                                  std::size_t seq_len, bool causal = true,
                                  const ForwardOptions& opt = {}) {
  auto attended = multi_head_attention(apply(p.query, h), apply(p.key, h), apply(p.value, h),
                                       seq_len, p.heads, causal);
  auto mixed = add(h, apply(p.output, attended));
  return norm_ffn_scaffold(mixed, p.ffn, p.norm1, p.norm2, p.dropout, opt);
}

}  // namespace grassmann
