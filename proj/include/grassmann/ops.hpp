// Differentiable tensor operations. Every op validates shapes, computes its
// forward value eagerly, and registers a local gradient rule with make_op.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "grassmann/tensor.hpp"

namespace grassmann {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;
template <class T>
using VectorMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <class T>
using ConstVectorMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

namespace detail {

template <class T>
ConstMatrixMap<T> as_matrix(const std::vector<T>& v, std::size_t rows, std::size_t cols) {
  return ConstMatrixMap<T>(v.data(), Eigen::Index(rows), Eigen::Index(cols));
}

template <class T>
MatrixMap<T> as_matrix(std::vector<T>& v, std::size_t rows, std::size_t cols) {
  return MatrixMap<T>(v.data(), Eigen::Index(rows), Eigen::Index(cols));
}

template <class T>
bool wants_grad(const Node<T>& parent) {
  return parent.requires_grad;
}

enum class Broadcast { Same, Row, Scalar };

template <class T>
Broadcast broadcast_kind(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::Same;
  if (b.numel() == 1) return Broadcast::Scalar;
  if (b.rank() == 1 && b.numel() == a.cols()) return Broadcast::Row;
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " onto " +
                   shape_str(a.shape()));
}

// Reduces a full-shape gradient onto the broadcast operand.
template <class T>
void accumulate_broadcast(Broadcast kind, std::span<const T> g, std::size_t cols,
                          std::vector<T>& target, T sign_or_scale = T(1)) {
  switch (kind) {
    case Broadcast::Same:
      for (std::size_t i = 0; i < g.size(); ++i) target[i] += sign_or_scale * g[i];
      break;
    case Broadcast::Row:
      for (std::size_t i = 0; i < g.size(); ++i) target[i % cols] += sign_or_scale * g[i];
      break;
    case Broadcast::Scalar: {
      T total = 0;
      for (T v : g) total += v;
      target[0] += sign_or_scale * total;
      break;
    }
  }
}

template <class T>
T b_at(Broadcast kind, const std::vector<T>& b, std::size_t i, std::size_t cols) {
  switch (kind) {
    case Broadcast::Same:
      return b[i];
    case Broadcast::Row:
      return b[i % cols];
    default:
      return b[0];
  }
}

template <class T>
T gelu_value(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
}

template <class T>
T gelu_derivative(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
  return cdf + x * pdf;
}

template <class T>
T sigmoid_value(T x) {
  // Split on sign so exp never overflows.
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const auto kind = detail::broadcast_kind(a, b, "add");
  const std::size_t cols = a.cols();
  std::vector<T> out(a.numel());
  const auto& av = a.node().value;
  const auto& bv = b.node().value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + detail::b_at(kind, bv, i, cols);
  return make_op<T>("add", a.shape(), std::move(out), {a, b}, [kind, cols](Node<T>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad) detail::accumulate_broadcast<T>(detail::Broadcast::Same, n.grad, cols, pa.ensure_grad());
    if (pb.requires_grad) detail::accumulate_broadcast<T>(kind, n.grad, cols, pb.ensure_grad());
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  const auto kind = detail::broadcast_kind(a, b, "sub");
  const std::size_t cols = a.cols();
  std::vector<T> out(a.numel());
  const auto& av = a.node().value;
  const auto& bv = b.node().value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - detail::b_at(kind, bv, i, cols);
  return make_op<T>("sub", a.shape(), std::move(out), {a, b}, [kind, cols](Node<T>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad) detail::accumulate_broadcast<T>(detail::Broadcast::Same, n.grad, cols, pa.ensure_grad());
    if (pb.requires_grad) detail::accumulate_broadcast<T>(kind, n.grad, cols, pb.ensure_grad(), T(-1));
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto kind = detail::broadcast_kind(a, b, "mul");
  const std::size_t cols = a.cols();
  std::vector<T> out(a.numel());
  const auto& av = a.node().value;
  const auto& bv = b.node().value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * detail::b_at(kind, bv, i, cols);
  return make_op<T>("mul", a.shape(), std::move(out), {a, b}, [kind, cols](Node<T>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    const auto& g = n.grad;
    if (pa.requires_grad) {
      auto& ga = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * detail::b_at(kind, pb.value, i, cols);
    }
    if (pb.requires_grad) {
      std::vector<T> prod(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) prod[i] = g[i] * pa.value[i];
      detail::accumulate_broadcast<T>(kind, prod, cols, pb.ensure_grad());
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.values().begin(), x.values().end());
  for (auto& v : out) v *= factor;
  return make_op<T>("scale", x.shape(), std::move(out), {x}, [factor](Node<T>& n) {
    auto& g = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * n.grad[i];
  });
}

/// Multiplies row i of x by the constant factors[i]; no gradient flows to the factors.
template <class T>
Tensor<T> scale_rows(const Tensor<T>& x, std::vector<T> factors) {
  const std::size_t rows = x.rows();
  const std::size_t cols = x.cols();
  if (factors.size() != rows)
    throw ShapeError("scale_rows: " + std::to_string(factors.size()) + " factors for " +
                     std::to_string(rows) + " rows");
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = x.node().value[i * cols + j] * factors[i];
  return make_op<T>("scale_rows", x.shape(), std::move(out), {x},
                    [factors = std::move(factors), rows, cols](Node<T>& n) {
                      auto& g = n.parents[0]->ensure_grad();
                      for (std::size_t i = 0; i < rows; ++i)
                        for (std::size_t j = 0; j < cols; ++j)
                          g[i * cols + j] += factors[i] * n.grad[i * cols + j];
                    });
}

/// Concatenation along the last axis; leading extents must agree.
template <class T>
Tensor<T> concat_last(const Tensor<T>& a, const Tensor<T>& b) {
  Shape lead_a(a.shape().begin(), a.shape().end() - 1);
  Shape lead_b(b.shape().begin(), b.shape().end() - 1);
  if (lead_a != lead_b)
    throw ShapeError("concat_last: leading extents differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const std::size_t rows = a.rows(), ca = a.cols(), cb = b.cols();
  std::vector<T> out(rows * (ca + cb));
  for (std::size_t i = 0; i < rows; ++i) {
    std::copy_n(a.node().value.begin() + i * ca, ca, out.begin() + i * (ca + cb));
    std::copy_n(b.node().value.begin() + i * cb, cb, out.begin() + i * (ca + cb) + ca);
  }
  Shape shape = lead_a;
  shape.push_back(ca + cb);
  return make_op<T>("concat_last", shape, std::move(out), {a, b}, [rows, ca, cb](Node<T>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    const std::size_t w = ca + cb;
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < ca; ++j) g[i * ca + j] += n.grad[i * w + j];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cb; ++j) g[i * cb + j] += n.grad[i * w + ca + j];
    }
  });
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul expects rank-2 operands, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  std::vector<T> out(m * n);
  detail::as_matrix(out, m, n).noalias() =
      detail::as_matrix(a.node().value, m, k) * detail::as_matrix(b.node().value, k, n);
  return make_op<T>("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& node) {
    auto& pa = *node.parents[0];
    auto& pb = *node.parents[1];
    auto g = detail::as_matrix(std::as_const(node.grad), m, n);
    if (pa.requires_grad)
      detail::as_matrix(pa.ensure_grad(), m, k).noalias() +=
          g * detail::as_matrix(std::as_const(pb.value), k, n).transpose();
    if (pb.requires_grad)
      detail::as_matrix(pb.ensure_grad(), k, n).noalias() +=
          detail::as_matrix(std::as_const(pa.value), m, k).transpose() * g;
  });
}

/// Affine map over the last axis: y = x Wᵀ + b with W stored [out × in].
/// Pass an undefined bias to omit it.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (weight.rank() != 2 || weight.dim(1) != x.cols())
    throw ShapeError("linear: weight " + shape_str(weight.shape()) + " does not accept input " +
                     shape_str(x.shape()));
  const std::size_t rows = x.rows(), in = x.cols(), out_dim = weight.dim(0);
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != out_dim))
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " for output width " +
                     std::to_string(out_dim));
  std::vector<T> out(rows * out_dim);
  auto y = detail::as_matrix(out, rows, out_dim);
  y.noalias() = detail::as_matrix(x.node().value, rows, in) *
                detail::as_matrix(weight.node().value, out_dim, in).transpose();
  if (has_bias) y.rowwise() += ConstVectorMap<T>(bias.node().value.data(), Eigen::Index(out_dim)).transpose();
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  shape.push_back(out_dim);
  std::vector<Tensor<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_op<T>("linear", shape, std::move(out), std::move(inputs),
                    [rows, in, out_dim, has_bias](Node<T>& n) {
                      auto& px = *n.parents[0];
                      auto& pw = *n.parents[1];
                      auto g = detail::as_matrix(std::as_const(n.grad), rows, out_dim);
                      if (px.requires_grad)
                        detail::as_matrix(px.ensure_grad(), rows, in).noalias() +=
                            g * detail::as_matrix(std::as_const(pw.value), out_dim, in);
                      if (pw.requires_grad)
                        detail::as_matrix(pw.ensure_grad(), out_dim, in).noalias() +=
                            g.transpose() * detail::as_matrix(std::as_const(px.value), rows, in);
                      // Explicit row order: Eigen's vectorised reductions over a Map peel
                      // to the first aligned address, so their rounding depends on the heap.
                      if (has_bias && n.parents[2]->requires_grad) {
                        auto& gb = n.parents[2]->ensure_grad();
                        for (std::size_t r = 0; r < rows; ++r)
                          for (std::size_t o = 0; o < out_dim; ++o) gb[o] += n.grad[r * out_dim + o];
                      }
                    });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::sigmoid_value(x.node().value[i]);
  return make_op<T>("sigmoid", x.shape(), std::move(out), {x}, [](Node<T>& n) {
    auto& g = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * n.value[i] * (T(1) - n.value[i]);
  });
}

/// GELU in the exact erf form.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::gelu_value(x.node().value[i]);
  return make_op<T>("gelu", x.shape(), std::move(out), {x}, [](Node<T>& n) {
    auto& p = *n.parents[0];
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * detail::gelu_derivative(p.value[i]);
  });
}

/// Row-wise softmax over the last axis, stabilised by subtracting the row max.
template <class T>
Tensor<T> softmax_last(const Tensor<T>& x) {
  const std::size_t rows = x.rows(), cols = x.cols();
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < rows; ++i) {
    const T* in = x.node().value.data() + i * cols;
    T* o = out.data() + i * cols;
    const T mx = *std::max_element(in, in + cols);
    T total = 0;
    for (std::size_t j = 0; j < cols; ++j) total += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < cols; ++j) o[j] /= total;
  }
  return make_op<T>("softmax_last", x.shape(), std::move(out), {x}, [rows, cols](Node<T>& n) {
    auto& g = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < rows; ++i) {
      const T* y = n.value.data() + i * cols;
      const T* gy = n.grad.data() + i * cols;
      T dot = 0;
      for (std::size_t j = 0; j < cols; ++j) dot += y[j] * gy[j];
      for (std::size_t j = 0; j < cols; ++j) g[i * cols + j] += y[j] * (gy[j] - dot);
    }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalises every row of the last axis to zero mean and unit (biased)
/// variance, then applies gain and bias.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(kLayerNormEps)) {
  const std::size_t rows = x.rows(), d = x.cols();
  if (gain.numel() != d || bias.numel() != d)
    throw ShapeError("layer_norm: gain/bias must have " + std::to_string(d) + " elements");
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(rows);
  const auto& xv = x.node().value;
  const auto& gv = gain.node().value;
  const auto& bv = bias.node().value;
  for (std::size_t i = 0; i < rows; ++i) {
    const T* row = xv.data() + i * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= T(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mean) * is;
      xhat[i * d + j] = h;
      out[i * d + j] = h * gv[j] + bv[j];
    }
  }
  return make_op<T>(
      "layer_norm", x.shape(), std::move(out), {x, gain, bias},
      [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& n) {
        auto& px = *n.parents[0];
        auto& pg = *n.parents[1];
        auto& pb = *n.parents[2];
        const auto& gy = n.grad;
        if (pg.requires_grad) {
          auto& gg = pg.ensure_grad();
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < d; ++j) gg[j] += gy[i * d + j] * xhat[i * d + j];
        }
        if (pb.requires_grad) {
          auto& gb = pb.ensure_grad();
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < d; ++j) gb[j] += gy[i * d + j];
        }
        if (px.requires_grad) {
          auto& gx = px.ensure_grad();
          const auto& gain_v = pg.value;
          for (std::size_t i = 0; i < rows; ++i) {
            T mean_g = 0, mean_gh = 0;
            for (std::size_t j = 0; j < d; ++j) {
              const T gh = gy[i * d + j] * gain_v[j];
              mean_g += gh;
              mean_gh += gh * xhat[i * d + j];
            }
            mean_g /= T(d);
            mean_gh /= T(d);
            for (std::size_t j = 0; j < d; ++j) {
              const T gh = gy[i * d + j] * gain_v[j];
              gx[i * d + j] += inv_std[i] * (gh - mean_g - xhat[i * d + j] * mean_gh);
            }
          }
        }
      });
}

/// Inverted dropout: survivors are scaled by 1/(1-p). Identity when not training.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, std::uint64_t seed) {
  if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("dropout: p must lie in [0, 1)");
  if (!training || p == 0.0) return x;
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution keep(1.0 - p);
  const T factor = T(1.0 / (1.0 - p));
  std::vector<T> mask(x.numel());
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = keep(rng) ? factor : T(0);
    out[i] = x.node().value[i] * mask[i];
  }
  return make_op<T>("dropout", x.shape(), std::move(out), {x}, [mask = std::move(mask)](Node<T>& n) {
    auto& g = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * mask[i];
  });
}

/// Mean over rows of -log softmax(logits)[target].
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets) {
  const std::size_t rows = logits.rows(), vocab = logits.cols();
  if (targets.size() != rows)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(rows) + " rows");
  std::vector<T> probs(logits.numel());
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  double total = 0;
  for (std::size_t i = 0; i < rows; ++i) {
    if (tgt[i] < 0 || std::size_t(tgt[i]) >= vocab)
      throw std::out_of_range("cross_entropy: target " + std::to_string(tgt[i]) +
                              " outside [0, " + std::to_string(vocab) + ")");
    const T* row = logits.node().value.data() + i * vocab;
    T* pr = probs.data() + i * vocab;
    const T mx = *std::max_element(row, row + vocab);
    T sum = 0;
    for (std::size_t j = 0; j < vocab; ++j) sum += (pr[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < vocab; ++j) pr[j] /= sum;
    total += double(std::log(sum) + mx - row[tgt[i]]);
  }
  std::vector<T> out{T(total / double(rows))};
  return make_op<T>("cross_entropy", {1}, std::move(out), {logits},
                    [rows, vocab, probs = std::move(probs), tgt = std::move(tgt)](Node<T>& n) {
                      auto& g = n.parents[0]->ensure_grad();
                      const T s = n.grad[0] / T(rows);
                      for (std::size_t i = 0; i < rows; ++i) {
                        for (std::size_t j = 0; j < vocab; ++j) g[i * vocab + j] += s * probs[i * vocab + j];
                        g[i * vocab + std::size_t(tgt[i])] -= s;
                      }
                    });
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.values()) total += v;
  return make_op<T>("sum", {1}, {total}, {x}, [](Node<T>& n) {
    auto& g = n.parents[0]->ensure_grad();
    for (auto& v : g) v += n.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / T(x.numel()));
}

/// Row gather: out[i] = table[ids[i]].
template <class T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be rank 2");
  const std::size_t rows = table.dim(0), d = table.dim(1);
  std::vector<std::int32_t> idx(ids.begin(), ids.end());
  std::vector<T> out(idx.size() * d);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || std::size_t(idx[i]) >= rows)
      throw std::out_of_range("embedding: index " + std::to_string(idx[i]) + " outside [0, " +
                              std::to_string(rows) + ")");
    std::copy_n(table.node().value.begin() + std::size_t(idx[i]) * d, d, out.begin() + i * d);
  }
  if (idx.empty()) throw ShapeError("embedding: no indices");
  const Shape shape{idx.size(), d};
  return make_op<T>("embedding", shape, std::move(out), {table},
                    [d, idx = std::move(idx)](Node<T>& n) {
                      auto& g = n.parents[0]->ensure_grad();
                      for (std::size_t i = 0; i < idx.size(); ++i)
                        for (std::size_t j = 0; j < d; ++j) g[std::size_t(idx[i]) * d + j] += n.grad[i * d + j];
                    });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  return make_op<T>("reshape", std::move(shape), x.node().value, {x}, [](Node<T>& n) {
    auto& g = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

}  // namespace grassmann
