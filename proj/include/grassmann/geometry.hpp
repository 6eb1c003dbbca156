// Plücker coordinates of 2-planes in R^r.
//
// A pair (u, v) spanning a plane maps to the vector of all 2x2 minors
// p_ij = u_i v_j - u_j v_i for 1 <= i < j <= r, stored in lexicographic (i, j)
// order. The layout is part of the checkpoint format and must not change.
#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "grassmann/ops.hpp"

namespace grassmann::geometry {

inline constexpr double kDefaultEps = 1e-6;

/// Number of Plücker coordinates for planes in R^r.
constexpr std::size_t plucker_dim(std::size_t r) { return r * (r - 1) / 2; }

/// Flat position of the 1-based pair (i, j) in the lexicographic enumeration.
inline std::size_t pair_index(std::size_t i, std::size_t j, std::size_t r) {
  if (!(1 <= i && i < j && j <= r))
    throw std::out_of_range("pair_index: need 1 <= i < j <= r, got (" + std::to_string(i) + ", " +
                            std::to_string(j) + ") with r=" + std::to_string(r));
  // Rows before i contribute (r-1) + (r-2) + ... + (r-i+1) entries.
  const std::size_t before = (i - 1) * r - (i - 1) * i / 2;
  return before + (j - i - 1);
}

template <class T>
struct PluckerVector {
  std::size_t r = 0;
  std::vector<T> coords;

  PluckerVector() = default;
  PluckerVector(std::size_t dim, std::vector<T> c) : r(dim), coords(std::move(c)) {
    if (dim < 2 || coords.size() != plucker_dim(dim))
      throw std::invalid_argument("PluckerVector: " + std::to_string(coords.size()) +
                                  " coordinates do not describe planes in R^" + std::to_string(dim));
  }

  T norm() const {
    T s = 0;
    for (T c : coords) s += c * c;
    return std::sqrt(s);
  }
};

/// Writes every 2x2 minor of [u v] into out (length C(r,2)).
template <class T>
void plucker_minors(std::span<const T> u, std::span<const T> v, std::span<T> out) {
  const std::size_t r = u.size();
  std::size_t k = 0;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = i + 1; j < r; ++j) out[k++] = u[i] * v[j] - u[j] * v[i];
}

/// Adjoint of plucker_minors: given dL/dp, accumulates dL/du and dL/dv.
template <class T>
void plucker_minors_backward(std::span<const T> u, std::span<const T> v, std::span<const T> gp,
                             std::span<T> gu, std::span<T> gv) {
  const std::size_t r = u.size();
  std::size_t k = 0;
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = i + 1; j < r; ++j, ++k) {
      const T g = gp[k];
      gu[i] += g * v[j];
      gu[j] -= g * v[i];
      gv[j] += g * u[i];
      gv[i] -= g * u[j];
    }
  }
}

/// Scales p in place by 1 / max(||p||, eps); returns the norm ||p||.
template <class T>
T normalize_in_place(std::span<T> p, T eps) {
  T s = 0;
  for (T c : p) s += c * c;
  const T norm = std::sqrt(s);
  const T denom = norm >= eps ? norm : eps;
  for (auto& c : p) c /= denom;
  return norm;
}

/// Adjoint of normalize_in_place. `phat` is the normalised vector, `norm` the
/// pre-normalisation norm. At norm == eps the norm branch is used.
template <class T>
void normalize_backward(std::span<const T> phat, T norm, T eps, std::span<const T> g,
                        std::span<T> gp) {
  if (norm >= eps) {
    T dot = 0;
    for (std::size_t k = 0; k < g.size(); ++k) dot += phat[k] * g[k];
    for (std::size_t k = 0; k < g.size(); ++k) gp[k] += (g[k] - phat[k] * dot) / norm;
  } else {
    for (std::size_t k = 0; k < g.size(); ++k) gp[k] += g[k] / eps;
  }
}

template <class T>
PluckerVector<T> plucker_embed(std::span<const T> u, std::span<const T> v) {
  if (u.size() != v.size())
    throw std::invalid_argument("plucker_embed: vectors of length " + std::to_string(u.size()) +
                                " and " + std::to_string(v.size()));
  if (u.size() < 2) throw std::invalid_argument("plucker_embed: need r >= 2");
  std::vector<T> coords(plucker_dim(u.size()));
  plucker_minors<T>(u, v, coords);
  return PluckerVector<T>(u.size(), std::move(coords));
}

template <class T>
PluckerVector<T> plucker_normalize(PluckerVector<T> p, T eps = T(kDefaultEps)) {
  if (!(eps > T(0))) throw std::invalid_argument("plucker_normalize: eps must be positive");
  normalize_in_place<T>(p.coords, eps);
  return p;
}

/// The single quadratic Plücker relation of Gr(2,4): p12 p34 - p13 p24 + p14 p23.
template <class T>
T plucker_relation_residual(const PluckerVector<T>& p) {
  if (p.r != 4)
    throw std::invalid_argument("plucker_relation_residual: defined for r=4 only, got r=" +
                                std::to_string(p.r));
  const auto& c = p.coords;  // (12, 13, 14, 23, 24, 34)
  return c[0] * c[5] - c[1] * c[4] + c[2] * c[3];
}

// Differentiable forms, used where gradients must flow through the geometry.

template <class T>
Tensor<T> plucker_embed(const Tensor<T>& u, const Tensor<T>& v) {
  if (u.numel() != v.numel())
    throw ShapeError("plucker_embed: " + shape_str(u.shape()) + " vs " + shape_str(v.shape()));
  const std::size_t r = u.numel();
  if (r < 2) throw ShapeError("plucker_embed: need r >= 2");
  std::vector<T> out(plucker_dim(r));
  plucker_minors<T>(u.values(), v.values(), out);
  const Shape shape{out.size()};
  return make_op<T>("plucker_embed", shape, std::move(out), {u, v}, [r](Node<T>& n) {
    auto& pu = *n.parents[0];
    auto& pv = *n.parents[1];
    std::vector<T> gu(r, T(0)), gv(r, T(0));
    plucker_minors_backward<T>(pu.value, pv.value, n.grad, gu, gv);
    if (pu.requires_grad) {
      auto& g = pu.ensure_grad();
      for (std::size_t i = 0; i < r; ++i) g[i] += gu[i];
    }
    if (pv.requires_grad) {
      auto& g = pv.ensure_grad();
      for (std::size_t i = 0; i < r; ++i) g[i] += gv[i];
    }
  });
}

template <class T>
Tensor<T> plucker_normalize(const Tensor<T>& p, T eps = T(kDefaultEps)) {
  if (!(eps > T(0))) throw std::invalid_argument("plucker_normalize: eps must be positive");
  std::vector<T> out(p.values().begin(), p.values().end());
  const T norm = normalize_in_place<T>(out, eps);
  return make_op<T>("plucker_normalize", p.shape(), std::move(out), {p}, [norm, eps](Node<T>& n) {
    normalize_backward<T>(n.value, norm, eps, n.grad, n.parents[0]->ensure_grad());
  });
}

}  // namespace grassmann::geometry
