// Central finite-difference verification of backward().
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "grassmann/ops.hpp"

namespace grassmann {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t leaf = 0;     // leaf holding the worst element
  std::size_t element = 0;  // flat index within that leaf
  double analytic = 0.0;
  double numeric = 0.0;
};

namespace detail {

// Non-scalar outputs are contracted with fixed pseudo-random weights so every
// output element contributes and symmetric cancellations are unlikely.
inline std::vector<double> contraction_weights(std::size_t n) {
  std::mt19937_64 rng(0x5eed);
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> w(n);
  for (auto& v : w) v = dist(rng);
  return w;
}

// The contraction accumulates in long double and is not rounded back before
// differencing, so the finite differences only see the rounding of f itself.
inline long double contract_value(std::span<const double> out) {
  if (out.size() == 1) return out[0];
  const auto w = contraction_weights(out.size());
  long double acc = 0;
  for (std::size_t i = 0; i < w.size(); ++i) acc += static_cast<long double>(out[i]) * w[i];
  return acc;
}

inline Tensord contract_to_scalar(const Tensord& out) {
  if (out.numel() == 1) return out;
  auto w = contraction_weights(out.numel());
  const double value = static_cast<double>(contract_value(out.values()));
  return make_op<double>("weighted_sum", Shape{1}, {value}, {out}, [w = std::move(w)](Node<double>& n) {
    auto& g = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < w.size(); ++i) g[i] += w[i] * n.grad[0];
  });
}

}  // namespace detail

/// Compares backward() against (f(x+h) - f(x-h)) / 2h for every element of every
/// leaf. Relative error uses the denominator max(|a|, |b|, 1e-8).
inline GradCheckResult grad_check_detailed(const std::function<Tensord()>& f,
                                           std::vector<Tensord> leaves, double h = 1e-5) {
  for (auto& leaf : leaves) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }
  detail::contract_to_scalar(f()).backward();
  std::vector<std::vector<double>> analytic;
  for (const auto& leaf : leaves) analytic.emplace_back(leaf.grad().begin(), leaf.grad().end());

  auto eval = [&] {
    NoGradGuard guard;
    return detail::contract_value(f().values());
  };

  GradCheckResult result;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto values = leaves[li].mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const long double up = eval();
      values[i] = saved - h;
      const long double down = eval();
      values[i] = saved;
      const double numeric = static_cast<double>((up - down) / (2 * h));
      const double a = analytic[li][i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      if (err > result.max_rel_error) result = {err, li, i, a, numeric};
    }
  }
  return result;
}

inline double grad_check(const std::function<Tensord()>& f, std::vector<Tensord> leaves,
                         double h = 1e-5) {
  return grad_check_detailed(f, std::move(leaves), h).max_rel_error;
}

}  // namespace grassmann
