// Adam with bias correction and optional global gradient-norm clipping.
#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "grassmann/tensor.hpp"

namespace grassmann {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // <= 0 disables clipping

  void validate() const {
    if (!(lr > 0)) throw std::invalid_argument("learning rate must be positive");
    if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1))
      throw std::invalid_argument("Adam betas must lie in (0, 1)");
    if (!(eps > 0)) throw std::invalid_argument("Adam epsilon must be positive");
  }
};

template <class T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, AdamConfig config) : params_(std::move(params)), config_(config) {
    config_.validate();
    for (const auto& p : params_) {
      first_.emplace_back(p.numel(), 0.0);
      second_.emplace_back(p.numel(), 0.0);
    }
  }

  /// Global L2 norm over the gradients of every parameter.
  double grad_norm() const {
    double s = 0;
    for (const auto& p : params_)
      for (T g : p.grad()) s += double(g) * double(g);
    return std::sqrt(s);
  }

  /// Applies one update and returns the pre-clip gradient norm.
  double step() {
    double norm = grad_norm();
    if (!std::isfinite(norm)) throw NonFiniteError("optimizer: non-finite gradient norm");
    double clip = 1.0;
    if (config_.clip_norm > 0 && norm > config_.clip_norm) clip = config_.clip_norm / (norm + 1e-12);
    ++step_;
    const double bc1 = 1.0 - std::pow(config_.beta1, double(step_));
    const double bc2 = 1.0 - std::pow(config_.beta2, double(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto values = params_[i].mutable_values();
      auto grads = params_[i].grad();
      auto& m = first_[i];
      auto& v = second_[i];
      for (std::size_t k = 0; k < values.size(); ++k) {
        const double g = double(grads[k]) * clip;
        m[k] = config_.beta1 * m[k] + (1 - config_.beta1) * g;
        v[k] = config_.beta2 * v[k] + (1 - config_.beta2) * g * g;
        const double update = config_.lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + config_.eps);
        values[k] = T(double(values[k]) - update);
      }
    }
    return norm;
  }

  /// Scales every gradient in place so the global norm is at most `max_norm`.
  /// Returns the norm before scaling.
  double clip_gradients(double max_norm) {
    const double norm = grad_norm();
    if (norm > max_norm) {
      const double s = max_norm / (norm + 1e-12);
      for (auto& p : params_)
        for (auto& g : p.mutable_grad()) g = T(double(g) * s);
    }
    return norm;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  long step_count() const { return step_; }
  std::size_t parameter_elements() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.numel();
    return n;
  }
  const std::vector<Tensor<T>>& parameters() const { return params_; }

 private:
  std::vector<Tensor<T>> params_;
  AdamConfig config_;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
  long step_ = 0;
};

}  // namespace grassmann
