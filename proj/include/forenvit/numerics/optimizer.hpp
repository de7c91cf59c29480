#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "forenvit/numerics/tensor.hpp"

namespace forenvit {

/// Named parameters. std::map keeps names unique and iterates lexicographically.
template <typename T>
using NamedParameters = std::map<std::string, Tensor<T>>;

template <typename T>
void zero_grads(NamedParameters<T>& params) {
  for (auto& [name, p] : params) p.zero_grad();
}

template <typename T>
std::size_t count_trainable(const NamedParameters<T>& params) {
  std::size_t n = 0;
  for (const auto& [name, p] : params)
    if (p.trainable()) n += p.numel();
  return n;
}

struct OptimizerConfig {
  double learning_rate = 3e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Plain gradient descent p -= lr * g, no moments and no decay.
  bool plain_descent = false;
};

struct OptimizerState {
  OptimizerConfig config;
  std::uint64_t step_count = 0;
  struct Moments {
    std::vector<double> first;
    std::vector<double> second;
  };
  std::map<std::string, Moments> moments;  // trainable parameters only
};

/// Adaptive-moment update with decoupled weight decay. Consumes and clears
/// the gradients of every trainable parameter; frozen ones are not touched.
template <typename T>
void optimizer_step(NamedParameters<T>& params, OptimizerState& state) {
  const auto& cfg = state.config;
  for (auto& [name, p] : params)
    if (p.trainable() && !p.has_grad()) throw ContractError("optimizer_step: no gradient for trainable parameter " + name);

  ++state.step_count;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step_count));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step_count));
  for (auto& [name, p] : params) {
    if (!p.trainable()) continue;
    auto w = p.mutable_data();
    const auto g = p.grad();
    if (cfg.plain_descent) {
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(w[i] - cfg.learning_rate * g[i]);
      p.zero_grad();
      continue;
    }
    auto& mom = state.moments[name];
    if (mom.first.size() != w.size()) {
      mom.first.assign(w.size(), 0.0);
      mom.second.assign(w.size(), 0.0);
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      mom.first[i] = cfg.beta1 * mom.first[i] + (1.0 - cfg.beta1) * gi;
      mom.second[i] = cfg.beta2 * mom.second[i] + (1.0 - cfg.beta2) * gi * gi;
      const double mhat = mom.first[i] / bc1;
      const double vhat = mom.second[i] / bc2;
      double v = w[i];
      v -= cfg.learning_rate * cfg.weight_decay * v;
      v -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.eps);
      w[i] = static_cast<T>(v);
    }
    p.zero_grad();
  }
}

}  // namespace forenvit
