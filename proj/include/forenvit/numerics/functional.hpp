#pragma once

// Plain-value versions of the elementary functions. The graph ops in ops.hpp
// use the same formulas.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "forenvit/error.hpp"

namespace forenvit {

inline constexpr double kGeluCoeff = 0.044715;
inline const double kSqrt2OverPi = std::sqrt(2.0 / std::numbers::pi);

/// Max-subtracted softmax.
inline std::vector<double> softmax(std::span<const double> x) {
  if (x.empty()) throw InvalidValueError("softmax of an empty vector");
  double mx = x[0];
  for (double v : x) {
    if (!std::isfinite(v)) throw InvalidValueError("softmax input is not finite");
    mx = std::max(mx, v);
  }
  std::vector<double> out(x.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) sum += out[i] = std::exp(x[i] - mx);
  for (double& v : out) v /= sum;
  return out;
}

inline std::vector<double> layer_norm(std::span<const double> x, std::span<const double> gain,
                                      std::span<const double> bias, double eps) {
  if (gain.size() != x.size() || bias.size() != x.size())
    throw ShapeError("layer_norm: gain/bias length must equal input length");
  if (x.empty()) throw ShapeError("layer_norm of an empty vector");
  if (!(eps > 0)) throw ConfigError("layer_norm: eps must be positive");
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  const double rstd = 1.0 / std::sqrt(var + eps);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = gain[i] * (x[i] - mean) * rstd + bias[i];
  return out;
}

/// tanh approximation of x * Phi(x).
inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kSqrt2OverPi * (x + kGeluCoeff * x * x * x)));
}

inline double gelu_grad(double x) {
  const double u = kSqrt2OverPi * (x + kGeluCoeff * x * x * x);
  const double t = std::tanh(u);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kSqrt2OverPi * (1.0 + 3.0 * kGeluCoeff * x * x);
}

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// Binary cross-entropy on a logit, log-sum-exp stable form.
inline double bce_with_logit(double logit, int label) {
  if (!std::isfinite(logit)) throw InvalidValueError("bce_with_logit: logit is not finite");
  return std::max(logit, 0.0) - logit * static_cast<double>(label) + std::log1p(std::exp(-std::abs(logit)));
}

}  // namespace forenvit
