#pragma once

#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "forenvit/backbone/vit.hpp"
#include "forenvit/numerics/functional.hpp"

namespace forenvit {

enum class FusionMode { weighted_sum, concat };
enum class TokenScope { cls_only, all_tokens };
enum class AdaptorKind { none, linear };
enum class HeadKind { linear, mlp2 };

/// Which final blocks feed the classifier and how they are combined.
/// The blocks used are n-k+1 .. n.
struct FusionSpec {
  std::size_t k = 4;
  FusionMode mode = FusionMode::concat;
  TokenScope scope = TokenScope::cls_only;
  bool include_registers = false;  // all_tokens only
  std::size_t dim_budget = 4096;   // cap on concat + all_tokens width

  std::vector<std::size_t> blocks(std::size_t depth) const {
    std::vector<std::size_t> out;
    for (std::size_t i = depth - k + 1; i <= depth; ++i) out.push_back(i);
    return out;
  }

  /// Token rows a single sample contributes under this scope.
  std::vector<std::size_t> rows(const TokenLayout& layout) const {
    std::vector<std::size_t> r{layout.cls_row};
    if (scope == TokenScope::all_tokens) {
      if (include_registers) r.insert(r.end(), layout.register_rows.begin(), layout.register_rows.end());
      r.insert(r.end(), layout.patch_rows.begin(), layout.patch_rows.end());
    }
    return r;
  }

  void validate(const ViTConfig& cfg, std::size_t adaptor_out) const {
    if (k < 1 || k > cfg.depth)
      throw ConfigError("fusion k=" + std::to_string(k) + " outside 1.." + std::to_string(cfg.depth));
    if (mode == FusionMode::concat && scope == TokenScope::all_tokens) {
      const std::size_t width = k * rows(token_layout(cfg)).size() * adaptor_out;
      if (width > dim_budget)
        throw ConfigError("concat over all tokens gives " + std::to_string(width) + " features, budget is " +
                          std::to_string(dim_budget) + "; use weighted_sum");
    }
  }
};

inline const char* to_string(FusionMode m) { return m == FusionMode::concat ? "concat" : "weighted_sum"; }
inline const char* to_string(TokenScope s) { return s == TokenScope::cls_only ? "cls_only" : "all_tokens"; }
inline const char* to_string(AdaptorKind a) { return a == AdaptorKind::linear ? "linear" : "none"; }
inline const char* to_string(HeadKind h) { return h == HeadKind::linear ? "linear" : "mlp2"; }

inline FusionMode parse_fusion_mode(const std::string& s) {
  if (s == "concat") return FusionMode::concat;
  if (s == "weighted_sum" || s == "ws") return FusionMode::weighted_sum;
  throw ConfigError("unknown fusion mode '" + s + "'");
}
inline TokenScope parse_token_scope(const std::string& s) {
  if (s == "cls_only" || s == "cls") return TokenScope::cls_only;
  if (s == "all_tokens" || s == "all") return TokenScope::all_tokens;
  throw ConfigError("unknown token scope '" + s + "'");
}
inline AdaptorKind parse_adaptor_kind(const std::string& s) {
  if (s == "linear") return AdaptorKind::linear;
  if (s == "none" || s == "identity") return AdaptorKind::none;
  throw ConfigError("unknown adaptor kind '" + s + "'");
}
inline HeadKind parse_head_kind(const std::string& s) {
  if (s == "linear") return HeadKind::linear;
  if (s == "mlp2") return HeadKind::mlp2;
  throw ConfigError("unknown head kind '" + s + "'");
}

namespace detail {
template <typename T>
Tensor<T> xavier_param(std::size_t in, std::size_t out, Rng& rng) {
  const double lim = std::sqrt(6.0 / static_cast<double>(in + out));
  std::vector<T> v(in * out);
  for (auto& x : v) x = static_cast<T>(rng.uniform(-lim, lim));
  return Tensor<T>::parameter({in, out}, std::move(v));
}
template <typename T>
Tensor<T> zero_param(Shape s) {
  const auto n = shape_numel(s);
  return Tensor<T>::parameter(std::move(s), std::vector<T>(n, T(0)));
}
}  // namespace detail

/// Per-block transform applied to tapped features: dropout, then an optional
/// linear map (applied per token row).
template <typename T>
struct Adaptor {
  AdaptorKind kind = AdaptorKind::none;
  std::size_t input_dim = 0;
  std::size_t output_dim = 0;
  double dropout_rate = 0.0;
  Tensor<T> weight, bias;

  static Adaptor passthrough(std::size_t dim, double rate = 0.0) { return {AdaptorKind::none, dim, dim, rate, {}, {}}; }

  static Adaptor linear(std::size_t in, std::size_t out, double rate, Rng& rng) {
    return {AdaptorKind::linear, in, out, rate, detail::xavier_param<T>(in, out, rng), detail::zero_param<T>({out})};
  }

  /// Linear adaptor with identity weights and zero bias.
  static Adaptor identity(std::size_t dim) {
    std::vector<T> w(dim * dim, T(0));
    for (std::size_t i = 0; i < dim; ++i) w[i * dim + i] = T(1);
    return {AdaptorKind::linear, dim, dim, 0.0, Tensor<T>::parameter({dim, dim}, std::move(w)), detail::zero_param<T>({dim})};
  }

  Tensor<T> apply(const Tensor<T>& rows, Mode mode, Rng* rng) const {
    Tensor<T> x = rows;
    if (mode == Mode::train && dropout_rate > 0) {
      if (!rng) throw ContractError("adaptor dropout in train mode needs an Rng");
      x = ops::dropout(x, dropout_rate, mode, *rng);
    }
    if (kind == AdaptorKind::linear) x = ops::linear(x, weight, bias);
    return x;
  }

  void add_parameters(NamedParameters<T>& p, const std::string& prefix) const {
    if (kind != AdaptorKind::linear) return;
    p[prefix + "weight"] = weight;
    p[prefix + "bias"] = bias;
  }
};

/// Single-logit classifier: linear, or linear-GELU-linear.
template <typename T>
struct ClassifierHead {
  HeadKind kind = HeadKind::linear;
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;
  Tensor<T> w1, b1, w2, b2;

  static ClassifierHead create(HeadKind kind, std::size_t input_dim, std::size_t hidden_dim, Rng& rng) {
    if (input_dim == 0) throw ConfigError("classifier input_dim must be positive");
    ClassifierHead h;
    h.kind = kind;
    h.input_dim = input_dim;
    if (kind == HeadKind::linear) {
      h.w1 = detail::xavier_param<T>(input_dim, 1, rng);
      h.b1 = detail::zero_param<T>({1});
    } else {
      h.hidden_dim = hidden_dim == 0 ? std::max<std::size_t>(1, input_dim / 2) : hidden_dim;
      h.w1 = detail::xavier_param<T>(input_dim, h.hidden_dim, rng);
      h.b1 = detail::zero_param<T>({h.hidden_dim});
      h.w2 = detail::xavier_param<T>(h.hidden_dim, 1, rng);
      h.b2 = detail::zero_param<T>({1});
    }
    return h;
  }

  /// x: [B, input_dim] -> [B, 1]
  Tensor<T> logits(const Tensor<T>& x) const {
    if (x.rank() != 2 || x.dim(1) != input_dim)
      throw ShapeError("classifier expects [B, " + std::to_string(input_dim) + "], got " + shape_str(x.shape()));
    auto h = ops::linear(x, w1, b1);
    if (kind == HeadKind::mlp2) h = ops::linear(ops::gelu(h), w2, b2);
    return h;
  }

  void add_parameters(NamedParameters<T>& p, const std::string& prefix) const {
    p[prefix + "fc1.weight"] = w1;
    p[prefix + "fc1.bias"] = b1;
    if (kind == HeadKind::mlp2) {
      p[prefix + "fc2.weight"] = w2;
      p[prefix + "fc2.bias"] = b2;
    }
  }
};

/// Combines the adapted features of the k final blocks into one vector per
/// sample: [B, dim]. `features` must be exactly those blocks, ascending.
template <typename T>
Tensor<T> fuse(const std::vector<BlockFeatures<T>>& features, const std::vector<Adaptor<T>>& adaptors,
               const FusionSpec& spec, const Tensor<T>& fusion_logits, const TokenLayout& layout, std::size_t depth,
               std::size_t batch, Mode mode, Rng* rng) {
  if (features.size() != spec.k || adaptors.size() != spec.k)
    throw ContractError("fuse: expected " + std::to_string(spec.k) + " block features and adaptors, got " +
                        std::to_string(features.size()) + " / " + std::to_string(adaptors.size()));
  const auto want = spec.blocks(depth);
  for (std::size_t i = 0; i < spec.k; ++i)
    if (features[i].block_index != want[i])
      throw ContractError("fuse: features must be blocks " + std::to_string(want.front()) + ".." +
                          std::to_string(want.back()) + " in ascending order");
  const auto rows = spec.rows(layout);
  std::vector<std::size_t> index;
  index.reserve(batch * rows.size());
  for (std::size_t b = 0; b < batch; ++b)
    for (auto r : rows) index.push_back(b * layout.tokens + r);

  std::vector<Tensor<T>> parts;
  for (std::size_t i = 0; i < spec.k; ++i) {
    const auto& a = adaptors[i];
    if (features[i].tokens.dim(1) != a.input_dim) throw ShapeError("fuse: adaptor input_dim does not match features");
    auto picked = ops::gather_rows(features[i].tokens, index);
    auto adapted = a.apply(picked, mode, rng);
    if (rows.size() > 1) adapted = ops::reshape(adapted, {batch, rows.size() * a.output_dim});
    parts.push_back(std::move(adapted));
  }
  if (spec.mode == FusionMode::concat) return parts.size() == 1 ? parts[0] : ops::concat_cols(parts);
  for (const auto& p : parts)
    if (p.shape() != parts[0].shape()) throw ShapeError("weighted_sum fusion needs equal adaptor output sizes");
  return ops::weighted_sum(parts, fusion_logits);
}

/// Partial fine-tuning plan: the last k blocks, optionally CLS and register
/// tokens, and the new classifier are trainable.
struct FineTunePlan {
  std::size_t k = 2;
  bool tune_tokens = true;
};

/// Trainable flag per parameter name for a fine-tuning plan. Names outside
/// "backbone/" (the head) are always trainable.
template <typename T>
std::map<std::string, bool> build_finetune_mask(const FineTunePlan& plan, const NamedParameters<T>& params,
                                                std::size_t depth) {
  if (plan.k < 1 || plan.k > depth)
    throw ConfigError("fine-tune k=" + std::to_string(plan.k) + " outside 1.." + std::to_string(depth));
  std::vector<std::string> tuned_prefixes;
  for (std::size_t i = depth - plan.k + 1; i <= depth; ++i) tuned_prefixes.push_back(block_prefix(i));
  std::map<std::string, bool> mask;
  for (const auto& [name, p] : params) {
    bool on = false;
    if (name.rfind("backbone/", 0) != 0) {
      on = true;
    } else if (name == "backbone/cls_token" || name == "backbone/registers") {
      on = plan.tune_tokens;
    } else {
      for (const auto& pre : tuned_prefixes)
        if (name.rfind(pre, 0) == 0) on = true;
    }
    mask[name] = on;
  }
  return mask;
}

template <typename T>
void apply_mask(NamedParameters<T>& params, const std::map<std::string, bool>& mask) {
  for (auto& [name, p] : params) {
    auto it = mask.find(name);
    if (it == mask.end()) throw ContractError("mask has no entry for " + name);
    p.set_trainable(it->second);
  }
}

enum class ThresholdKind { fixed_half, validation_eer };

/// Decision threshold: fixed 0.5, or the EER threshold of a validation split.
struct ThresholdPolicy {
  ThresholdKind kind = ThresholdKind::fixed_half;
  std::optional<double> tau;
  std::string split;  // provenance for validation_eer

  static ThresholdPolicy fixed_half() { return {ThresholdKind::fixed_half, 0.5, ""}; }
  static ThresholdPolicy calibrated(double tau, std::string split) {
    return {ThresholdKind::validation_eer, tau, std::move(split)};
  }
  static ThresholdPolicy fixed(double tau) { return {ThresholdKind::fixed_half, tau, ""}; }

  double resolve() const {
    if (kind == ThresholdKind::validation_eer && !tau)
      throw StateError("validation_eer threshold policy has not been calibrated");
    return tau.value_or(0.5);
  }
};

struct Prediction {
  int label = 0;  // 1 = fake
  double score = 0.0;
};

/// label 1 iff sigmoid(logit) >= tau.
inline Prediction predict(double logit, const ThresholdPolicy& policy) {
  if (!std::isfinite(logit)) throw InvalidValueError("predict: logit is not finite");
  const double tau = policy.resolve();
  const double s = sigmoid(logit);
  return {s >= tau ? 1 : 0, s};
}

}  // namespace forenvit
