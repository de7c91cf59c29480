#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "forenvit/backbone/vit_config.hpp"
#include "forenvit/numerics/ops.hpp"
#include "forenvit/numerics/optimizer.hpp"
#include "forenvit/numerics/rng.hpp"

namespace forenvit {

using ops::Mode;

/// Output tokens of one block for a batch: rows [b*T, (b+1)*T) belong to sample b.
template <typename T>
struct BlockFeatures {
  std::size_t block_index = 0;  // 1-based
  Tensor<T> tokens;             // [B*T, d]
};

/// Post-softmax attention of one block, laid out batch x heads x T x T.
template <typename T>
struct AttentionRecord {
  std::size_t block_index = 0;
  std::size_t batch = 0;
  std::size_t heads = 0;
  std::size_t tokens = 0;
  std::vector<T> weights;

  T at(std::size_t b, std::size_t h, std::size_t i, std::size_t j) const {
    return weights[((b * heads + h) * tokens + i) * tokens + j];
  }
};

template <typename T>
struct ForwardResult {
  Tensor<T> final_tokens;  // final norm applied, [B*T, d]
  Tensor<T> last_block;    // phi_n, before the final norm
  std::vector<BlockFeatures<T>> taps;
  std::optional<AttentionRecord<T>> final_attention;
};

inline std::string block_prefix(std::size_t index) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "backbone/blocks.%02zu.", index);
  return buf;
}

/// Rearranges images [B, C, H, W] into patch rows [B*Np, C*P*P]; each row is
/// one non-overlapping patch in raster order, channel-major inside the patch.
template <typename T>
std::vector<T> extract_patches(std::span<const T> images, std::size_t batch, const ViTConfig& cfg) {
  const std::size_t c = cfg.channels, s = cfg.image_size, p = cfg.patch_size, g = cfg.grid();
  if (images.size() != batch * c * s * s)
    throw ShapeError("images: expected " + std::to_string(batch) + "x" + std::to_string(c) + "x" + std::to_string(s) + "x" +
                     std::to_string(s) + " values, got " + std::to_string(images.size()));
  std::vector<T> out(batch * g * g * c * p * p);
  std::size_t o = 0;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t py = 0; py < g; ++py)
      for (std::size_t px = 0; px < g; ++px)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t y = 0; y < p; ++y)
            for (std::size_t x = 0; x < p; ++x)
              out[o++] = images[((b * c + ch) * s + py * p + y) * s + px * p + x];
  return out;
}

/// Compact pre-norm ViT with CLS and register tokens.
template <typename T>
class Backbone {
 public:
  struct Block {
    Tensor<T> norm1_gain, norm1_bias, qkv_w, qkv_b, proj_w, proj_b;
    Tensor<T> norm2_gain, norm2_bias, fc1_w, fc1_b, fc2_w, fc2_b;
  };

  Backbone(const ViTConfig& cfg, Rng rng) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t d = cfg_.width, hidden = cfg_.mlp_hidden();
    auto normal = [&](Shape shape, double std) {
      std::vector<T> v(shape_numel(shape));
      for (auto& x : v) x = static_cast<T>(rng.normal(0.0, std));
      return Tensor<T>::parameter(std::move(shape), std::move(v));
    };
    auto xavier = [&](std::size_t in, std::size_t out) {
      const double lim = std::sqrt(6.0 / static_cast<double>(in + out));
      std::vector<T> v(in * out);
      for (auto& x : v) x = static_cast<T>(rng.uniform(-lim, lim));
      return Tensor<T>::parameter({in, out}, std::move(v));
    };
    auto filled = [](Shape shape, T v) {
      auto n = shape_numel(shape);
      return Tensor<T>::parameter(std::move(shape), std::vector<T>(n, v));
    };
    patch_w_ = xavier(cfg_.patch_dim(), d);
    patch_b_ = filled({d}, T(0));
    pos_ = normal({cfg_.num_patches(), d}, 0.02);
    cls_ = normal({1, d}, 0.02);
    if (cfg_.registers > 0) regs_ = normal({cfg_.registers, d}, 0.02);
    for (std::size_t i = 0; i < cfg_.depth; ++i) {
      Block b;
      b.norm1_gain = filled({d}, T(1));
      b.norm1_bias = filled({d}, T(0));
      b.qkv_w = xavier(d, 3 * d);
      b.qkv_b = filled({3 * d}, T(0));
      b.proj_w = xavier(d, d);
      b.proj_b = filled({d}, T(0));
      b.norm2_gain = filled({d}, T(1));
      b.norm2_bias = filled({d}, T(0));
      b.fc1_w = xavier(d, hidden);
      b.fc1_b = filled({hidden}, T(0));
      b.fc2_w = xavier(hidden, d);
      b.fc2_b = filled({d}, T(0));
      blocks_.push_back(std::move(b));
    }
    norm_gain_ = filled({d}, T(1));
    norm_bias_ = filled({d}, T(0));
  }

  const ViTConfig& config() const { return cfg_; }
  const Block& block(std::size_t index) const { return blocks_.at(index - 1); }

  /// All parameters by name; handles alias the live tensors.
  NamedParameters<T> parameters() const {
    NamedParameters<T> p;
    p["backbone/patch_embed.weight"] = patch_w_;
    p["backbone/patch_embed.bias"] = patch_b_;
    p["backbone/pos_embed"] = pos_;
    p["backbone/cls_token"] = cls_;
    if (regs_.defined()) p["backbone/registers"] = regs_;
    p["backbone/norm.gain"] = norm_gain_;
    p["backbone/norm.bias"] = norm_bias_;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const auto pre = block_prefix(i + 1);
      const Block& b = blocks_[i];
      p[pre + "norm1.gain"] = b.norm1_gain;
      p[pre + "norm1.bias"] = b.norm1_bias;
      p[pre + "attn.qkv.weight"] = b.qkv_w;
      p[pre + "attn.qkv.bias"] = b.qkv_b;
      p[pre + "attn.proj.weight"] = b.proj_w;
      p[pre + "attn.proj.bias"] = b.proj_b;
      p[pre + "norm2.gain"] = b.norm2_gain;
      p[pre + "norm2.bias"] = b.norm2_bias;
      p[pre + "mlp.fc1.weight"] = b.fc1_w;
      p[pre + "mlp.fc1.bias"] = b.fc1_b;
      p[pre + "mlp.fc2.weight"] = b.fc2_w;
      p[pre + "mlp.fc2.bias"] = b.fc2_b;
    }
    return p;
  }

  void set_trainable(bool on) {
    for (auto& [name, t] : parameters()) {
      Tensor<T> h = t;
      h.set_trainable(on);
    }
  }

  /// Deep copy with independent parameter storage.
  Backbone clone() const {
    Backbone b = *this;
    b.patch_w_ = patch_w_.clone();
    b.patch_b_ = patch_b_.clone();
    b.pos_ = pos_.clone();
    b.cls_ = cls_.clone();
    if (regs_.defined()) b.regs_ = regs_.clone();
    b.norm_gain_ = norm_gain_.clone();
    b.norm_bias_ = norm_bias_.clone();
    for (auto& blk : b.blocks_) {
      for (Tensor<T>* t : {&blk.norm1_gain, &blk.norm1_bias, &blk.qkv_w, &blk.qkv_b, &blk.proj_w, &blk.proj_b,
                           &blk.norm2_gain, &blk.norm2_bias, &blk.fc1_w, &blk.fc1_b, &blk.fc2_w, &blk.fc2_b})
        *t = t->clone();
    }
    return b;
  }

  /// Patch projection plus position embedding: [B*Np, d].
  Tensor<T> patchify(const Tensor<T>& images, std::size_t batch) const {
    Tensor<T> patches({batch * cfg_.num_patches(), cfg_.patch_dim()}, extract_patches<T>(images.data(), batch, cfg_));
    return ops::add_tiled(ops::linear(patches, patch_w_, patch_b_), pos_);
  }

  /// Prepends CLS and registers to each sample's patch rows.
  /// `patch_tokens` holds `per_sample` rows per sample.
  Tensor<T> assemble(const Tensor<T>& patch_tokens, std::size_t batch, std::size_t per_sample) const {
    const std::size_t r = cfg_.registers;
    std::vector<Tensor<T>> parts{cls_};
    if (r > 0) parts.push_back(regs_);
    parts.push_back(patch_tokens);
    const Tensor<T> pool = ops::concat_rows(parts);
    std::vector<std::size_t> index;
    index.reserve(batch * (1 + r + per_sample));
    for (std::size_t b = 0; b < batch; ++b) {
      index.push_back(0);
      for (std::size_t i = 0; i < r; ++i) index.push_back(1 + i);
      for (std::size_t j = 0; j < per_sample; ++j) index.push_back(1 + r + b * per_sample + j);
    }
    return ops::gather_rows(pool, std::move(index));
  }

  Tensor<T> embed(const Tensor<T>& images, std::size_t batch) const {
    return assemble(patchify(images, batch), batch, cfg_.num_patches());
  }

  /// One pre-norm block: x + attn(norm1(x)), then + mlp(norm2(.)).
  Tensor<T> run_block(std::size_t index, const Tensor<T>& x, std::size_t tokens, Mode mode, Rng* rng,
                      std::vector<T>* attn_out) const {
    const Block& b = blocks_.at(index - 1);
    const double rate = cfg_.dropout_rate;
    auto drop = [&](const Tensor<T>& t) {
      if (mode == Mode::eval || rate == 0.0) return t;
      return ops::dropout(t, rate, mode, *rng);
    };
    auto h = ops::layer_norm(x, b.norm1_gain, b.norm1_bias);
    h = ops::linear(h, b.qkv_w, b.qkv_b);
    h = ops::attention(h, cfg_.heads, tokens, attn_out);
    h = drop(ops::linear(h, b.proj_w, b.proj_b));
    const auto mid = ops::add(x, h);
    auto m = ops::layer_norm(mid, b.norm2_gain, b.norm2_bias);
    m = ops::gelu(ops::linear(m, b.fc1_w, b.fc1_b));
    m = drop(ops::linear(m, b.fc2_w, b.fc2_b));
    return ops::add(mid, m);
  }

  Tensor<T> final_norm(const Tensor<T>& x) const { return ops::layer_norm(x, norm_gain_, norm_bias_); }

  /// Runs all blocks over an assembled token matrix with `tokens` rows per sample.
  ForwardResult<T> run_blocks(Tensor<T> x, std::size_t batch, std::size_t tokens, const std::set<std::size_t>& taps,
                              Mode mode, Rng* rng, bool capture_attention = true) const {
    for (auto i : taps)
      if (i < 1 || i > cfg_.depth)
        throw ConfigError("tap index " + std::to_string(i) + " outside 1.." + std::to_string(cfg_.depth));
    if (mode == Mode::train && cfg_.dropout_rate > 0 && rng == nullptr)
      throw ContractError("training-mode forward with dropout needs an Rng");
    ForwardResult<T> res;
    for (std::size_t i = 1; i <= cfg_.depth; ++i) {
      const bool last = i == cfg_.depth;
      std::vector<T> probs;
      x = run_block(i, x, tokens, mode, rng, last && capture_attention ? &probs : nullptr);
      if (taps.count(i)) res.taps.push_back({i, x});
      if (last && capture_attention)
        res.final_attention = AttentionRecord<T>{i, batch, cfg_.heads, tokens, std::move(probs)};
    }
    res.last_block = x;
    res.final_tokens = final_norm(x);
    return res;
  }

  /// images: [B, C, H, W] values (a rank-4 tensor or any tensor of that size).
  ForwardResult<T> forward(const Tensor<T>& images, std::size_t batch, const std::set<std::size_t>& taps = {},
                           Mode mode = Mode::eval, Rng* rng = nullptr) const {
    return run_blocks(embed(images, batch), batch, cfg_.tokens(), taps, mode, rng);
  }

 private:
  ViTConfig cfg_;
  Tensor<T> patch_w_, patch_b_, pos_, cls_, regs_, norm_gain_, norm_bias_;
  std::vector<Block> blocks_;
};

/// Row range of sample `b` within a batched token matrix.
template <typename T>
std::span<const T> sample_tokens(const Tensor<T>& batched, std::size_t b, std::size_t tokens) {
  const std::size_t d = batched.dim(1);
  return batched.data().subspan(b * tokens * d, tokens * d);
}

}  // namespace forenvit
