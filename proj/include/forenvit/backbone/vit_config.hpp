#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "forenvit/error.hpp"

namespace forenvit {

/// Architecture of the compact ViT. Defaults are the desk-scale setting.
struct ViTConfig {
  std::size_t image_size = 28;
  std::size_t patch_size = 7;
  std::size_t channels = 1;
  std::size_t depth = 8;
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t registers = 4;
  double mlp_ratio = 4.0;
  double dropout_rate = 0.0;

  void validate() const {
    if (image_size == 0 || patch_size == 0 || channels == 0 || depth == 0 || width == 0 || heads == 0)
      throw ConfigError("ViT config: sizes must be positive");
    if (image_size % patch_size != 0)
      throw ConfigError("ViT config: image_size " + std::to_string(image_size) + " not divisible by patch_size " +
                        std::to_string(patch_size));
    if (width % heads != 0)
      throw ConfigError("ViT config: width " + std::to_string(width) + " not divisible by heads " + std::to_string(heads));
    if (!(mlp_ratio > 0)) throw ConfigError("ViT config: mlp_ratio must be positive");
    if (!(dropout_rate >= 0 && dropout_rate < 1)) throw ConfigError("ViT config: dropout_rate must lie in [0, 1)");
  }

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
  std::size_t tokens() const { return 1 + registers + num_patches(); }
  std::size_t mlp_hidden() const {
    const auto h = static_cast<std::size_t>(static_cast<double>(width) * mlp_ratio + 0.5);
    return h == 0 ? 1 : h;
  }

  bool operator==(const ViTConfig&) const = default;
};

/// Row indices of the token matrix: CLS first, then registers, then patches.
struct TokenLayout {
  std::size_t cls_row = 0;
  std::vector<std::size_t> register_rows;
  std::vector<std::size_t> patch_rows;
  std::size_t tokens = 0;
};

inline TokenLayout token_layout(const ViTConfig& cfg) {
  cfg.validate();
  TokenLayout l;
  l.tokens = cfg.tokens();
  for (std::size_t r = 0; r < cfg.registers; ++r) l.register_rows.push_back(1 + r);
  for (std::size_t p = 0; p < cfg.num_patches(); ++p) l.patch_rows.push_back(1 + cfg.registers + p);
  return l;
}

}  // namespace forenvit
