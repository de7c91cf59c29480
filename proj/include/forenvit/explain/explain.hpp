#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <vector>

#include "forenvit/backbone/vit.hpp"
#include "forenvit/data/image.hpp"

namespace forenvit {

enum class MapNormalization { raw, unit_sum };

/// Which attention entries count as "directed toward the CLS token".
enum class MapReading {
  cls_query_row,   // CLS attending to patches (default)
  cls_key_column,  // patches attending to CLS
};

struct MapOptions {
  MapNormalization normalization = MapNormalization::raw;
  MapReading reading = MapReading::cls_query_row;
  // true: average full rows over heads, then drop non-patch columns.
  // false: drop first and renormalise each head's patch entries, then average.
  bool average_before_drop = true;
};

/// Patch-grid heat map, row-major, grid x grid.
struct AttentionMap {
  std::size_t grid = 0;
  std::size_t source_block = 0;
  MapNormalization normalization = MapNormalization::raw;
  std::vector<double> values;

  double at(std::size_t row, std::size_t col) const { return values[row * grid + col]; }
};

/// Head-averaged attention row of the CLS query over all tokens (sums to 1).
template <typename T>
std::vector<double> cls_row_average(const AttentionRecord<T>& rec, std::size_t sample, std::size_t cls_row = 0) {
  std::vector<double> row(rec.tokens, 0.0);
  for (std::size_t h = 0; h < rec.heads; ++h)
    for (std::size_t j = 0; j < rec.tokens; ++j) row[j] += rec.at(sample, h, cls_row, j) / static_cast<double>(rec.heads);
  return row;
}

template <typename T>
AttentionMap cls_attention_map(const AttentionRecord<T>& rec, const TokenLayout& layout, std::size_t sample = 0,
                               const MapOptions& opt = {}) {
  if (rec.tokens != layout.tokens)
    throw ShapeError("attention record has " + std::to_string(rec.tokens) + " tokens, layout expects " +
                     std::to_string(layout.tokens));
  if (sample >= rec.batch) throw ShapeError("attention record has no sample " + std::to_string(sample));
  if (rec.weights.size() != rec.batch * rec.heads * rec.tokens * rec.tokens)
    throw ShapeError("attention record weight count does not match its dimensions");
  const std::size_t np = layout.patch_rows.size();
  const auto g = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(np))));
  if (g * g != np) throw ShapeError("patch count " + std::to_string(np) + " is not a square grid");
  auto entry = [&](std::size_t h, std::size_t patch_row) -> double {
    return opt.reading == MapReading::cls_query_row ? rec.at(sample, h, layout.cls_row, patch_row)
                                                    : rec.at(sample, h, patch_row, layout.cls_row);
  };
  AttentionMap m;
  m.grid = g;
  m.source_block = rec.block_index;
  m.normalization = opt.normalization;
  m.values.assign(np, 0.0);
  for (std::size_t h = 0; h < rec.heads; ++h) {
    double head_sum = 0;
    for (std::size_t p = 0; p < np; ++p) head_sum += entry(h, layout.patch_rows[p]);
    for (std::size_t p = 0; p < np; ++p) {
      double v = entry(h, layout.patch_rows[p]);
      if (!opt.average_before_drop && head_sum > 0) v /= head_sum;
      m.values[p] += v / static_cast<double>(rec.heads);
    }
  }
  if (opt.normalization == MapNormalization::unit_sum) {
    double s = 0;
    for (double v : m.values) s += v;
    if (s > 0)
      for (double& v : m.values) v /= s;
  }
  return m;
}

/// Bilinear resize with half-pixel centres; samples outside clamp to the edge.
inline std::vector<double> upsample(const AttentionMap& m, std::size_t width, std::size_t height) {
  if (width == 0 || height == 0) throw ConfigError("upsample target must be non-empty");
  if (m.grid == 0 || m.values.size() != m.grid * m.grid) throw ShapeError("attention map is empty or malformed");
  const double g = static_cast<double>(m.grid);
  std::vector<double> out(width * height);
  auto axis = [&](std::size_t i, std::size_t n, std::size_t& lo, std::size_t& hi, double& t) {
    double c = (static_cast<double>(i) + 0.5) * g / static_cast<double>(n) - 0.5;
    c = std::clamp(c, 0.0, g - 1.0);
    lo = static_cast<std::size_t>(std::floor(c));
    hi = std::min(lo + 1, m.grid - 1);
    t = c - static_cast<double>(lo);
  };
  for (std::size_t y = 0; y < height; ++y) {
    std::size_t y0, y1;
    double ty;
    axis(y, height, y0, y1, ty);
    for (std::size_t x = 0; x < width; ++x) {
      std::size_t x0, x1;
      double tx;
      axis(x, width, x0, x1, tx);
      const double top = m.at(y0, x0) * (1 - tx) + m.at(y0, x1) * tx;
      const double bot = m.at(y1, x0) * (1 - tx) + m.at(y1, x1) * tx;
      out[y * width + x] = top * (1 - ty) + bot * ty;
    }
  }
  return out;
}

inline std::array<double, 3> jet(double t) {
  t = std::clamp(t, 0.0, 1.0);
  auto f = [&](double c) { return std::clamp(1.5 - std::fabs(4 * t - c), 0.0, 1.0); };
  return {f(3), f(2), f(1)};
}

/// Blends a grayscale image (values in [0, 1]) with the jet-coloured heat,
/// min-max normalised: out = (1 - alpha) * gray + alpha * jet(heat).
inline Image overlay(std::span<const float> gray, std::size_t width, std::size_t height, std::span<const double> heat,
                     double alpha) {
  if (!(alpha >= 0 && alpha <= 1)) throw ConfigError("overlay alpha must lie in [0, 1]");
  if (gray.size() != width * height || heat.size() != width * height)
    throw ShapeError("overlay: image and heat sizes differ");
  const auto [lo, hi] = std::minmax_element(heat.begin(), heat.end());
  const double span = *hi - *lo;
  Image out(width, height, 3);
  for (std::size_t i = 0; i < width * height; ++i) {
    const double t = span > 0 ? (heat[i] - *lo) / span : 0.0;
    const auto c = jet(t);
    for (std::size_t ch = 0; ch < 3; ++ch) out.pixels[i * 3 + ch] = to_byte((1 - alpha) * gray[i] + alpha * c[ch]);
  }
  return out;
}

inline Image gray_to_rgb(std::span<const float> gray, std::size_t width, std::size_t height) {
  Image out(width, height, 3);
  for (std::size_t i = 0; i < width * height; ++i)
    for (std::size_t ch = 0; ch < 3; ++ch) out.pixels[i * 3 + ch] = to_byte(gray[i]);
  return out;
}

/// Panels placed left to right with a 2-pixel black gap.
inline Image montage(const std::vector<Image>& panels) {
  if (panels.empty()) throw ConfigError("montage needs at least one panel");
  std::size_t w = 0, h = 0;
  for (const auto& p : panels) {
    if (p.channels != 3) throw ShapeError("montage panels must be color images");
    w += p.width;
    h = std::max(h, p.height);
  }
  w += 2 * (panels.size() - 1);
  Image out(w, h, 3);
  std::size_t x0 = 0;
  for (const auto& p : panels) {
    for (std::size_t y = 0; y < p.height; ++y)
      for (std::size_t x = 0; x < p.width; ++x)
        for (std::size_t c = 0; c < 3; ++c) out.at(x0 + x, y, c) = p.at(x, y, c);
    x0 += p.width + 2;
  }
  return out;
}

/// Share of map mass that falls on masked pixels; each patch's mass is spread
/// evenly over its pixels.
inline double mass_inside(const AttentionMap& m, const Image& mask) {
  if (mask.width != mask.height || mask.width % m.grid != 0) throw ShapeError("mask does not tile the patch grid");
  const std::size_t p = mask.width / m.grid;
  double inside = 0, total = 0;
  for (std::size_t gy = 0; gy < m.grid; ++gy)
    for (std::size_t gx = 0; gx < m.grid; ++gx) {
      std::size_t hit = 0;
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t x = 0; x < p; ++x) hit += mask.at(gx * p + x, gy * p + y) > 127;
      inside += m.at(gy, gx) * static_cast<double>(hit) / static_cast<double>(p * p);
      total += m.at(gy, gx);
    }
  return total > 0 ? inside / total : 0.0;
}

}  // namespace forenvit
