#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "forenvit/error.hpp"

namespace forenvit {

/// 8-bit image, channel-interleaved rows (gray: 1 channel, color: 3).
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::size_t c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), pixels(w * h * c, fill) {}

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c = 0) { return pixels[(y * width + x) * channels + c]; }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c = 0) const { return pixels[(y * width + x) * channels + c]; }
  bool operator==(const Image&) const = default;
};

inline std::uint8_t to_byte(double v) {
  if (!(v > 0.0)) return 0;
  if (v >= 1.0) return 255;
  return static_cast<std::uint8_t>(std::lround(v * 255.0));
}

/// Binary P5 (gray) or P6 (color) bytes.
inline std::string encode_pnm(const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw ShapeError("pnm: images must have 1 or 3 channels");
  if (img.pixels.size() != img.width * img.height * img.channels) throw ShapeError("pnm: pixel buffer size mismatch");
  std::string out = (img.channels == 1 ? "P5\n" : "P6\n") + std::to_string(img.width) + " " + std::to_string(img.height) +
                    "\n255\n";
  out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
  return out;
}

inline Image decode_pnm(const std::string& bytes, const std::string& what = "image") {
  std::size_t pos = 0;
  auto fail = [&](const std::string& msg) -> Image { throw DataError(what + ": " + msg); };
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&]() -> std::size_t {
    skip_space();
    std::size_t v = 0, digits = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos++] - '0');
      if (++digits > 9) fail("header number too large");
    }
    if (digits == 0) fail("malformed header");
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) return fail("not a binary P5/P6 file");
  pos = 2;
  Image img;
  img.channels = bytes[1] == '5' ? 1 : 3;
  img.width = number();
  img.height = number();
  const std::size_t maxval = number();
  if (img.width == 0 || img.height == 0) return fail("zero image size");
  if (maxval == 0 || maxval > 255) return fail("only 8-bit maps are supported");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) return fail("malformed header");
  ++pos;
  const std::size_t n = img.width * img.height * img.channels;
  if (bytes.size() - pos < n) return fail("truncated pixel data");
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
  if (maxval != 255)
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(std::min<std::size_t>(255, (p * 255 + maxval / 2) / maxval));
  return img;
}

inline void write_image(const std::filesystem::path& path, const Image& img) {
  const auto bytes = encode_pnm(img);
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

inline Image read_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  return decode_pnm(std::string(std::istreambuf_iterator<char>(in), {}), path.string());
}

/// Luma in [0, 1] per pixel.
inline std::vector<float> gray_values(const Image& img) {
  std::vector<float> v(img.width * img.height);
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (img.channels == 1) {
      v[i] = static_cast<float>(img.pixels[i] / 255.0);
    } else {
      const auto* p = &img.pixels[i * img.channels];
      v[i] = static_cast<float>((0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]) / 255.0);
    }
  }
  return v;
}

}  // namespace forenvit
