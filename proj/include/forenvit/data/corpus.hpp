#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "forenvit/data/manifest.hpp"

namespace forenvit {

struct SplitCounts {
  std::size_t reals = 0;
  std::size_t fakes = 0;
};

struct CorpusSpec {
  std::map<std::string, SplitCounts> counts{{"train", {1000, 1000}},
                                            {"val", {200, 200}},
                                            {"test", {200, 200}},
                                            {"val_unseen", {100, 100}},
                                            {"test_unseen", {100, 100}}};
  std::vector<std::string> seen_families{"eye_swap", "mouth_grid"};
  std::vector<std::string> unseen_families{"smooth_patch", "noise_fill"};
  std::size_t image_size = 28;
  std::uint64_t seed = 0;

  static bool is_unseen_split(const std::string& s) { return s == "val_unseen" || s == "test_unseen"; }

  void validate() const {
    if (image_size < 16) throw ConfigError("corpus image_size must be at least 16");
    for (const auto& [split, c] : counts) {
      if (!is_split_name(split)) throw ConfigError("corpus: unknown split \"" + split + "\"");
      if (c.reals == 0 || c.fakes == 0) throw ConfigError("corpus: split " + split + " needs non-zero real and fake counts");
    }
    for (const auto& f : seen_families)
      if (!is_fake_family(f)) throw ConfigError("corpus: unknown fake family \"" + f + "\"");
    for (const auto& f : unseen_families)
      if (!is_fake_family(f)) throw ConfigError("corpus: unknown fake family \"" + f + "\"");
    for (const auto& f : seen_families)
      if (std::find(unseen_families.begin(), unseen_families.end(), f) != unseen_families.end())
        throw ConfigError("corpus: family " + f + " is both seen and unseen");
    if (seen_families.empty() || unseen_families.empty()) throw ConfigError("corpus: fake family lists must be non-empty");
  }

  static bool is_fake_family(const std::string& f) {
    return f == "eye_swap" || f == "mouth_grid" || f == "smooth_patch" || f == "noise_fill";
  }
};

/// Facial landmark positions of one render, in pixels.
struct FaceLayout {
  double cx, cy, rx, ry;
  std::array<double, 2> left_eye, right_eye, mouth, nose;
};

namespace detail {

inline double smoothstep(double e0, double e1, double x) {
  const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
  return t * t * (3 - 2 * t);
}

}  // namespace detail

/// Procedural face-like grayscale render in [0, 1].
struct FaceRender {
  std::size_t size = 0;
  std::vector<double> values;
  FaceLayout layout{};
};

inline FaceRender render_face(std::size_t size, Rng rng) {
  const double s = static_cast<double>(size) / 28.0;
  FaceRender f;
  f.size = size;
  f.values.assign(size * size, 0.0);
  auto& L = f.layout;
  L.cx = size / 2.0 + rng.uniform(-1.5, 1.5) * s;
  L.cy = size / 2.0 + rng.uniform(-1.5, 1.5) * s;
  L.rx = rng.uniform(7.5, 9.5) * s;
  L.ry = rng.uniform(10.0, 12.0) * s;
  const double eye_dx = rng.uniform(3.0, 4.0) * s, eye_dy = rng.uniform(-3.8, -2.4) * s;
  L.left_eye = {L.cx - eye_dx, L.cy + eye_dy};
  L.right_eye = {L.cx + eye_dx, L.cy + eye_dy};
  L.mouth = {L.cx + rng.uniform(-0.5, 0.5) * s, L.cy + rng.uniform(4.3, 5.7) * s};
  L.nose = {L.cx, L.cy + rng.uniform(0.3, 1.3) * s};
  const double bg = rng.uniform(0.1, 0.3), skin = rng.uniform(0.55, 0.75);
  const double eye_depth = rng.uniform(0.35, 0.5), eye_sigma = rng.uniform(0.9, 1.3) * s;
  const double mouth_w = rng.uniform(2.3, 3.7) * s, mouth_h = rng.uniform(0.6, 1.0) * s, mouth_depth = rng.uniform(0.25, 0.35);
  // Background texture: a few random low-frequency waves.
  std::array<std::array<double, 4>, 3> waves{};
  for (auto& w : waves) w = {rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(0, 6.283), rng.uniform(0.02, 0.06)};
  const double light = rng.uniform(-0.01, 0.01);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      double v = bg;
      for (const auto& w : waves) v += w[3] * std::sin(w[0] * px / s + w[1] * py / s + w[2]);
      const double r = std::hypot((px - L.cx) / L.rx, (py - L.cy) / L.ry);
      const double inside = 1.0 - detail::smoothstep(0.92, 1.05, r);
      v = v * (1 - inside) + (skin + light * (py - L.cy)) * inside;
      for (const auto& e : {L.left_eye, L.right_eye})
        v -= eye_depth * std::exp(-((px - e[0]) * (px - e[0]) + (py - e[1]) * (py - e[1])) / (2 * eye_sigma * eye_sigma));
      const double mx = std::fabs(px - L.mouth[0]) / mouth_w, my = std::fabs(py - L.mouth[1]) / mouth_h;
      v -= mouth_depth * (1 - detail::smoothstep(0.8, 1.1, mx)) * (1 - detail::smoothstep(0.6, 1.2, my));
      v += rng.normal(0.0, 0.015);
      f.values[y * size + x] = std::clamp(v, 0.0, 1.0);
    }
  return f;
}

inline Image to_gray_image(std::size_t size, const std::vector<double>& values) {
  Image img(size, size, 1);
  for (std::size_t i = 0; i < values.size(); ++i) img.pixels[i] = to_byte(values[i]);
  return img;
}

struct FakeSample {
  Image pristine;
  Image fake;
  Image mask;  // 255 where fake differs from pristine
  std::string method;
};

namespace detail {

struct Box {
  long x0, y0, x1, y1;  // half-open
};

inline Box box_around(const std::array<double, 2>& c, double half, std::size_t size) {
  auto clampi = [&](double v) { return std::clamp<long>(std::lround(v), 0, static_cast<long>(size)); };
  return {clampi(c[0] - half), clampi(c[1] - half), clampi(c[0] + half), clampi(c[1] + half)};
}

}  // namespace detail

/// Applies one manipulation family to a pristine render (values already
/// quantized to 8-bit levels).
inline std::vector<double> manipulate(const std::string& family, const FaceRender& face, const std::vector<double>& base,
                                      Rng rng) {
  const std::size_t n = face.size;
  const double s = static_cast<double>(n) / 28.0;
  const auto& L = face.layout;
  std::vector<double> v = base;
  if (family == "eye_swap") {
    // Paste the eye region of a different identity at half resolution, with a
    // tone mismatch, its own noise level, and a blending seam along the border.
    const auto donor = render_face(n, rng.derive("donor"));
    const auto& eye = rng.bernoulli(0.5) ? L.left_eye : L.right_eye;
    const auto b = detail::box_around(eye, rng.uniform(3.0, 4.0) * s, n);
    const double shift = rng.uniform(0.2, 0.3);
    const double dx = rng.uniform(-1.5, 1.5) * s, dy = rng.uniform(-1.5, 1.5) * s;
    const double sigma = rng.uniform(0.05, 0.08);  // donor sensor noise
    for (long y = b.y0; y < b.y1; ++y)
      for (long x = b.x0; x < b.x1; ++x) {
        const long qx = b.x0 + ((x - b.x0) / 2) * 2, qy = b.y0 + ((y - b.y0) / 2) * 2;
        const long sx = std::clamp<long>(std::lround(qx + dx), 0, static_cast<long>(n) - 1);
        const long sy = std::clamp<long>(std::lround(qy + dy), 0, static_cast<long>(n) - 1);
        const bool seam = x == b.x0 || y == b.y0 || x == b.x1 - 1 || y == b.y1 - 1;
        const double grain = rng.normal(0.0, sigma);
        v[y * n + x] = std::clamp(donor.values[sy * n + sx] + (seam ? 2 : 1) * shift + grain, 0.0, 1.0);
      }
  } else if (family == "mouth_grid") {
    // Periodic checker pattern over the mouth.
    const double amp = rng.uniform(0.25, 0.35);
    const long period = rng.bernoulli(0.5) ? 2 : 3;
    const auto b = detail::box_around(L.mouth, rng.uniform(3.5, 4.5) * s, n);
    for (long y = b.y0; y < b.y1; ++y)
      for (long x = b.x0; x < b.x1; ++x) {
        const bool on = ((x / period) + (y / period)) % 2 == 0;
        v[y * n + x] = std::clamp(v[y * n + x] + (on ? amp : -amp), 0.0, 1.0);
      }
  } else if (family == "smooth_patch") {
    // Repeated box blur on a square at a random landmark.
    const std::array<std::array<double, 2>, 4> marks{L.left_eye, L.right_eye, L.mouth, L.nose};
    const auto b = detail::box_around(marks[rng.below(4)], rng.uniform(3.0, 4.0) * s, n);
    for (int pass = 0; pass < 3; ++pass) {
      const auto src = v;
      for (long y = b.y0; y < b.y1; ++y)
        for (long x = b.x0; x < b.x1; ++x) {
          double acc = 0;
          int cnt = 0;
          for (long yy = std::max(0L, y - 1); yy <= std::min<long>(n - 1, y + 1); ++yy)
            for (long xx = std::max(0L, x - 1); xx <= std::min<long>(n - 1, x + 1); ++xx) acc += src[yy * n + xx], ++cnt;
          v[y * n + x] = acc / cnt;
        }
    }
  } else if (family == "noise_fill") {
    const std::array<std::array<double, 2>, 4> marks{L.left_eye, L.right_eye, L.mouth, L.nose};
    const auto b = detail::box_around(marks[rng.below(4)], rng.uniform(2.5, 3.5) * s, n);
    double mean = 0;
    long cnt = 0;
    for (long y = b.y0; y < b.y1; ++y)
      for (long x = b.x0; x < b.x1; ++x) mean += v[y * n + x], ++cnt;
    mean /= std::max(1L, cnt);
    for (long y = b.y0; y < b.y1; ++y)
      for (long x = b.x0; x < b.x1; ++x) v[y * n + x] = std::clamp(mean + rng.uniform(-0.2, 0.2), 0.0, 1.0);
  } else {
    throw ConfigError("unknown fake family \"" + family + "\"");
  }
  return v;
}

inline FakeSample make_fake(std::size_t size, const std::string& family, Rng rng) {
  const auto face = render_face(size, rng.derive("face"));
  FakeSample f;
  f.method = family;
  f.pristine = to_gray_image(size, face.values);
  std::vector<double> base(size * size);
  for (std::size_t i = 0; i < base.size(); ++i) base[i] = f.pristine.pixels[i] / 255.0;
  f.fake = to_gray_image(size, manipulate(family, face, base, rng.derive("edit")));
  f.mask = Image(size, size, 1);
  for (std::size_t i = 0; i < base.size(); ++i) f.mask.pixels[i] = f.fake.pixels[i] != f.pristine.pixels[i] ? 255 : 0;
  return f;
}

/// Seed stream of one sample; splits and classes never share base faces.
inline Rng sample_rng(const CorpusSpec& spec, const std::string& split, int label, std::size_t index) {
  return Rng(spec.seed).derive("data").derive(split).derive(label ? "fake" : "real").derive(static_cast<std::uint64_t>(index));
}

inline std::string sample_name(const std::string& split, int label, std::size_t index) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s/%s/%05zu.pgm", split.c_str(), label ? "fake" : "real", index);
  return buf;
}

inline std::string mask_path_for(const std::string& image_path) {
  const auto dot = image_path.rfind('.');
  return (dot == std::string::npos ? image_path : image_path.substr(0, dot)) + ".mask.pgm";
}

/// Family used for fake `index` of `split`.
inline const std::string& fake_family(const CorpusSpec& spec, const std::string& split, std::size_t index) {
  const auto& fams = CorpusSpec::is_unseen_split(split) ? spec.unseen_families : spec.seen_families;
  return fams[index % fams.size()];
}

/// Renders every image of the corpus into `root` and writes root/manifest.tsv.
inline Manifest generate_corpus(const CorpusSpec& spec, const std::filesystem::path& root) {
  spec.validate();
  std::error_code ec;
  std::filesystem::create_directories(root, ec);
  if (ec || !std::filesystem::is_directory(root)) throw IoError("cannot create corpus directory " + root.string());
  Manifest m;
  m.base_dir = root;
  for (const auto& split : split_names()) {
    auto it = spec.counts.find(split);
    if (it == spec.counts.end()) continue;
    for (std::size_t i = 0; i < it->second.reals; ++i) {
      const auto rel = sample_name(split, 0, i);
      write_image(root / rel, to_gray_image(spec.image_size, render_face(spec.image_size, sample_rng(spec, split, 0, i)).values));
      m.records.push_back({rel, 0, split, "pristine", "synthetic"});
    }
    for (std::size_t i = 0; i < it->second.fakes; ++i) {
      const auto rel = sample_name(split, 1, i);
      const auto f = make_fake(spec.image_size, fake_family(spec, split, i), sample_rng(spec, split, 1, i));
      write_image(root / rel, f.fake);
      write_image(root / mask_path_for(rel), f.mask);
      m.records.push_back({rel, 1, split, f.method, "synthetic"});
    }
  }
  save_manifest(root / "manifest.tsv", m);
  return m;
}

// ---- labelled shapes for supervised pretraining --------------------------

/// `count` images of `classes` (2..4) shape categories: disc, square, ring,
/// cross, at random positions and intensities over a textured background.
/// With `intensity_coded` each class also gets its own foreground brightness.
inline std::pair<std::vector<float>, std::vector<int>> generate_shapes(std::size_t count, std::size_t classes,
                                                                       std::size_t size, Rng rng,
                                                                       bool intensity_coded = false) {
  if (classes < 2 || classes > 4) throw DataError("shape data needs 2 to 4 classes");
  std::vector<float> px;
  std::vector<int> labels;
  px.reserve(count * size * size);
  const double s = size / 28.0;
  for (std::size_t i = 0; i < count; ++i) {
    auto r = rng.derive(static_cast<std::uint64_t>(i));
    const int c = static_cast<int>(i % classes);
    const double cx = size / 2.0 + r.uniform(-4, 4) * s, cy = size / 2.0 + r.uniform(-4, 4) * s;
    const double rad = r.uniform(5, 8) * s, bg = r.uniform(0.05, 0.3);
    const double fg = intensity_coded ? 0.45 + 0.5 * c / static_cast<double>(classes - 1) + r.uniform(-0.03, 0.03)
                                      : r.uniform(0.6, 0.9);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy, d = std::hypot(dx, dy);
        bool on = false;
        switch (c) {
          case 0: on = d < rad; break;
          case 1: on = std::fabs(dx) < rad * 0.85 && std::fabs(dy) < rad * 0.85; break;
          case 2: on = d < rad && d > rad * 0.55; break;
          default: on = (std::fabs(dx) < rad * 0.3 && std::fabs(dy) < rad) || (std::fabs(dy) < rad * 0.3 && std::fabs(dx) < rad);
        }
        px.push_back(static_cast<float>(std::clamp((on ? fg : bg) + r.normal(0, 0.03), 0.0, 1.0)));
      }
    labels.push_back(c);
  }
  return {std::move(px), std::move(labels)};
}

}  // namespace forenvit
