#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "forenvit/data/image.hpp"
#include "forenvit/numerics/rng.hpp"
#include "forenvit/numerics/tensor.hpp"

namespace forenvit {

inline const std::vector<std::string>& split_names() {
  static const std::vector<std::string> names{"train", "val", "test", "val_unseen", "test_unseen"};
  return names;
}

inline bool is_split_name(const std::string& s) {
  const auto& n = split_names();
  return std::find(n.begin(), n.end(), s) != n.end();
}

inline constexpr const char* kManifestHeader = "#forenvit-manifest v1";

struct ManifestRecord {
  std::string path;  // as written; relative paths resolve against the manifest's directory
  int label = 0;
  std::string split;
  std::string method;
  std::string source;
};

struct Manifest {
  std::filesystem::path base_dir;
  std::vector<ManifestRecord> records;

  std::filesystem::path resolve(const ManifestRecord& r) const {
    const std::filesystem::path p(r.path);
    return p.is_absolute() ? p : base_dir / p;
  }

  std::vector<std::size_t> indices(const std::string& split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < records.size(); ++i)
      if (records[i].split == split) out.push_back(i);
    return out;
  }
};

inline std::string encode_manifest(const Manifest& m) {
  std::string out = std::string(kManifestHeader) + "\n";
  for (const auto& r : m.records)
    out += r.path + "\t" + std::to_string(r.label) + "\t" + r.split + "\t" + r.method + "\t" + r.source + "\n";
  return out;
}

inline void save_manifest(const std::filesystem::path& path, const Manifest& m) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << encode_manifest(m);
  if (!out) throw IoError("failed writing manifest " + path.string());
}

/// Parses manifest text. `check_paths` verifies every image exists.
inline Manifest parse_manifest(const std::string& text, const std::filesystem::path& base_dir, const std::string& name,
                               bool check_paths = true) {
  Manifest m;
  m.base_dir = base_dir;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& msg) { throw DataError(name + ":" + std::to_string(line_no) + ": " + msg); };
  std::map<std::string, std::string> seen;  // path -> split
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1) {
      if (line != kManifestHeader) fail("missing header \"" + std::string(kManifestHeader) + "\"");
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    for (std::size_t tab; (tab = line.find('\t', start)) != std::string::npos; start = tab + 1)
      f.push_back(line.substr(start, tab - start));
    f.push_back(line.substr(start));
    if (f.size() != 5) fail("expected 5 tab-separated fields, got " + std::to_string(f.size()));
    ManifestRecord r{f[0], 0, f[2], f[3], f[4]};
    if (r.path.empty()) fail("empty path");
    if (f[1] == "0" || f[1] == "1") {
      r.label = f[1][0] - '0';
    } else {
      fail("label must be 0 or 1, got \"" + f[1] + "\"");
    }
    if (!is_split_name(r.split)) fail("unknown split \"" + r.split + "\"");
    if (auto it = seen.find(r.path); it != seen.end())
      fail("path " + r.path + " already listed" + (it->second == r.split ? "" : " in split " + it->second));
    seen[r.path] = r.split;
    if (check_paths && !std::filesystem::exists(m.resolve(r))) fail("image not found: " + m.resolve(r).string());
    m.records.push_back(std::move(r));
  }
  if (line_no == 0) throw DataError(name + ": empty manifest");
  return m;
}

inline Manifest load_manifest(const std::filesystem::path& path, bool check_paths = true) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest " + path.string());
  const std::string text(std::istreambuf_iterator<char>(in), {});
  return parse_manifest(text, path.parent_path(), path.string(), check_paths);
}

/// In-memory images of one split, ready for batching.
struct Dataset {
  std::string split;
  std::size_t channels = 1;
  std::size_t size = 0;  // square side
  std::vector<float> pixels;  // n x C x size x size, values in [0, 1]
  std::vector<int> labels;
  std::vector<std::string> methods;
  std::vector<std::string> paths;

  std::size_t count() const { return labels.size(); }
  std::size_t pixels_per_image() const { return channels * size * size; }
  std::span<const float> image(std::size_t i) const {
    return {pixels.data() + i * pixels_per_image(), pixels_per_image()};
  }
};

/// Loads one split. Color images become channel-major planes when
/// `channels` is 3, luma otherwise.
inline Dataset load_split(const Manifest& m, const std::string& split, std::size_t channels = 1) {
  if (!is_split_name(split)) throw ConfigError("unknown split \"" + split + "\"");
  Dataset d;
  d.split = split;
  d.channels = channels;
  for (auto i : m.indices(split)) {
    const auto& r = m.records[i];
    const auto img = read_image(m.resolve(r));
    if (img.width != img.height) throw DataError(r.path + ": images must be square");
    if (d.size == 0) d.size = img.width;
    if (img.width != d.size) throw DataError(r.path + ": image size differs from the rest of split " + split);
    if (channels == 1) {
      const auto g = gray_values(img);
      d.pixels.insert(d.pixels.end(), g.begin(), g.end());
    } else {
      if (img.channels != 3) throw DataError(r.path + ": expected a color image");
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t p = 0; p < img.width * img.height; ++p) d.pixels.push_back(static_cast<float>(img.pixels[p * 3 + c] / 255.0));
    }
    d.labels.push_back(r.label);
    d.methods.push_back(r.method);
    d.paths.push_back(r.path);
  }
  if (d.labels.empty()) throw DataError("split " + split + " is empty");
  return d;
}

struct Batch {
  Tensor<float> images;  // [B, C, S, S]
  std::vector<int> labels;
  std::vector<std::size_t> indices;  // rows of the dataset
};

inline Batch make_batch(const Dataset& d, std::span<const std::size_t> idx) {
  Batch b;
  std::vector<float> v;
  v.reserve(idx.size() * d.pixels_per_image());
  for (auto i : idx) {
    const auto img = d.image(i);
    v.insert(v.end(), img.begin(), img.end());
    b.labels.push_back(d.labels[i]);
    b.indices.push_back(i);
  }
  b.images = Tensor<float>({idx.size(), d.channels, d.size, d.size}, std::move(v));
  return b;
}

/// Index batches over a shuffled (seeded) order; the last partial batch is kept.
inline std::vector<std::vector<std::size_t>> batch_order(std::size_t n, std::size_t batch_size, Rng* rng) {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  if (rng) rng->shuffle(order);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < n; s += batch_size)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, s + batch_size)));
  return out;
}

inline std::vector<Batch> iterate(const Dataset& d, std::size_t batch_size, Rng* rng) {
  std::vector<Batch> out;
  for (const auto& idx : batch_order(d.count(), batch_size, rng)) out.push_back(make_batch(d, idx));
  return out;
}

}  // namespace forenvit
