#pragma once

// Checkpoint file layout (all integers little-endian u32):
//   "FVT1" | version | metadata length | metadata (UTF-8 JSON)
//   then, per parameter in lexicographic name order:
//   name length | name | rank | dims... | float32 values

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "forenvit/heads/detector.hpp"
#include "json.hpp"

namespace forenvit {

inline constexpr char kCheckpointMagic[4] = {'F', 'V', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct StoredParameter {
  Shape shape;
  std::vector<float> values;
};

struct CheckpointFile {
  nlohmann::json metadata;
  std::map<std::string, StoredParameter> parameters;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class ByteReader {
 public:
  explicit ByteReader(std::string bytes) : bytes_(std::move(bytes)) {}
  bool done() const { return pos_ == bytes_.size(); }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw TruncatedError(std::string("checkpoint truncated while reading ") + what);
  }
  std::string bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const NamedParameters<float>& params, const nlohmann::json& metadata) {
  std::string out(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  const std::string meta = metadata.dump();
  detail::put_u32(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  for (const auto& [name, t] : params) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : t.data()) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      detail::put_u32(out, bits);
    }
  }
  return out;
}

inline CheckpointFile decode_checkpoint(std::string bytes) {
  detail::ByteReader in(std::move(bytes));
  const auto magic = in.take(4, "magic");
  if (std::memcmp(magic.data(), kCheckpointMagic, 4) != 0) throw MagicMismatchError("not a checkpoint: bad magic bytes");
  const auto version = in.u32("version");
  if (version != kCheckpointVersion)
    throw VersionMismatchError("checkpoint format version " + std::to_string(version) + " is not supported");
  CheckpointFile f;
  const auto meta_len = in.u32("metadata length");
  const auto meta = in.take(meta_len, "metadata");
  try {
    f.metadata = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }
  while (!in.done()) {
    const auto name_len = in.u32("parameter name length");
    const auto name = in.take(name_len, "parameter name");
    StoredParameter p;
    const auto rank = in.u32("parameter rank");
    if (rank > 8) throw CheckpointError("parameter " + name + " has implausible rank " + std::to_string(rank));
    for (std::uint32_t i = 0; i < rank; ++i) p.shape.push_back(in.u32("parameter dims"));
    const auto n = shape_numel(p.shape);
    p.values.resize(n);
    const auto raw = in.take(n * 4, "parameter values");
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(raw[i * 4 + b])) << (8 * b);
      std::memcpy(&p.values[i], &bits, 4);
    }
    if (!f.parameters.emplace(name, std::move(p)).second) throw CheckpointError("duplicate parameter " + name);
  }
  return f;
}

inline void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void save_checkpoint(const std::filesystem::path& path, const NamedParameters<float>& params,
                            const nlohmann::json& metadata) {
  write_file_bytes(path, encode_checkpoint(params, metadata));
}

inline CheckpointFile load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file_bytes(path)); }

/// Copies stored values into `dst`. Every destination parameter must be
/// present with a matching shape; stored names under `ignore_prefixes` may be
/// absent from `dst`, any other unknown name is an error.
inline void assign_parameters(NamedParameters<float>& dst, const CheckpointFile& file,
                              const std::vector<std::string>& ignore_prefixes = {}) {
  for (const auto& [name, stored] : file.parameters) {
    auto it = dst.find(name);
    if (it == dst.end()) {
      bool ignored = false;
      for (const auto& pre : ignore_prefixes) ignored |= name.rfind(pre, 0) == 0;
      if (ignored) continue;
      throw UnknownParameterError("checkpoint parameter " + name + " does not exist in the model");
    }
    if (it->second.shape() != stored.shape)
      throw ParameterShapeError("parameter " + name + ": checkpoint shape " + shape_str(stored.shape) +
                                " vs model shape " + shape_str(it->second.shape()));
  }
  for (auto& [name, t] : dst) {
    auto it = file.parameters.find(name);
    if (it == file.parameters.end()) throw CheckpointError("checkpoint is missing parameter " + name);
    auto w = t.mutable_data();
    std::copy(it->second.values.begin(), it->second.values.end(), w.begin());
  }
}

// ---- metadata -------------------------------------------------------------

inline nlohmann::json to_json(const ViTConfig& c) {
  return {{"image_size", c.image_size}, {"patch_size", c.patch_size}, {"channels", c.channels},
          {"depth", c.depth},           {"width", c.width},           {"heads", c.heads},
          {"registers", c.registers},   {"mlp_ratio", c.mlp_ratio},   {"dropout_rate", c.dropout_rate}};
}

inline ViTConfig vit_config_from_json(const nlohmann::json& j) {
  try {
    ViTConfig c;
    c.image_size = j.at("image_size");
    c.patch_size = j.at("patch_size");
    c.channels = j.at("channels");
    c.depth = j.at("depth");
    c.width = j.at("width");
    c.heads = j.at("heads");
    c.registers = j.at("registers");
    c.mlp_ratio = j.at("mlp_ratio");
    c.dropout_rate = j.at("dropout_rate");
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint ViT config malformed: ") + e.what());
  }
}

inline nlohmann::json to_json(const HeadConfig& h) {
  return {{"approach", static_cast<int>(h.approach)},
          {"fusion",
           {{"k", h.fusion.k},
            {"mode", to_string(h.fusion.mode)},
            {"scope", to_string(h.fusion.scope)},
            {"include_registers", h.fusion.include_registers},
            {"dim_budget", h.fusion.dim_budget}}},
          {"adaptor", to_string(h.adaptor)},
          {"adaptor_dim", h.adaptor_dim},
          {"adaptor_dropout", h.adaptor_dropout},
          {"plan", {{"k", h.plan.k}, {"tune_tokens", h.plan.tune_tokens}}},
          {"head", to_string(h.head)},
          {"head_hidden", h.head_hidden}};
}

inline HeadConfig head_config_from_json(const nlohmann::json& j) {
  try {
    HeadConfig h;
    const int a = j.at("approach");
    if (a != 1 && a != 2) throw CheckpointError("unknown approach " + std::to_string(a));
    h.approach = static_cast<Approach>(a);
    const auto& f = j.at("fusion");
    h.fusion.k = f.at("k");
    h.fusion.mode = parse_fusion_mode(f.at("mode"));
    h.fusion.scope = parse_token_scope(f.at("scope"));
    h.fusion.include_registers = f.at("include_registers");
    h.fusion.dim_budget = f.at("dim_budget");
    h.adaptor = parse_adaptor_kind(j.at("adaptor"));
    h.adaptor_dim = j.at("adaptor_dim");
    h.adaptor_dropout = j.at("adaptor_dropout");
    h.plan.k = j.at("plan").at("k");
    h.plan.tune_tokens = j.at("plan").at("tune_tokens");
    h.head = parse_head_kind(j.at("head"));
    h.head_hidden = j.at("head_hidden");
    return h;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint head config malformed: ") + e.what());
  }
}

inline nlohmann::json to_json(const ThresholdPolicy& p) {
  nlohmann::json j{{"kind", p.kind == ThresholdKind::fixed_half ? "fixed_half" : "validation_eer"}};
  if (p.tau) j["tau"] = *p.tau;
  if (!p.split.empty()) j["split"] = p.split;
  return j;
}

inline ThresholdPolicy threshold_policy_from_json(const nlohmann::json& j) {
  ThresholdPolicy p;
  p.kind = j.value("kind", "fixed_half") == "validation_eer" ? ThresholdKind::validation_eer : ThresholdKind::fixed_half;
  if (j.contains("tau")) p.tau = j.at("tau").get<double>();
  else if (p.kind == ThresholdKind::fixed_half) p.tau = 0.5;
  p.split = j.value("split", "");
  return p;
}

inline void save_backbone(const std::filesystem::path& path, const Backbone<float>& bb,
                          const nlohmann::json& provenance = nlohmann::json::object()) {
  nlohmann::json meta{{"kind", "backbone"}, {"vit", to_json(bb.config())}, {"provenance", provenance}};
  save_checkpoint(path, bb.parameters(), meta);
}

inline void save_detector(const std::filesystem::path& path, const Detector<float>& det,
                          const nlohmann::json& provenance = nlohmann::json::object()) {
  nlohmann::json meta{{"kind", "detector"},
                      {"vit", to_json(det.backbone.config())},
                      {"head", to_json(det.config)},
                      {"threshold", to_json(det.policy)},
                      {"provenance", provenance}};
  save_checkpoint(path, det.parameters(), meta);
}

/// Loads the backbone part of any checkpoint into `into` (shapes must agree).
inline void load_backbone_into(Backbone<float>& into, const CheckpointFile& file) {
  auto params = into.parameters();
  assign_parameters(params, file, {"head/", "probe/"});
}

inline Backbone<float> backbone_from_checkpoint(const CheckpointFile& file) {
  if (!file.metadata.contains("vit")) throw CheckpointError("checkpoint metadata has no ViT config");
  Backbone<float> bb(vit_config_from_json(file.metadata.at("vit")), Rng(0));
  load_backbone_into(bb, file);
  return bb;
}

inline Detector<float> detector_from_checkpoint(const CheckpointFile& file) {
  if (file.metadata.value("kind", "") != "detector" || !file.metadata.contains("head"))
    throw CheckpointError("checkpoint does not contain a detector head");
  Detector<float> det(Backbone<float>(vit_config_from_json(file.metadata.at("vit")), Rng(0)),
                      head_config_from_json(file.metadata.at("head")), Rng(0));
  auto params = det.parameters();
  assign_parameters(params, file, {"probe/"});
  if (file.metadata.contains("threshold")) det.policy = threshold_policy_from_json(file.metadata.at("threshold"));
  det.apply_training_mask();
  return det;
}

}  // namespace forenvit
