#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "forenvit/error.hpp"

namespace forenvit::cli {

/// Every configurable key as "section.key", with its default.
inline const std::vector<std::pair<std::string, std::string>>& config_defaults() {
  static const std::vector<std::pair<std::string, std::string>> d{
      {"run.seed", "0"},
      {"run.out", "forenvit-out"},

      {"corpus.manifest", ""},
      {"corpus.image_size", "28"},
      {"corpus.channels", "1"},
      {"corpus.train_reals", "1000"},
      {"corpus.train_fakes", "1000"},
      {"corpus.val_reals", "200"},
      {"corpus.val_fakes", "200"},
      {"corpus.test_reals", "200"},
      {"corpus.test_fakes", "200"},
      {"corpus.val_unseen_reals", "100"},
      {"corpus.val_unseen_fakes", "100"},
      {"corpus.test_unseen_reals", "100"},
      {"corpus.test_unseen_fakes", "100"},
      {"corpus.seen_families", "eye_swap,mouth_grid"},
      {"corpus.unseen_families", "smooth_patch,noise_fill"},

      {"vit.patch_size", "7"},
      {"vit.depth", "8"},
      {"vit.width", "64"},
      {"vit.heads", "4"},
      {"vit.registers", "4"},
      {"vit.mlp_ratio", "4"},
      {"vit.dropout", "0"},

      {"model.backbone", ""},
      {"model.checkpoint", ""},
      {"model.reference", ""},

      {"pretrain.recipe", "masked"},
      {"pretrain.split", "train"},
      {"pretrain.mask_ratio", "0.75"},
      {"pretrain.decoder_depth", "2"},
      {"pretrain.normalize_targets", "true"},
      {"pretrain.epochs", "3"},
      {"pretrain.batch_size", "16"},
      {"pretrain.max_steps", "0"},
      {"pretrain.learning_rate", "1e-3"},
      {"pretrain.weight_decay", "0.05"},
      {"pretrain.shape_classes", "4"},
      {"pretrain.shape_count", "2000"},

      {"train.approach", "2"},
      {"train.k", "2"},
      {"train.tune_tokens", "true"},
      {"train.fusion", "concat"},
      {"train.scope", "all_tokens"},
      {"train.include_registers", "false"},
      {"train.adaptor", "linear"},
      {"train.adaptor_dim", "0"},
      {"train.dropout", "0"},
      {"train.head", "linear"},
      {"train.head_hidden", "0"},
      {"train.epochs", "3"},
      {"train.batch_size", "8"},
      {"train.eval_every", "0"},
      {"train.learning_rate", "1e-3"},
      {"train.weight_decay", "0.01"},
      {"train.val_split", "val"},

      {"eval.split", "test"},
      {"eval.threshold", ""},
      {"eval.calibrate_on", ""},

      {"probe.kind", "linear"},
      {"probe.split", "test"},
      {"probe.k_neighbors", "5"},
      {"probe.pca_components", "0"},
      {"probe.epochs", "200"},
      {"probe.batch_size", "64"},
      {"probe.hidden", "0"},
      {"probe.learning_rate", "1e-2"},
      {"probe.weight_decay", "1e-4"},

      {"ablate.k_list", "1,2,4,8"},
      {"ablate.test_split", "test"},

      {"visualize.alpha", "0.5"},
      {"visualize.reading", "cls_query_row"},
      {"visualize.normalization", "raw"},
      {"visualize.images", ""},
  };
  return d;
}

class RunConfig {
 public:
  RunConfig() {
    for (const auto& [k, v] : config_defaults()) values_[k] = v;
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  void set(const std::string& key, const std::string& value) {
    if (!has(key)) throw ConfigError("unknown configuration key \"" + key + "\"");
    values_[key] = value;
  }

  /// Applies `key = value` lines grouped in [sections].
  void merge_ini(const std::string& text, const std::string& name) {
    boost::property_tree::ptree tree;
    std::istringstream in(text);
    try {
      boost::property_tree::ini_parser::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw ConfigError(name + ":" + std::to_string(e.line()) + ": " + e.message());
    }
    for (const auto& [section, body] : tree) {
      if (body.empty() && !body.data().empty()) throw ConfigError(name + ": key \"" + section + "\" outside a section");
      for (const auto& [key, node] : body) set(section + "." + key, node.get_value<std::string>());
    }
  }

  void merge_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read config file " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    merge_ini(ss.str(), path.string());
  }

  const std::string& str(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown configuration key \"" + key + "\"");
    return it->second;
  }

  std::uint64_t u64(const std::string& key) const {
    const auto& s = str(key);
    std::uint64_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw bad(key, "a non-negative integer");
    return v;
  }

  std::size_t size(const std::string& key) const { return static_cast<std::size_t>(u64(key)); }

  double real(const std::string& key) const {
    const auto& s = str(key);
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used == s.size()) return v;
    } catch (const std::exception&) {
    }
    throw bad(key, "a number");
  }

  std::optional<double> optional_real(const std::string& key) const {
    if (str(key).empty()) return std::nullopt;
    return real(key);
  }

  bool flag(const std::string& key) const {
    const auto& s = str(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw bad(key, "true or false");
  }

  std::vector<std::string> list(const std::string& key) const {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(str(key));
    while (std::getline(in, item, ','))
      if (!item.empty()) out.push_back(item);
    return out;
  }

  std::vector<std::size_t> size_list(const std::string& key) const {
    std::vector<std::size_t> out;
    for (const auto& item : list(key)) {
      std::size_t v = 0;
      const auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
      if (ec != std::errc() || p != item.data() + item.size()) throw bad(key, "a comma-separated list of integers");
      out.push_back(v);
    }
    return out;
  }

  /// Every key, grouped by section, in a form merge_ini reads back.
  std::string to_ini(const std::string& comment = "") const {
    std::ostringstream out;
    if (!comment.empty()) out << "; " << comment << "\n";
    std::string current;
    for (const auto& [key, value] : values_) {
      const auto dot = key.find('.');
      const auto section = key.substr(0, dot);
      if (section != current) {
        out << (current.empty() ? "" : "\n") << "[" << section << "]\n";
        current = section;
      }
      out << key.substr(dot + 1) << " = " << value << "\n";
    }
    return out.str();
  }

 private:
  static ConfigError bad(const std::string& key, const std::string& what) {
    return ConfigError("configuration key \"" + key + "\" must be " + what);
  }

  std::map<std::string, std::string> values_;
};

}  // namespace forenvit::cli
