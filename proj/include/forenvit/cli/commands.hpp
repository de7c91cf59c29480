#pragma once

#include <CLI11.hpp>
#include <algorithm>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "forenvit/backbone/checkpoint.hpp"
#include "forenvit/cli/run_config.hpp"
#include "forenvit/data/corpus.hpp"
#include "forenvit/explain/explain.hpp"
#include "forenvit/trainer/trainer.hpp"

namespace forenvit::cli {

inline int exit_code(ErrorClass c) {
  switch (c) {
    case ErrorClass::config: return 2;
    case ErrorClass::data: return 3;
    case ErrorClass::io: return 4;
    case ErrorClass::numeric: return 5;
    default: return 1;
  }
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f || !(f << text) || !f.flush()) throw IoError("cannot write " + path.string());
}

inline std::filesystem::path output_dir(const RunConfig& cfg) {
  const std::filesystem::path dir = cfg.str("run.out");
  if (dir.empty()) throw ConfigError("run.out must name a directory");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw IoError("cannot create output directory " + dir.string());
  return dir;
}

inline void write_snapshot(const RunConfig& cfg, const std::filesystem::path& dir, const std::string& command) {
  write_text(dir / "resolved_config.ini", cfg.to_ini("forenvit " + command));
}

// ---- config -> module structs ---------------------------------------------

inline CorpusSpec corpus_spec(const RunConfig& c) {
  CorpusSpec s;
  for (const auto& split : split_names()) s.counts[split] = {c.size("corpus." + split + "_reals"), c.size("corpus." + split + "_fakes")};
  s.seen_families = c.list("corpus.seen_families");
  s.unseen_families = c.list("corpus.unseen_families");
  s.image_size = c.size("corpus.image_size");
  s.seed = c.u64("run.seed");
  return s;
}

inline ViTConfig vit_config(const RunConfig& c) {
  ViTConfig v;
  v.image_size = c.size("corpus.image_size");
  v.channels = c.size("corpus.channels");
  v.patch_size = c.size("vit.patch_size");
  v.depth = c.size("vit.depth");
  v.width = c.size("vit.width");
  v.heads = c.size("vit.heads");
  v.registers = c.size("vit.registers");
  v.mlp_ratio = c.real("vit.mlp_ratio");
  v.dropout_rate = c.real("vit.dropout");
  v.validate();
  return v;
}

inline Manifest open_manifest(const RunConfig& c) {
  std::filesystem::path p = c.str("corpus.manifest");
  if (p.empty()) throw ConfigError("no manifest given (corpus.manifest / --manifest)");
  if (std::filesystem::is_directory(p)) p /= "manifest.tsv";
  return load_manifest(p);
}

inline Dataset split_data(const RunConfig& c, const Manifest& m, const std::string& split) {
  return load_split(m, split, c.size("corpus.channels"));
}

inline Rng seeded(const RunConfig& c, std::string_view module) { return Rng(c.u64("run.seed")).derive(module); }

/// Backbone from `key`'s checkpoint, or a fresh seeded one when the key is empty.
inline Backbone<float> backbone_from(const RunConfig& c, const std::string& key) {
  const auto& path = c.str(key);
  if (path.empty() || path == "fresh") return Backbone<float>(vit_config(c), seeded(c, "backbone"));
  return backbone_from_checkpoint(load_checkpoint(path));
}

inline Detector<float> detector_from(const RunConfig& c) {
  const auto& path = c.str("model.checkpoint");
  if (path.empty()) throw ConfigError("no detector checkpoint given (model.checkpoint / --checkpoint)");
  return detector_from_checkpoint(load_checkpoint(path));
}

inline TrainConfig train_config(const RunConfig& c) {
  TrainConfig t;
  const auto approach = c.size("train.approach");
  if (approach != 1 && approach != 2) throw ConfigError("train.approach must be 1 or 2");
  t.head.approach = approach == 1 ? Approach::frozen_fusion : Approach::finetune;
  const auto k = c.size("train.k");
  if (k == 0) throw ConfigError("train.k must be at least 1");
  t.head.fusion.k = k;
  t.head.plan.k = k;
  t.head.plan.tune_tokens = c.flag("train.tune_tokens");
  t.head.fusion.mode = parse_fusion_mode(c.str("train.fusion"));
  t.head.fusion.scope = parse_token_scope(c.str("train.scope"));
  t.head.fusion.include_registers = c.flag("train.include_registers");
  t.head.adaptor = parse_adaptor_kind(c.str("train.adaptor"));
  t.head.adaptor_dim = c.size("train.adaptor_dim");
  t.head.adaptor_dropout = c.real("train.dropout");
  t.head.head = parse_head_kind(c.str("train.head"));
  t.head.head_hidden = c.size("train.head_hidden");
  t.epochs = c.size("train.epochs");
  t.batch_size = c.size("train.batch_size");
  t.eval_every = c.size("train.eval_every");
  t.seed = seeded(c, "train").next_u64();
  t.optimizer.learning_rate = c.real("train.learning_rate");
  t.optimizer.weight_decay = c.real("train.weight_decay");
  return t;
}

inline nlohmann::json provenance(const RunConfig& c, const std::string& command) {
  return {{"command", command}, {"seed", c.u64("run.seed")}};
}

inline ScoreSet label_scores(const std::vector<int>& predicted, const Dataset& d) {
  ScoreSet s;
  for (std::size_t i = 0; i < predicted.size(); ++i) s.push_back({static_cast<double>(predicted[i]), d.labels[i], d.methods[i]});
  return s;
}

inline void write_report(const std::filesystem::path& dir, const std::string& stem, const MetricReport& r) {
  write_text(dir / (stem + ".txt"), to_text(r));
  write_text(dir / (stem + ".json"), to_json(r).dump(2) + "\n");
}

// ---- commands ---------------------------------------------------------------

inline void cmd_generate(const RunConfig& c, std::ostream& out) {
  const auto spec = corpus_spec(c);
  spec.validate();
  const auto dir = output_dir(c);
  const auto m = generate_corpus(spec, dir);
  write_snapshot(c, dir, "generate");
  out << "wrote " << m.records.size() << " images and " << (dir / "manifest.tsv").string() << "\n";
}

inline void cmd_pretrain(const RunConfig& c, std::ostream& out) {
  auto bb = backbone_from(c, "model.backbone");
  const auto recipe = c.str("pretrain.recipe");
  PretrainLog log;
  if (recipe == "masked") {
    MaskedPretrainConfig mc;
    mc.mask_ratio = c.real("pretrain.mask_ratio");
    masked_count(bb.config().num_patches(), mc.mask_ratio);
    mc.epochs = c.size("pretrain.epochs");
    mc.batch_size = c.size("pretrain.batch_size");
    mc.decoder_depth = c.size("pretrain.decoder_depth");
    mc.max_steps = c.size("pretrain.max_steps");
    mc.normalize_targets = c.flag("pretrain.normalize_targets");
    mc.seed = seeded(c, "pretrain").next_u64();
    mc.optimizer = {c.real("pretrain.learning_rate"), c.real("pretrain.weight_decay")};
    const auto images = split_data(c, open_manifest(c), c.str("pretrain.split"));
    log = pretrain_masked(bb, images, mc);
  } else if (recipe == "supervised") {
    SupervisedPretrainConfig sc;
    sc.epochs = c.size("pretrain.epochs");
    sc.batch_size = c.size("pretrain.batch_size");
    sc.seed = seeded(c, "pretrain").next_u64();
    sc.optimizer = {c.real("pretrain.learning_rate"), c.real("pretrain.weight_decay")};
    if (bb.config().channels != 1) throw ConfigError("supervised recipe renders grayscale shapes; set corpus.channels = 1");
    const auto [images, labels] = generate_shapes(c.size("pretrain.shape_count"), c.size("pretrain.shape_classes"),
                                                  bb.config().image_size, seeded(c, "shapes"));
    log = pretrain_supervised(bb, images, labels, sc);
  } else {
    throw ConfigError("unknown pretraining recipe '" + recipe + "' (masked or supervised)");
  }
  const auto dir = output_dir(c);
  auto prov = provenance(c, "pretrain");
  prov["recipe"] = recipe;
  if (recipe == "masked") prov["mask_ratio"] = c.real("pretrain.mask_ratio");
  save_backbone(dir / "backbone.fvt", bb, prov);
  std::string text = "step\tloss\n";
  for (std::size_t i = 0; i < log.losses.size(); ++i) text += std::to_string(i + 1) + "\t" + std::to_string(log.losses[i]) + "\n";
  write_text(dir / "pretrain_log.tsv", text);
  write_snapshot(c, dir, "pretrain");
  out << recipe << " pretraining: " << log.losses.size() << " steps";
  if (!log.losses.empty()) out << ", loss " << log.losses.front() << " -> " << log.losses.back();
  if (!log.accuracies.empty()) out << ", final accuracy " << log.accuracies.back() << "%";
  out << "\n";
}

inline void cmd_train(const RunConfig& c, std::ostream& out) {
  const auto cfg = train_config(c);
  const auto bb = backbone_from(c, "model.backbone");
  cfg.validate(bb.config());
  const auto m = open_manifest(c);
  const auto val_split = c.str("train.val_split");
  const auto tr = split_data(c, m, "train"), va = split_data(c, m, val_split);
  auto result = train(cfg, bb, tr, va, [&](const TrainRecord& r) {
    out << "step " << r.step << "  loss " << r.train_loss << "  val EER " << r.val_eer << "%\n";
  });
  result.detector.policy = calibrate(score_dataset(result.detector, va), val_split);
  const auto dir = output_dir(c);
  save_detector(dir / "detector.fvt", result.detector, provenance(c, "train"));
  write_text(dir / "train_log.tsv", result.log.to_text());
  write_snapshot(c, dir, "train");
  out << "best step " << result.best_step << ", val EER " << result.best_val_eer << "%, tau "
      << result.detector.policy.resolve() << "\n";
}

inline ThresholdPolicy eval_policy(const RunConfig& c, const Detector<float>& det, const Manifest& m) {
  if (const auto t = c.optional_real("eval.threshold")) {
    if (!(*t >= 0 && *t <= 1)) throw ConfigError("eval.threshold must lie in [0, 1]");
    return ThresholdPolicy::fixed(*t);
  }
  const auto& calib = c.str("eval.calibrate_on");
  if (!calib.empty()) return calibrate(score_dataset(det, split_data(c, m, calib)), calib);
  return det.policy;
}

inline void cmd_eval(const RunConfig& c, std::ostream& out) {
  const auto det = detector_from(c);
  const auto m = open_manifest(c);
  const auto split = c.str("eval.split");
  const auto data = split_data(c, m, split);
  const auto policy = eval_policy(c, det, m);
  const auto report = evaluate(score_dataset(det, data), policy);
  const auto dir = output_dir(c);
  write_report(dir, "report_" + split, report);
  write_snapshot(c, dir, "eval");
  out << "split " << split << ", threshold " << policy.resolve()
      << (policy.kind == ThresholdKind::validation_eer ? " (EER on " + policy.split + ")" : std::string()) << "\n"
      << to_text(report);
}

inline void cmd_calibrate(const RunConfig& c, std::ostream& out) {
  auto det = detector_from(c);
  const auto m = open_manifest(c);
  auto split = c.str("eval.calibrate_on");
  if (split.empty()) split = "val";
  det.policy = calibrate(score_dataset(det, split_data(c, m, split)), split);
  const auto dir = output_dir(c);
  save_detector(dir / "detector.fvt", det, provenance(c, "calibrate"));
  write_text(dir / "threshold.json", to_json(det.policy).dump(2) + "\n");
  write_snapshot(c, dir, "calibrate");
  out << "tau " << det.policy.resolve() << " from the EER of split " << split << "\n";
}

inline void cmd_probe(const RunConfig& c, std::ostream& out) {
  auto kinds = c.list("probe.kind");
  if (kinds.size() == 1 && kinds[0] == "all") kinds = {"pca_kmeans", "knn", "linear", "mlp2"};
  if (kinds.empty()) throw ConfigError("probe.kind is empty");
  for (const auto& k : kinds)
    if (k != "pca_kmeans" && k != "knn" && k != "linear" && k != "mlp2") throw ConfigError("unknown probe '" + k + "'");
  const auto bb = backbone_from(c, "model.backbone");
  const auto m = open_manifest(c);
  const auto split = c.str("probe.split");
  // One feature pass shared by every probe.
  const auto train_x = extract_cls_features(bb, split_data(c, m, "train"));
  const auto test_data = split_data(c, m, split);
  const auto test_x = extract_cls_features(bb, test_data);
  const auto dir = output_dir(c);
  const auto meta_base = nlohmann::json{{"kind", "probe"}, {"vit", to_json(bb.config())}, {"provenance", provenance(c, "probe")}};
  for (const auto& kind : kinds) {
    const Rng rng = seeded(c, "probe").derive(kind);
    ScoreSet scores;
    NamedParameters<float> params = bb.parameters();
    if (kind == "knn") {
      const auto kn = c.size("probe.k_neighbors");
      if (kn == 0) throw ConfigError("probe.k_neighbors must be at least 1");
      std::vector<int> pred(test_x.rows);
      for (std::size_t i = 0; i < test_x.rows; ++i) pred[i] = knn_classify(train_x, test_x.row(i), kn);
      scores = label_scores(pred, test_data);
      params.merge(probe_parameters(train_x));
    } else if (kind == "pca_kmeans") {
      const auto p = PcaKMeansProbe::fit(train_x, rng, c.size("probe.pca_components"));
      std::vector<int> pred(test_x.rows);
      for (std::size_t i = 0; i < test_x.rows; ++i) pred[i] = p.predict(test_x.row(i));
      scores = label_scores(pred, test_data);
      params.merge(probe_parameters(p));
    } else {
      ProbeHyper h;
      h.epochs = c.size("probe.epochs");
      h.batch_size = c.size("probe.batch_size");
      h.hidden = c.size("probe.hidden");
      h.optimizer = {c.real("probe.learning_rate"), c.real("probe.weight_decay")};
      const auto p = TrainedProbe::fit(train_x, parse_head_kind(kind), h, rng);
      const auto s = p.scores(test_x);
      for (std::size_t i = 0; i < s.size(); ++i) scores.push_back({s[i], test_data.labels[i], test_data.methods[i]});
      params.merge(probe_parameters(p));
    }
    const auto report = evaluate(scores, ThresholdPolicy::fixed_half());
    write_report(dir, "probe_" + kind, report);
    auto meta = meta_base;
    meta["probe"] = kind;
    save_checkpoint(dir / ("probe_" + kind + ".fvt"), params, meta);
    out << "probe " << kind << ": accuracy " << report.accuracy << "%, EER " << report.eer << "%\n";
  }
  write_snapshot(c, dir, "probe");
}

inline void cmd_ablate(const RunConfig& c, std::ostream& out) {
  const auto templ = train_config(c);
  const auto ks = c.size_list("ablate.k_list");
  const auto bb = backbone_from(c, "model.backbone");
  const auto m = open_manifest(c);
  const auto tr = split_data(c, m, "train"), va = split_data(c, m, c.str("train.val_split")),
             te = split_data(c, m, c.str("ablate.test_split"));
  const auto rows = ablate_k(templ, ks, bb, tr, va, te, [&](const AblationRow& r) {
    out << "k=" << r.k << "  test EER " << r.test_eer << "%\n";
  });
  const auto dir = output_dir(c);
  write_text(dir / "ablation.tsv", ablation_to_text(rows));
  auto j = nlohmann::json::array();
  for (const auto& r : rows) j.push_back({{"k", r.k}, {"test_eer", r.test_eer}, {"val_eer", r.val_eer}});
  write_text(dir / "ablation.json", j.dump(2) + "\n");
  write_snapshot(c, dir, "ablate");
  out << ablation_to_text(rows);
}

inline std::vector<float> planar_pixels(const Image& img, std::size_t channels) {
  if (channels == 1) return gray_values(img);
  if (img.channels != 3) throw DataError("expected a color image");
  std::vector<float> v;
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t p = 0; p < img.width * img.height; ++p) v.push_back(static_cast<float>(img.pixels[p * 3 + ch] / 255.0));
  return v;
}

inline Image attention_overlay(const Backbone<float>& bb, const Image& img, const std::vector<float>& gray,
                               const MapOptions& opt, double alpha) {
  const auto& v = bb.config();
  Tensor<float> x({1, v.channels, v.image_size, v.image_size}, planar_pixels(img, v.channels));
  const auto res = bb.forward(x, 1);
  const auto map = cls_attention_map(*res.final_attention, token_layout(v), 0, opt);
  return overlay(gray, img.width, img.height, upsample(map, img.width, img.height), alpha);
}

inline void cmd_visualize(const RunConfig& c, std::ostream& out) {
  const auto images = c.list("visualize.images");
  if (images.empty()) throw ConfigError("no images to visualize");
  const double alpha = c.real("visualize.alpha");
  if (!(alpha >= 0 && alpha <= 1)) throw ConfigError("visualize.alpha must lie in [0, 1]");
  MapOptions opt;
  const auto& reading = c.str("visualize.reading");
  if (reading == "cls_query_row") opt.reading = MapReading::cls_query_row;
  else if (reading == "cls_key_column") opt.reading = MapReading::cls_key_column;
  else throw ConfigError("unknown attention reading '" + reading + "'");
  const auto& norm = c.str("visualize.normalization");
  if (norm == "raw") opt.normalization = MapNormalization::raw;
  else if (norm == "unit_sum") opt.normalization = MapNormalization::unit_sum;
  else throw ConfigError("unknown map normalization '" + norm + "'");

  const auto bb = backbone_from(c, "model.checkpoint");
  const bool compare = !c.str("model.reference").empty();
  const auto ref = compare ? backbone_from(c, "model.reference") : bb;
  std::vector<Image> inputs;
  for (const auto& p : images) {
    auto img = read_image(p);
    if (img.width != bb.config().image_size || img.height != bb.config().image_size)
      throw DataError(p + ": image is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                      ", the model expects " + std::to_string(bb.config().image_size) + " square");
    inputs.push_back(std::move(img));
  }
  const auto dir = output_dir(c);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& img = inputs[i];
    const auto gray = gray_values(img);
    Image result = attention_overlay(bb, img, gray, opt, alpha);
    if (compare)
      result = montage({gray_to_rgb(gray, img.width, img.height), result, attention_overlay(ref, img, gray, opt, alpha)});
    const auto name = std::filesystem::path(images[i]).stem().string() + "_attention.ppm";
    write_image(dir / name, result);
    out << "wrote " << (dir / name).string() << "\n";
  }
  write_snapshot(c, dir, "visualize");
}

// ---- argument parsing -------------------------------------------------------

struct FlagBinding {
  std::string key;
  std::string value;
  CLI::Option* option = nullptr;
};

/// Parses argv, runs the chosen command, and maps failures to exit codes.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Deepfake detection with vision transformer backbones"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path;
  std::deque<FlagBinding> bindings;  // stable addresses for CLI11
  auto bind = [&](CLI::App* cmd, const std::string& flag, const std::string& key, const std::string& help) {
    bindings.push_back({key, "", nullptr});
    bindings.back().option = cmd->add_option(flag, bindings.back().value, help + " [" + key + "]");
  };
  app.add_option("--config", config_path, "INI file with [section] key = value lines");
  bind(&app, "--seed", "run.seed", "root seed");
  bind(&app, "--out", "run.out", "output directory");

  auto vit_flags = [&](CLI::App* cmd) {
    bind(cmd, "--image-size", "corpus.image_size", "image side in pixels");
    bind(cmd, "--channels", "corpus.channels", "1 (gray) or 3");
    bind(cmd, "--patch-size", "vit.patch_size", "ViT patch side");
    bind(cmd, "--depth", "vit.depth", "transformer blocks");
    bind(cmd, "--width", "vit.width", "token width");
    bind(cmd, "--heads", "vit.heads", "attention heads");
    bind(cmd, "--registers", "vit.registers", "register tokens");
  };
  auto train_flags = [&](CLI::App* cmd) {
    bind(cmd, "--manifest", "corpus.manifest", "manifest file or corpus directory");
    bind(cmd, "--backbone", "model.backbone", "backbone checkpoint to start from");
    bind(cmd, "--approach", "train.approach", "1: frozen backbone + fusion, 2: fine-tune last k blocks");
    bind(cmd, "--k", "train.k", "blocks fused (approach 1) or fine-tuned (approach 2)");
    bind(cmd, "--fusion", "train.fusion", "concat or weighted_sum");
    bind(cmd, "--scope", "train.scope", "cls_only or all_tokens");
    bind(cmd, "--adaptor", "train.adaptor", "linear or none");
    bind(cmd, "--adaptor-dim", "train.adaptor_dim", "adaptor output width, 0 for the default");
    bind(cmd, "--dropout", "train.dropout", "adaptor dropout rate");
    bind(cmd, "--head", "train.head", "linear or mlp2");
    bind(cmd, "--epochs", "train.epochs", "training epochs");
    bind(cmd, "--batch-size", "train.batch_size", "batch size");
    bind(cmd, "--eval-every", "train.eval_every", "validation cadence in steps, 0 = per epoch");
    bind(cmd, "--learning-rate", "train.learning_rate", "AdamW learning rate");
    bind(cmd, "--weight-decay", "train.weight_decay", "AdamW weight decay");
    vit_flags(cmd);
  };

  auto* gen = app.add_subcommand("generate", "write a synthetic corpus and its manifest to --out");
  for (const auto& split : split_names()) {
    auto dashed = split;
    std::replace(dashed.begin(), dashed.end(), '_', '-');
    bind(gen, "--" + dashed + "-reals", "corpus." + split + "_reals", "real images in " + split);
    bind(gen, "--" + dashed + "-fakes", "corpus." + split + "_fakes", "fake images in " + split);
  }
  bind(gen, "--image-size", "corpus.image_size", "image side in pixels");
  bind(gen, "--seen-families", "corpus.seen_families", "fake families of train/val/test");
  bind(gen, "--unseen-families", "corpus.unseen_families", "fake families of the unseen splits");

  auto* pre = app.add_subcommand("pretrain", "pretrain a backbone (masked reconstruction or supervised shapes)");
  bind(pre, "--manifest", "corpus.manifest", "manifest file or corpus directory");
  bind(pre, "--backbone", "model.backbone", "backbone checkpoint to start from");
  bind(pre, "--recipe", "pretrain.recipe", "masked or supervised");
  bind(pre, "--mask-ratio", "pretrain.mask_ratio", "fraction of patches hidden");
  bind(pre, "--epochs", "pretrain.epochs", "pretraining epochs");
  bind(pre, "--batch-size", "pretrain.batch_size", "batch size");
  bind(pre, "--max-steps", "pretrain.max_steps", "step cap, 0 = none");
  bind(pre, "--learning-rate", "pretrain.learning_rate", "AdamW learning rate");
  bind(pre, "--shape-classes", "pretrain.shape_classes", "supervised recipe: classes (2-4)");
  bind(pre, "--shape-count", "pretrain.shape_count", "supervised recipe: images");
  vit_flags(pre);

  auto* tr = app.add_subcommand("train", "train a detector; writes detector.fvt and train_log.tsv");
  train_flags(tr);

  auto* ev = app.add_subcommand("eval", "evaluate a detector on one split");
  bind(ev, "--checkpoint", "model.checkpoint", "detector checkpoint");
  bind(ev, "--manifest", "corpus.manifest", "manifest file or corpus directory");
  bind(ev, "--split", "eval.split", "split to evaluate");
  bind(ev, "--threshold", "eval.threshold", "fixed decision threshold");
  bind(ev, "--calibrate-on", "eval.calibrate_on", "split whose EER threshold is used");

  auto* cal = app.add_subcommand("calibrate", "set a detector's threshold to the EER point of a split");
  bind(cal, "--checkpoint", "model.checkpoint", "detector checkpoint");
  bind(cal, "--manifest", "corpus.manifest", "manifest file or corpus directory");
  bind(cal, "--split", "eval.calibrate_on", "calibration split (default val)");

  auto* pr = app.add_subcommand("probe", "conventional classifiers on frozen CLS features");
  bind(pr, "--backbone", "model.backbone", "backbone checkpoint");
  bind(pr, "--manifest", "corpus.manifest", "manifest file or corpus directory");
  bind(pr, "--probe", "probe.kind", "pca_kmeans, knn, linear, mlp2, a comma list, or all");
  bind(pr, "--split", "probe.split", "evaluation split");
  bind(pr, "--k-neighbors", "probe.k_neighbors", "k-NN neighbours");
  bind(pr, "--pca-components", "probe.pca_components", "PCA components, 0 for the default");
  bind(pr, "--epochs", "probe.epochs", "trained probe epochs");
  bind(pr, "--hidden", "probe.hidden", "mlp2 hidden width, 0 for the default");
  vit_flags(pr);

  auto* ab = app.add_subcommand("ablate", "train once per k and tabulate test EER");
  bind(ab, "--k-list", "ablate.k_list", "comma-separated k values");
  train_flags(ab);

  auto* vis = app.add_subcommand("visualize", "CLS attention overlays of the final block");
  bind(vis, "--checkpoint", "model.checkpoint", "detector or backbone checkpoint (empty: fresh)");
  bind(vis, "--reference", "model.reference", "second model for a side-by-side montage ('fresh' allowed)");
  bind(vis, "--alpha", "visualize.alpha", "heat-map opacity in [0, 1]");
  bind(vis, "--reading", "visualize.reading", "cls_query_row or cls_key_column");
  bind(vis, "--normalization", "visualize.normalization", "raw or unit_sum");
  std::vector<std::string> image_args;
  vis->add_option("images", image_args, "input images (PGM/PPM)");
  vit_flags(vis);

  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
      return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
      return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
      throw ConfigError(e.what());
    }
    RunConfig cfg;
    if (!config_path.empty()) cfg.merge_file(config_path);
    for (const auto& b : bindings)
      if (b.option->count() > 0) cfg.set(b.key, b.value);
    if (!image_args.empty()) {
      std::string joined;
      for (const auto& p : image_args) joined += (joined.empty() ? "" : ",") + p;
      cfg.set("visualize.images", joined);
    }
    const auto* sub = app.get_subcommands().front();
    const auto& name = sub->get_name();
    if (name == "generate") cmd_generate(cfg, out);
    else if (name == "pretrain") cmd_pretrain(cfg, out);
    else if (name == "train") cmd_train(cfg, out);
    else if (name == "eval") cmd_eval(cfg, out);
    else if (name == "calibrate") cmd_calibrate(cfg, out);
    else if (name == "probe") cmd_probe(cfg, out);
    else if (name == "ablate") cmd_ablate(cfg, out);
    else cmd_visualize(cfg, out);
    return 0;
  } catch (const Error& e) {
    err << "error[" << error_class_name(e.error_class()) << "]: " << e.what() << "\n";
    return exit_code(e.error_class());
  } catch (const std::exception& e) {
    err << "error[internal]: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace forenvit::cli
