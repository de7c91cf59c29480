#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "forenvit/backbone/checkpoint.hpp"
#include "forenvit/data/manifest.hpp"
#include "forenvit/metrics/metrics.hpp"
#include "forenvit/probes/probes.hpp"

namespace forenvit {

using ParameterSnapshot = std::map<std::string, std::vector<float>>;

inline ParameterSnapshot snapshot(const NamedParameters<float>& params) {
  ParameterSnapshot s;
  for (const auto& [n, t] : params) s[n] = {t.data().begin(), t.data().end()};
  return s;
}

inline void restore(NamedParameters<float>& params, const ParameterSnapshot& s) {
  for (auto& [n, t] : params) {
    auto w = t.mutable_data();
    const auto& v = s.at(n);
    std::copy(v.begin(), v.end(), w.begin());
  }
}

// ---- evaluation helpers ----------------------------------------------------

inline constexpr std::size_t kEvalChunk = 64;

inline void require_images_match(const ViTConfig& cfg, const Dataset& d) {
  if (d.count() == 0) throw DataError("split " + d.split + " is empty");
  if (d.size != cfg.image_size || d.channels != cfg.channels)
    throw DataError("split " + d.split + " holds " + std::to_string(d.size) + "px images with " +
                    std::to_string(d.channels) + " channel(s); the model expects " + std::to_string(cfg.image_size) +
                    "px with " + std::to_string(cfg.channels));
}

/// Eval-mode logits of every image in the split.
inline std::vector<float> detector_logits(const Detector<float>& det, const Dataset& d) {
  require_images_match(det.backbone.config(), d);
  std::vector<float> out;
  out.reserve(d.count());
  for (const auto& idx : batch_order(d.count(), kEvalChunk, nullptr)) {
    const auto b = make_batch(d, idx);
    const auto l = det.logits(b.images, idx.size());
    out.insert(out.end(), l.data().begin(), l.data().end());
  }
  return out;
}

inline ScoreSet scores_from_logits(std::span<const float> logits, const Dataset& d) {
  ScoreSet s;
  s.reserve(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!std::isfinite(logits[i])) throw NumericError("non-finite logit for " + d.paths.at(i));
    s.push_back({sigmoid(logits[i]), d.labels[i], d.methods[i]});
  }
  return s;
}

inline ScoreSet score_dataset(const Detector<float>& det, const Dataset& d) {
  return scores_from_logits(detector_logits(det, d), d);
}

/// Final-norm CLS rows of a backbone, one per image.
inline FeatureMatrix extract_cls_features(const Backbone<float>& bb, const Dataset& d) {
  require_images_match(bb.config(), d);
  const std::size_t T = bb.config().tokens(), w = bb.config().width;
  std::vector<double> values;
  values.reserve(d.count() * w);
  for (const auto& idx : batch_order(d.count(), kEvalChunk, nullptr)) {
    const auto b = make_batch(d, idx);
    const auto res = bb.run_blocks(bb.embed(b.images, idx.size()), idx.size(), T, {}, Mode::eval, nullptr, false);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto row = res.final_tokens.data().subspan(i * T * w, w);
      values.insert(values.end(), row.begin(), row.end());
    }
  }
  return {d.count(), w, std::move(values), d.labels};
}

/// Tapped block outputs of a frozen backbone for a whole split.
struct TapCache {
  std::vector<std::size_t> blocks;
  std::vector<std::vector<float>> tokens;  // per block: n x T x d
  std::size_t T = 0, d = 0;

  static TapCache build(const Backbone<float>& bb, const Dataset& data, const std::set<std::size_t>& taps) {
    TapCache c;
    c.blocks.assign(taps.begin(), taps.end());
    c.tokens.resize(c.blocks.size());
    c.T = bb.config().tokens();
    c.d = bb.config().width;
    for (const auto& idx : batch_order(data.count(), kEvalChunk, nullptr)) {
      const auto b = make_batch(data, idx);
      const auto res = bb.run_blocks(bb.embed(b.images, idx.size()), idx.size(), c.T, taps, Mode::eval, nullptr, false);
      for (std::size_t k = 0; k < c.blocks.size(); ++k)
        c.tokens[k].insert(c.tokens[k].end(), res.taps[k].tokens.data().begin(), res.taps[k].tokens.data().end());
    }
    return c;
  }

  std::vector<BlockFeatures<float>> gather(std::span<const std::size_t> idx) const {
    std::vector<BlockFeatures<float>> out;
    const std::size_t per = T * d;
    for (std::size_t k = 0; k < blocks.size(); ++k) {
      std::vector<float> v;
      v.reserve(idx.size() * per);
      for (auto i : idx) v.insert(v.end(), tokens[k].begin() + static_cast<std::ptrdiff_t>(i * per),
                                  tokens[k].begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
      out.push_back({blocks[k], Tensor<float>({idx.size() * T, d}, std::move(v))});
    }
    return out;
  }
};

// ---- supervised detector training ------------------------------------------

struct TrainConfig {
  HeadConfig head;
  std::size_t epochs = 3;
  std::size_t batch_size = 8;
  std::size_t eval_every = 0;  // steps; 0 -> once per epoch
  std::uint64_t seed = 0;
  OptimizerConfig optimizer{1e-3, 0.01};

  void validate(const ViTConfig& vit) const {
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (head.approach == Approach::frozen_fusion) {
      head.fusion.validate(vit, head.resolved_adaptor_dim(vit.width));
    } else if (head.plan.k < 1 || head.plan.k > vit.depth) {
      throw ConfigError("fine-tune k=" + std::to_string(head.plan.k) + " outside 1.." + std::to_string(vit.depth));
    }
    if (!(optimizer.learning_rate > 0)) throw ConfigError("learning rate must be positive");
  }
};

struct TrainRecord {
  std::size_t step = 0;
  double train_loss = 0.0;  // mean over steps since the previous record
  double val_eer = 0.0;     // percent
  double val_accuracy = 0.0;
};

struct TrainLog {
  std::vector<TrainRecord> records;

  std::string to_text() const {
    std::string out = "step\tloss\teer\tacc\n";
    char buf[128];
    for (const auto& r : records) {
      std::snprintf(buf, sizeof buf, "%zu\t%.6f\t%.4f\t%.4f\n", r.step, r.train_loss, r.val_eer, r.val_accuracy);
      out += buf;
    }
    return out;
  }
};

struct TrainResult {
  Detector<float> detector;  // parameters of the best validation record
  TrainLog log;
  std::size_t best_step = 0;
  double best_val_eer = std::numeric_limits<double>::quiet_NaN();
};

using ProgressFn = std::function<void(const TrainRecord&)>;

/// Minimises BCE on `train`, evaluates on `val` every eval_every steps and
/// keeps the parameters of the record with the lowest validation EER (earliest
/// on ties).
inline TrainResult train(const TrainConfig& cfg, const Backbone<float>& backbone, const Dataset& train_set,
                         const Dataset& val_set, const ProgressFn& progress = {}) {
  const auto& vit = backbone.config();
  cfg.validate(vit);
  require_images_match(vit, train_set);
  require_images_match(vit, val_set);
  const Rng root = Rng(cfg.seed).derive("trainer");
  Detector<float> det(backbone.clone(), cfg.head, root.derive("head-init"));
  TrainResult res{det, {}, 0, std::numeric_limits<double>::quiet_NaN()};
  if (cfg.epochs == 0) return res;

  auto params = det.parameters();
  OptimizerState opt;
  opt.config = cfg.optimizer;
  const bool frozen = cfg.head.approach == Approach::frozen_fusion;
  TapCache train_cache, val_cache;
  if (frozen) {
    train_cache = TapCache::build(det.backbone, train_set, det.taps());
    val_cache = TapCache::build(det.backbone, val_set, det.taps());
  }
  auto forward = [&](const Dataset& d, const TapCache& cache, std::span<const std::size_t> idx, Mode mode, Rng* rng) {
    if (frozen) return det.logits_from_taps(cache.gather(idx), idx.size(), mode, rng);
    return det.logits(make_batch(d, idx).images, idx.size(), mode, rng);
  };
  auto validate_now = [&]() {
    std::vector<float> logits;
    for (const auto& idx : batch_order(val_set.count(), kEvalChunk, nullptr)) {
      const auto l = forward(val_set, val_cache, idx, Mode::eval, nullptr);
      logits.insert(logits.end(), l.data().begin(), l.data().end());
    }
    return evaluate(scores_from_logits(logits, val_set), ThresholdPolicy::fixed_half());
  };

  ParameterSnapshot best;
  std::size_t step = 0, since = 0;
  double loss_acc = 0;
  auto record = [&] {
    const auto rep = validate_now();
    TrainRecord r{step, since ? loss_acc / static_cast<double>(since) : 0.0, rep.eer, rep.accuracy};
    res.log.records.push_back(r);
    if (progress) progress(r);
    if (best.empty() || r.val_eer < res.best_val_eer) {
      res.best_val_eer = r.val_eer;
      res.best_step = step;
      best = snapshot(params);
    }
    loss_acc = 0;
    since = 0;
  };

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng order = root.derive("order").derive(static_cast<std::uint64_t>(epoch));
    Rng noise = root.derive("dropout").derive(static_cast<std::uint64_t>(epoch));
    for (const auto& idx : batch_order(train_set.count(), cfg.batch_size, &order)) {
      std::vector<int> labels;
      for (auto i : idx) labels.push_back(train_set.labels[i]);
      const auto loss = ops::bce_with_logits(forward(train_set, train_cache, idx, Mode::train, &noise), labels);
      const double lv = loss.item();
      if (!std::isfinite(lv)) throw NumericError("training loss diverged at step " + std::to_string(step + 1));
      backward(loss);
      optimizer_step(params, opt);
      ++step;
      ++since;
      loss_acc += lv;
      if (cfg.eval_every != 0 && step % cfg.eval_every == 0) record();
    }
    if (cfg.eval_every == 0) record();
  }
  if (since > 0) record();
  restore(params, best);
  return res;
}

// ---- masked-patch pretraining ------------------------------------------------

struct MaskedPretrainConfig {
  double mask_ratio = 0.75;
  std::size_t epochs = 3;
  std::size_t batch_size = 32;
  std::size_t decoder_depth = 2;
  std::size_t max_steps = 0;  // 0 -> no cap
  bool normalize_targets = true;  // per-patch zero mean, unit variance
  bool loss_on_visible = false;   // also reconstruct the visible patches
  std::uint64_t seed = 0;
  OptimizerConfig optimizer{1e-3, 0.05};
};

/// In-place zero mean, unit variance (variance floored at 1e-6).
inline void normalize_patch(std::span<float> v) {
  double mean = 0, var = 0;
  for (float x : v) mean += x;
  mean /= static_cast<double>(v.size());
  for (float x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size());
  const double inv = 1.0 / std::sqrt(var + 1e-6);
  for (float& x : v) x = static_cast<float>((x - mean) * inv);
}

inline std::size_t masked_count(std::size_t patches, double ratio) {
  if (!(ratio > 0 && ratio < 1)) throw ConfigError("mask_ratio must lie strictly between 0 and 1");
  const auto m = static_cast<std::size_t>(std::lround(ratio * static_cast<double>(patches)));
  if (m == 0 || m >= patches)
    throw ConfigError("mask_ratio " + std::to_string(ratio) + " masks " + std::to_string(m) + " of " +
                      std::to_string(patches) + " patches; need at least one masked and one visible");
  return m;
}

struct PretrainLog {
  std::vector<double> losses;  // one per step
  std::vector<double> accuracies;  // supervised recipe: per epoch
};

/// Reconstructs masked patch pixels from the visible ones through a small
/// decoder; updates `bb` in place. The decoder is discarded.
inline PretrainLog pretrain_masked(Backbone<float>& bb, const Dataset& images, const MaskedPretrainConfig& cfg) {
  const auto& vit = bb.config();
  require_images_match(vit, images);
  if (cfg.batch_size == 0) throw ConfigError("batch_size must be positive");
  const std::size_t np = vit.num_patches(), nm = masked_count(np, cfg.mask_ratio), nv = np - nm;
  const std::size_t R = vit.registers, T = vit.tokens(), d = vit.width, pd = vit.patch_dim();
  const Rng root = Rng(cfg.seed).derive("pretrain-masked");
  PretrainLog log;
  if (cfg.epochs == 0) return log;

  ViTConfig dec_cfg = vit;
  dec_cfg.depth = std::max<std::size_t>(1, cfg.decoder_depth);
  dec_cfg.dropout_rate = 0;
  Rng init = root.derive("decoder-init");
  Backbone<float> decoder(dec_cfg, init.derive("blocks"));
  auto tensor = [&](Shape s, double std) {
    std::vector<float> v(shape_numel(s));
    for (auto& x : v) x = static_cast<float>(init.normal(0.0, std));
    return Tensor<float>::parameter(std::move(s), std::move(v));
  };
  const auto embed_w = tensor({d, d}, std::sqrt(1.0 / d));
  const auto embed_b = Tensor<float>::parameter({d}, std::vector<float>(d, 0.f));
  const auto mask_token = tensor({1, d}, 0.02);
  const auto dec_pos = tensor({T, d}, 0.02);
  const auto pixel_w = tensor({d, pd}, std::sqrt(1.0 / d));
  const auto pixel_b = Tensor<float>::parameter({pd}, std::vector<float>(pd, 0.f));

  bb.set_trainable(true);
  auto params = bb.parameters();
  for (const auto& [n, t] : decoder.parameters()) {
    if (n.rfind("backbone/blocks.", 0) != 0 && n.rfind("backbone/norm.", 0) != 0) continue;
    params["decoder/" + n.substr(9)] = t;
  }
  params["decoder/embed.weight"] = embed_w;
  params["decoder/embed.bias"] = embed_b;
  params["decoder/mask_token"] = mask_token;
  params["decoder/pos_embed"] = dec_pos;
  params["decoder/pixels.weight"] = pixel_w;
  params["decoder/pixels.bias"] = pixel_b;
  for (auto& [n, t] : params) t.set_trainable(true);
  OptimizerState opt;
  opt.config = cfg.optimizer;

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng order = root.derive("order").derive(static_cast<std::uint64_t>(epoch));
    for (const auto& idx : batch_order(images.count(), cfg.batch_size, &order)) {
      if (cfg.max_steps && step >= cfg.max_steps) return log;
      Rng mrng = root.derive("mask").derive(static_cast<std::uint64_t>(step));
      const std::size_t B = idx.size();
      const auto batch = make_batch(images, idx);
      const auto pixels = extract_patches<float>(batch.images.data(), B, vit);
      const auto tokens = bb.patchify(batch.images, B);
      std::vector<std::size_t> visible_rows, masked_rows;
      std::vector<std::size_t> decoder_index;
      std::vector<float> target;
      const std::size_t enc_T = 1 + R + nv;
      const std::size_t mask_row = B * enc_T;
      for (std::size_t b = 0; b < B; ++b) {
        std::vector<std::size_t> perm(np);
        std::iota(perm.begin(), perm.end(), 0);
        mrng.shuffle(perm);
        std::vector<bool> is_masked(np, false);
        for (std::size_t i = 0; i < nm; ++i) is_masked[perm[i]] = true;
        std::size_t vis = 0;
        for (std::size_t r = 0; r < 1 + R; ++r) decoder_index.push_back(b * enc_T + r);
        for (std::size_t p = 0; p < np; ++p) {
          if (is_masked[p]) {
            decoder_index.push_back(mask_row);
          } else {
            visible_rows.push_back(b * np + p);
            decoder_index.push_back(b * enc_T + 1 + R + vis++);
          }
          if (is_masked[p] || cfg.loss_on_visible) {
            masked_rows.push_back(b * T + 1 + R + p);
            const auto* src = pixels.data() + (b * np + p) * pd;
            const std::size_t at = target.size();
            target.insert(target.end(), src, src + pd);
            if (cfg.normalize_targets) normalize_patch(std::span<float>(target).subspan(at, pd));
          }
        }
      }
      const auto enc_in = bb.assemble(ops::gather_rows(tokens, visible_rows), B, nv);
      const auto enc = bb.run_blocks(enc_in, B, enc_T, {}, Mode::train, &mrng, false).final_tokens;
      const auto pool = ops::concat_rows<float>({ops::linear(enc, embed_w, embed_b), mask_token});
      const auto dec_in = ops::add_tiled(ops::gather_rows(pool, decoder_index), dec_pos);
      const auto dec = decoder.run_blocks(dec_in, B, T, {}, Mode::train, &mrng, false).final_tokens;
      const auto pred = ops::linear(ops::gather_rows(dec, masked_rows), pixel_w, pixel_b);
      const auto loss = ops::mse(pred, std::span<const float>(target));
      const double lv = loss.item();
      if (!std::isfinite(lv)) throw NumericError("masked pretraining loss diverged at step " + std::to_string(step + 1));
      backward(loss);
      optimizer_step(params, opt);
      log.losses.push_back(lv);
      ++step;
    }
  }
  return log;
}

// ---- supervised multi-class pretraining --------------------------------------

struct SupervisedPretrainConfig {
  std::size_t epochs = 2;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  OptimizerConfig optimizer{1e-3, 0.01};
};

/// Cross-entropy on a temporary linear class head over the final CLS row.
inline PretrainLog pretrain_supervised(Backbone<float>& bb, std::span<const float> images, std::span<const int> labels,
                                       const SupervisedPretrainConfig& cfg) {
  const auto& vit = bb.config();
  const std::size_t per = vit.channels * vit.image_size * vit.image_size, n = labels.size();
  if (n == 0 || images.size() != n * per) throw DataError("supervised pretraining: image/label count mismatch");
  int classes = 0;
  for (int l : labels) {
    if (l < 0) throw DataError("supervised pretraining: negative class label");
    classes = std::max(classes, l + 1);
  }
  if (std::set<int>(labels.begin(), labels.end()).size() < 2) throw DataError("supervised pretraining needs at least two classes");
  if (cfg.batch_size == 0) throw ConfigError("batch_size must be positive");
  PretrainLog log;
  if (cfg.epochs == 0) return log;
  const Rng root = Rng(cfg.seed).derive("pretrain-supervised");
  Rng init = root.derive("head-init");
  const auto C = static_cast<std::size_t>(classes), d = vit.width, T = vit.tokens();
  std::vector<float> w(d * C);
  const double lim = std::sqrt(6.0 / static_cast<double>(d + C));
  for (auto& v : w) v = static_cast<float>(init.uniform(-lim, lim));
  const auto head_w = Tensor<float>::parameter({d, C}, w);
  const auto head_b = Tensor<float>::parameter({C}, std::vector<float>(C, 0.f));
  bb.set_trainable(true);
  auto params = bb.parameters();
  params["classes/weight"] = head_w;
  params["classes/bias"] = head_b;
  OptimizerState opt;
  opt.config = cfg.optimizer;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng order = root.derive("order").derive(static_cast<std::uint64_t>(epoch));
    Rng noise = root.derive("dropout").derive(static_cast<std::uint64_t>(epoch));
    std::size_t correct = 0;
    for (const auto& idx : batch_order(n, cfg.batch_size, &order)) {
      std::vector<float> px;
      std::vector<int> y;
      for (auto i : idx) {
        px.insert(px.end(), images.begin() + static_cast<std::ptrdiff_t>(i * per),
                  images.begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
        y.push_back(labels[i]);
      }
      const std::size_t B = idx.size();
      const Tensor<float> x({B, vit.channels, vit.image_size, vit.image_size}, std::move(px));
      const auto out = bb.run_blocks(bb.embed(x, B), B, T, {}, Mode::train, &noise, false).final_tokens;
      std::vector<std::size_t> cls(B);
      for (std::size_t b = 0; b < B; ++b) cls[b] = b * T;
      const auto logits = ops::linear(ops::gather_rows(out, cls), head_w, head_b);
      for (std::size_t b = 0; b < B; ++b) {
        const auto row = logits.data().subspan(b * C, C);
        correct += static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()) == y[b];
      }
      const auto loss = ops::cross_entropy(logits, y);
      const double lv = loss.item();
      if (!std::isfinite(lv)) throw NumericError("supervised pretraining loss diverged at step " + std::to_string(step + 1));
      backward(loss);
      optimizer_step(params, opt);
      log.losses.push_back(lv);
      ++step;
    }
    log.accuracies.push_back(100.0 * static_cast<double>(correct) / static_cast<double>(n));
  }
  return log;
}

// ---- k ablation ----------------------------------------------------------------

struct AblationRow {
  std::size_t k = 0;
  double test_eer = 0.0;  // percent
  double val_eer = 0.0;
};

inline std::string ablation_to_text(const std::vector<AblationRow>& rows) {
  std::string out = "k\teer\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu\t%.4f\n", r.k, r.test_eer);
    out += buf;
  }
  return out;
}

/// One full train + test evaluation per k with the template's seed. k sets the
/// fine-tune plan for Approach 2 and the fused block count for Approach 1.
inline std::vector<AblationRow> ablate_k(const TrainConfig& templ, const std::vector<std::size_t>& k_values,
                                         const Backbone<float>& bb, const Dataset& train_set, const Dataset& val_set,
                                         const Dataset& test_set,
                                         const std::function<void(const AblationRow&)>& progress = {}) {
  if (k_values.empty()) throw ConfigError("ablation needs at least one k");
  std::vector<TrainConfig> configs;
  for (auto k : k_values) {
    TrainConfig c = templ;
    (c.head.approach == Approach::finetune ? c.head.plan.k : c.head.fusion.k) = k;
    c.validate(bb.config());
    configs.push_back(c);
  }
  std::vector<AblationRow> rows;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    const auto r = train(configs[i], bb, train_set, val_set);
    const auto test = eer(score_dataset(r.detector, test_set));
    rows.push_back({k_values[i], 100.0 * test.eer, r.best_val_eer});
    if (progress) progress(rows.back());
  }
  return rows;
}

}  // namespace forenvit
