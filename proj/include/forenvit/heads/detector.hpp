#pragma once

#include <set>

#include "forenvit/heads/heads.hpp"

namespace forenvit {

enum class Approach { frozen_fusion = 1, finetune = 2 };

/// Everything needed to rebuild the trainable part of a detector.
struct HeadConfig {
  Approach approach = Approach::finetune;
  FusionSpec fusion;                      // frozen_fusion only
  AdaptorKind adaptor = AdaptorKind::linear;
  std::size_t adaptor_dim = 0;            // 0 -> width/4 for concat, width for weighted_sum
  double adaptor_dropout = 0.0;
  FineTunePlan plan;                      // finetune only
  HeadKind head = HeadKind::linear;
  std::size_t head_hidden = 0;            // mlp2 only, 0 -> input/2

  std::size_t resolved_adaptor_dim(std::size_t width) const {
    if (adaptor == AdaptorKind::none) return width;
    if (adaptor_dim != 0) return adaptor_dim;
    return fusion.mode == FusionMode::concat ? std::max<std::size_t>(1, width / 4) : width;
  }
};

/// Backbone plus the classifier stack of one of the two approaches.
template <typename T>
class Detector {
 public:
  Backbone<T> backbone;
  HeadConfig config;
  std::vector<Adaptor<T>> adaptors;
  Tensor<T> fusion_logits;
  ClassifierHead<T> head;
  ThresholdPolicy policy = ThresholdPolicy::fixed_half();

  Detector(Backbone<T> bb, HeadConfig cfg, Rng rng) : backbone(std::move(bb)), config(cfg) {
    const auto& vit = backbone.config();
    const std::size_t d = vit.width;
    std::size_t head_in = d;
    if (config.approach == Approach::frozen_fusion) {
      const std::size_t out = config.resolved_adaptor_dim(d);
      config.fusion.validate(vit, out);
      if (!(config.adaptor_dropout >= 0 && config.adaptor_dropout < 1))
        throw ConfigError("adaptor dropout must lie in [0, 1)");
      for (std::size_t i = 0; i < config.fusion.k; ++i) {
        adaptors.push_back(config.adaptor == AdaptorKind::linear
                               ? Adaptor<T>::linear(d, out, config.adaptor_dropout, rng)
                               : Adaptor<T>::passthrough(d, config.adaptor_dropout));
      }
      const std::size_t per_block = config.fusion.rows(token_layout(vit)).size() * out;
      head_in = config.fusion.mode == FusionMode::concat ? config.fusion.k * per_block : per_block;
      if (config.fusion.mode == FusionMode::weighted_sum)
        fusion_logits = Tensor<T>::parameter({config.fusion.k}, std::vector<T>(config.fusion.k, T(0)));
    } else if (config.plan.k < 1 || config.plan.k > vit.depth) {
      throw ConfigError("fine-tune k=" + std::to_string(config.plan.k) + " outside 1.." + std::to_string(vit.depth));
    }
    head = ClassifierHead<T>::create(config.head, head_in, config.head_hidden, rng);
    apply_training_mask();
  }

  NamedParameters<T> head_parameters() const {
    NamedParameters<T> p;
    head.add_parameters(p, "head/classifier.");
    if (config.approach == Approach::frozen_fusion) {
      const auto blocks = config.fusion.blocks(backbone.config().depth);
      for (std::size_t i = 0; i < adaptors.size(); ++i) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "head/adaptor.%02zu.", blocks[i]);
        adaptors[i].add_parameters(p, buf);
      }
      if (fusion_logits.defined()) p["head/fusion.logits"] = fusion_logits;
    }
    return p;
  }

  NamedParameters<T> parameters() const {
    auto p = backbone.parameters();
    p.merge(head_parameters());
    return p;
  }

  /// Frozen backbone for frozen_fusion; the fine-tune mask for finetune.
  void apply_training_mask() {
    auto params = parameters();
    if (config.approach == Approach::frozen_fusion) {
      for (auto& [name, t] : params) t.set_trainable(name.rfind("backbone/", 0) != 0);
    } else {
      apply_mask(params, build_finetune_mask(config.plan, params, backbone.config().depth));
    }
  }

  void set_all_trainable(bool on) {
    for (auto& [name, t] : parameters()) t.set_trainable(on);
  }

  std::set<std::size_t> taps() const {
    if (config.approach != Approach::frozen_fusion) return {};
    const auto b = config.fusion.blocks(backbone.config().depth);
    return {b.begin(), b.end()};
  }

  /// Classifier stack over tapped features of the k final blocks.
  Tensor<T> logits_from_taps(const std::vector<BlockFeatures<T>>& taps, std::size_t batch, Mode mode, Rng* rng) const {
    const auto& vit = backbone.config();
    const auto fused = fuse(taps, adaptors, config.fusion, fusion_logits, token_layout(vit), vit.depth, batch, mode, rng);
    return head.logits(fused);
  }

  /// Classifier over phi_n's CLS row.
  Tensor<T> logits_from_last_block(const Tensor<T>& last_block, std::size_t batch) const {
    const std::size_t tokens = backbone.config().tokens();
    std::vector<std::size_t> cls_rows(batch);
    for (std::size_t b = 0; b < batch; ++b) cls_rows[b] = b * tokens;
    return head.logits(ops::gather_rows(last_block, std::move(cls_rows)));
  }

  /// images [B, C, H, W] -> logits [B, 1]
  Tensor<T> logits(const Tensor<T>& images, std::size_t batch, Mode mode = Mode::eval, Rng* rng = nullptr) const {
    if (config.approach == Approach::frozen_fusion) {
      for (const auto& [name, p] : backbone.parameters())
        if (p.trainable()) throw ContractError("frozen-backbone forward: backbone parameter " + name + " is trainable");
      // Frozen backbone always runs in eval mode.
      const auto res = backbone.forward(images, batch, taps(), Mode::eval, nullptr);
      return logits_from_taps(res.taps, batch, mode, rng);
    }
    const auto res = backbone.run_blocks(backbone.embed(images, batch), batch, backbone.config().tokens(), {}, mode, rng,
                                         false);
    return logits_from_last_block(res.last_block, batch);
  }

  Detector clone() const {
    Detector c = *this;
    c.backbone = backbone.clone();
    for (auto& a : c.adaptors)
      if (a.kind == AdaptorKind::linear) {
        a.weight = a.weight.clone();
        a.bias = a.bias.clone();
      }
    if (fusion_logits.defined()) c.fusion_logits = fusion_logits.clone();
    for (Tensor<T>* t : {&c.head.w1, &c.head.b1, &c.head.w2, &c.head.b2})
      if (t->defined()) *t = t->clone();
    return c;
  }
};

}  // namespace forenvit
