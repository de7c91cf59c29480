#include <gtest/gtest.h>

#include <cstring>

#include "forenvit/backbone/checkpoint.hpp"
#include "gradcheck.hpp"

using namespace forenvit;

namespace {

ViTConfig tiny() {
  ViTConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.depth = 4;
  c.width = 8;
  c.heads = 2;
  c.registers = 2;
  c.mlp_ratio = 2;
  return c;
}

template <typename T>
Tensor<T> random_images(std::size_t n, const ViTConfig& c, Rng& rng) {
  std::vector<T> v(n * c.channels * c.image_size * c.image_size);
  for (auto& x : v) x = static_cast<T>(rng.uniform());
  return Tensor<T>({n, c.channels, c.image_size, c.image_size}, std::move(v));
}

std::vector<BlockFeatures<double>> random_features(const std::vector<std::size_t>& blocks, std::size_t batch,
                                                   std::size_t tokens, std::size_t d, Rng& rng) {
  std::vector<BlockFeatures<double>> f;
  for (auto b : blocks) {
    std::vector<double> v(batch * tokens * d);
    for (auto& x : v) x = rng.normal();
    f.push_back({b, Tensor<double>({batch * tokens, d}, v)});
  }
  return f;
}

template <typename T>
std::map<std::string, std::vector<T>> snapshot(const NamedParameters<T>& p) {
  std::map<std::string, std::vector<T>> s;
  for (auto& [n, t] : p) s[n] = {t.data().begin(), t.data().end()};
  return s;
}

}  // namespace

TEST(Fuse, SingleBlockIdentityIsClsVector) {
  ViTConfig c = tiny();
  Rng rng(1);
  const auto layout = token_layout(c);
  const auto feats = random_features({4}, 3, layout.tokens, c.width, rng);
  FusionSpec spec;
  spec.k = 1;
  const auto out = fuse<double>(feats, {Adaptor<double>::identity(c.width)}, spec, {}, layout, c.depth, 3,
                                Mode::eval, nullptr);
  ASSERT_EQ(out.shape(), (Shape{3, c.width}));
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t j = 0; j < c.width; ++j) EXPECT_EQ(out[b * c.width + j], feats[0].tokens[b * layout.tokens * c.width + j]);
}

TEST(Fuse, WeightedSumZeroLogitsAverages) {
  ViTConfig c = tiny();
  Rng rng(2);
  const auto layout = token_layout(c);
  const auto feats = random_features({3, 4}, 2, layout.tokens, c.width, rng);
  FusionSpec spec;
  spec.k = 2;
  spec.mode = FusionMode::weighted_sum;
  std::vector<Adaptor<double>> ad{Adaptor<double>::linear(c.width, c.width, 0, rng),
                                  Adaptor<double>::linear(c.width, c.width, 0, rng)};
  const auto logits = Tensor<double>::zeros({2});
  const auto out = fuse(feats, ad, spec, logits, layout, c.depth, 2, Mode::eval, nullptr);
  std::vector<std::size_t> cls{0, layout.tokens};
  const auto a0 = ad[0].apply(ops::gather_rows(feats[0].tokens, cls), Mode::eval, nullptr);
  const auto a1 = ad[1].apply(ops::gather_rows(feats[1].tokens, cls), Mode::eval, nullptr);
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out[i], 0.5 * (a0[i] + a1[i]), 1e-12);
}

TEST(Fuse, ConcatFourBlocksSixteenWide) {
  ViTConfig c = tiny();
  c.width = 32;
  c.heads = 4;
  Rng rng(3);
  const auto layout = token_layout(c);
  const auto feats = random_features({1, 2, 3, 4}, 2, layout.tokens, c.width, rng);
  FusionSpec spec;
  std::vector<Adaptor<double>> ad;
  for (int i = 0; i < 4; ++i) ad.push_back(Adaptor<double>::linear(c.width, 16, 0, rng));
  const auto out = fuse(feats, ad, spec, {}, layout, c.depth, 2, Mode::eval, nullptr);
  EXPECT_EQ(out.shape(), (Shape{2, 64}));
  // Block order: the first 16 columns come from block 1.
  const auto first = ad[0].apply(ops::gather_rows(feats[0].tokens, {0, layout.tokens}), Mode::eval, nullptr);
  for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(out[64 + j], first[16 + j]);
}

TEST(Fuse, AllTokensExcludesRegisters) {
  ViTConfig c;
  c.image_size = 28;
  c.patch_size = 14;
  c.registers = 4;
  c.width = 8;
  c.heads = 2;
  c.depth = 4;
  const auto layout = token_layout(c);
  ASSERT_EQ(layout.tokens, 9u);
  Rng rng(4);
  const auto feats = random_features({3, 4}, 1, 9, 8, rng);
  FusionSpec spec;
  spec.k = 2;
  spec.mode = FusionMode::weighted_sum;
  spec.scope = TokenScope::all_tokens;
  const std::vector<Adaptor<double>> ad{Adaptor<double>::identity(8), Adaptor<double>::identity(8)};
  const auto out = fuse(feats, ad, spec, Tensor<double>::zeros({2}), layout, c.depth, 1, Mode::eval, nullptr);
  ASSERT_EQ(out.shape(), (Shape{1, 40}));
  // Expected rows from the layout: CLS then patches.
  std::vector<std::size_t> rows{layout.cls_row};
  rows.insert(rows.end(), layout.patch_rows.begin(), layout.patch_rows.end());
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t j = 0; j < 8; ++j)
      EXPECT_NEAR(out[r * 8 + j], 0.5 * (feats[0].tokens[rows[r] * 8 + j] + feats[1].tokens[rows[r] * 8 + j]), 1e-12);
}

TEST(Fuse, RegistersCanBeIncluded) {
  FusionSpec spec;
  spec.scope = TokenScope::all_tokens;
  spec.include_registers = true;
  ViTConfig c = tiny();
  EXPECT_EQ(spec.rows(token_layout(c)).size(), c.tokens());
}

TEST(Fuse, WrongFeatureCountIsContractError) {
  ViTConfig c = tiny();
  Rng rng(5);
  const auto layout = token_layout(c);
  FusionSpec spec;
  spec.k = 2;
  std::vector<Adaptor<double>> ad{Adaptor<double>::identity(8), Adaptor<double>::identity(8)};
  EXPECT_THROW(fuse(random_features({4}, 1, layout.tokens, 8, rng), ad, spec, {}, layout, c.depth, 1, Mode::eval, nullptr),
               ContractError);
  EXPECT_THROW(fuse(random_features({2, 3}, 1, layout.tokens, 8, rng), ad, spec, {}, layout, c.depth, 1, Mode::eval,
                    nullptr),
               ContractError);
}

TEST(Fuse, ConcatAllTokensOverBudgetIsConfigError) {
  ViTConfig c;
  FusionSpec spec;
  spec.k = 4;
  spec.scope = TokenScope::all_tokens;
  spec.dim_budget = 1000;
  EXPECT_THROW(spec.validate(c, 16), ConfigError);
  spec.mode = FusionMode::weighted_sum;
  EXPECT_NO_THROW(spec.validate(c, 16));
  spec.k = 9;
  EXPECT_THROW(spec.validate(c, 16), ConfigError);
  spec.k = 0;
  EXPECT_THROW(spec.validate(c, 16), ConfigError);
}

TEST(Fuse, ShiftingFusionLogitsChangesNothing) {
  ViTConfig c = tiny();
  Rng rng(6);
  const auto layout = token_layout(c);
  FusionSpec spec;
  spec.k = 3;
  spec.mode = FusionMode::weighted_sum;
  std::vector<Adaptor<double>> ad;
  for (int i = 0; i < 3; ++i) ad.push_back(Adaptor<double>::linear(8, 8, 0, rng));
  for (int trial = 0; trial < 20; ++trial) {
    const auto feats = random_features({2, 3, 4}, 2, layout.tokens, 8, rng);
    std::vector<double> l{rng.normal(), rng.normal(), rng.normal()};
    const double shift = rng.uniform(-50, 50);
    std::vector<double> s(l);
    for (auto& v : s) v += shift;
    const auto a = fuse(feats, ad, spec, Tensor<double>({3}, l), layout, c.depth, 2, Mode::eval, nullptr);
    const auto b = fuse(feats, ad, spec, Tensor<double>({3}, s), layout, c.depth, 2, Mode::eval, nullptr);
    for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_NEAR(a[i], b[i], 1e-6);
  }
}

TEST(FrozenFusion, SingleBlockIdentityEqualsClassifyingLastCls) {
  ViTConfig c = tiny();
  HeadConfig h;
  h.approach = Approach::frozen_fusion;
  h.fusion.k = 1;
  h.adaptor_dim = c.width;
  Detector<float> det(Backbone<float>(c, Rng(7)), h, Rng(8));
  det.adaptors[0] = Adaptor<float>::identity(c.width);
  Rng rng(9);
  const auto img = random_images<float>(4, c, rng);
  const auto fused = det.logits(img, 4);
  const auto res = det.backbone.forward(img, 4, {c.depth});
  const auto direct = det.logits_from_last_block(res.last_block, 4);
  ASSERT_EQ(fused.shape(), (Shape{4, 1}));
  EXPECT_EQ(std::memcmp(fused.data().data(), direct.data().data(), 4 * sizeof(float)), 0);
}

TEST(FrozenFusion, TrainableBackboneIsContractError) {
  HeadConfig h;
  h.approach = Approach::frozen_fusion;
  Detector<float> det(Backbone<float>(tiny(), Rng(10)), h, Rng(11));
  Rng rng(12);
  const auto img = random_images<float>(1, tiny(), rng);
  EXPECT_NO_THROW(det.logits(img, 1));
  det.backbone.set_trainable(true);
  EXPECT_THROW(det.logits(img, 1), ContractError);
}

TEST(FrozenFusion, OptimizerStepLeavesBackboneBytes) {
  HeadConfig h;
  h.approach = Approach::frozen_fusion;
  h.fusion.mode = FusionMode::weighted_sum;
  h.fusion.k = 3;
  Detector<float> det(Backbone<float>(tiny(), Rng(13)), h, Rng(14));
  Rng rng(15);
  const auto img = random_images<float>(4, tiny(), rng);
  const auto before = snapshot(det.backbone.parameters());
  const auto head_before = snapshot(det.head_parameters());
  OptimizerState opt;
  opt.config.learning_rate = 1e-2;
  auto params = det.parameters();
  const std::vector<int> labels{0, 1, 0, 1};
  for (int step = 0; step < 3; ++step) {
    backward(ops::bce_with_logits(det.logits(img, 4, Mode::train, &rng), labels));
    optimizer_step(params, opt);
  }
  EXPECT_EQ(before, snapshot(det.backbone.parameters()));
  EXPECT_NE(head_before, snapshot(det.head_parameters()));
  EXPECT_EQ(head_before.count("head/fusion.logits"), 1u);
}

TEST(FrozenFusion, FusionLogitGradientMatchesFiniteDifferences) {
  ViTConfig c = tiny();
  HeadConfig h;
  h.approach = Approach::frozen_fusion;
  h.fusion.mode = FusionMode::weighted_sum;
  h.fusion.k = 3;
  h.head = HeadKind::mlp2;
  Detector<double> det(Backbone<double>(c, Rng(16)), h, Rng(17));
  {
    Tensor<double> l = det.fusion_logits;
    auto w = l.mutable_data();
    w[0] = 0.3, w[1] = -0.7, w[2] = 0.1;
  }
  Rng rng(18);
  const auto img = random_images<double>(3, c, rng);
  const std::vector<int> labels{1, 0, 1};
  const auto r = forenvit::testing::check_gradients(
      {{"fusion", det.fusion_logits}}, [&] { return ops::bce_with_logits(det.logits(img, 3), labels); }, 1e-6, 1e-5, 1e-10);
  EXPECT_EQ(r.failures, 0u) << r.first_failure;
  EXPECT_EQ(r.checked, 3u);
}

TEST(FineTuneMask, LastBlockOfFour) {
  Backbone<float> bb(tiny(), Rng(19));
  FineTunePlan plan;
  plan.k = 1;
  auto params = bb.parameters();
  params["head/classifier.fc1.weight"] = Tensor<float>::zeros({8, 1});
  const auto mask = build_finetune_mask(plan, params, 4);
  for (auto& [name, on] : mask) {
    const bool expect = name.rfind("backbone/blocks.04.", 0) == 0 || name == "backbone/cls_token" ||
                        name == "backbone/registers" || name.rfind("head/", 0) == 0;
    EXPECT_EQ(on, expect) << name;
  }
}

TEST(FineTuneMask, AllBlocksKeepsPatchProjectionFrozen) {
  Backbone<float> bb(tiny(), Rng(20));
  FineTunePlan plan;
  plan.k = 4;
  const auto mask = build_finetune_mask(plan, bb.parameters(), 4);
  EXPECT_FALSE(mask.at("backbone/patch_embed.weight"));
  EXPECT_FALSE(mask.at("backbone/patch_embed.bias"));
  EXPECT_FALSE(mask.at("backbone/pos_embed"));
  for (std::size_t i = 1; i <= 4; ++i) EXPECT_TRUE(mask.at(block_prefix(i) + "attn.qkv.weight"));
}

TEST(FineTuneMask, TwentyFourBlocksElevenTuned) {
  ViTConfig c = tiny();
  c.depth = 24;
  Backbone<float> bb(c, Rng(21));
  FineTunePlan plan;
  plan.k = 11;
  const auto mask = build_finetune_mask(plan, bb.parameters(), 24);
  for (std::size_t i = 1; i <= 24; ++i) EXPECT_EQ(mask.at(block_prefix(i) + "mlp.fc2.bias"), i >= 14) << i;
}

TEST(FineTuneMask, TokensOptional) {
  Backbone<float> bb(tiny(), Rng(22));
  FineTunePlan plan;
  plan.tune_tokens = false;
  const auto mask = build_finetune_mask(plan, bb.parameters(), 4);
  EXPECT_FALSE(mask.at("backbone/cls_token"));
  EXPECT_FALSE(mask.at("backbone/registers"));
}

TEST(FineTuneMask, OutOfRangeIsConfigError) {
  Backbone<float> bb(tiny(), Rng(23));
  FineTunePlan plan;
  plan.k = 0;
  EXPECT_THROW(build_finetune_mask(plan, bb.parameters(), 4), ConfigError);
  plan.k = 5;
  EXPECT_THROW(build_finetune_mask(plan, bb.parameters(), 4), ConfigError);
}

TEST(FineTune, TrainingTouchesOnlyPlannedParameters) {
  ViTConfig c = tiny();
  HeadConfig h;
  h.plan.k = 2;
  Detector<float> det(Backbone<float>(c, Rng(24)), h, Rng(25));
  Rng rng(26);
  const auto img = random_images<float>(6, c, rng);
  const auto before = snapshot(det.parameters());
  OptimizerState opt;
  opt.config.learning_rate = 1e-2;
  auto params = det.parameters();
  const std::vector<int> labels{0, 1, 1, 0, 1, 0};
  backward(ops::bce_with_logits(det.logits(img, 6, Mode::train, &rng), labels));
  optimizer_step(params, opt);
  const auto after = snapshot(det.parameters());
  const auto mask = build_finetune_mask(h.plan, params, c.depth);
  for (auto& [name, v] : before) {
    if (!mask.at(name)) EXPECT_EQ(v, after.at(name)) << name;
  }
  for (std::size_t i = 3; i <= 4; ++i) {
    bool changed = false;
    for (auto& [name, v] : before)
      if (name.rfind(block_prefix(i), 0) == 0 && v != after.at(name)) changed = true;
    EXPECT_TRUE(changed) << i;
  }
}

TEST(FineTune, HeadReadsLastTapBitwise) {
  ViTConfig c = tiny();
  Detector<float> det(Backbone<float>(c, Rng(27)), HeadConfig{}, Rng(28));
  Rng rng(29);
  const auto img = random_images<float>(3, c, rng);
  const auto res = det.backbone.forward(img, 3, {c.depth});
  for (std::size_t i = 0; i < res.last_block.numel(); ++i) ASSERT_EQ(res.last_block[i], res.taps[0].tokens[i]);
  const auto a = det.logits(img, 3);
  const auto b = det.logits_from_last_block(res.taps[0].tokens, 3);
  EXPECT_EQ(std::memcmp(a.data().data(), b.data().data(), 3 * sizeof(float)), 0);
}

TEST(Detector, CheckpointRoundTripKeepsThreshold) {
  HeadConfig h;
  h.approach = Approach::frozen_fusion;
  h.fusion.mode = FusionMode::weighted_sum;
  h.fusion.k = 2;
  h.head = HeadKind::mlp2;
  Detector<float> det(Backbone<float>(tiny(), Rng(30)), h, Rng(31));
  det.policy = ThresholdPolicy::calibrated(0.37, "val");
  const auto path = std::filesystem::temp_directory_path() / "forenvit_heads_det.fvt";
  save_detector(path, det);
  const auto back = detector_from_checkpoint(load_checkpoint(path));
  EXPECT_EQ(snapshot(det.parameters()), snapshot(back.parameters()));
  EXPECT_EQ(back.policy.kind, ThresholdKind::validation_eer);
  EXPECT_DOUBLE_EQ(*back.policy.tau, 0.37);
  EXPECT_EQ(back.policy.split, "val");
  EXPECT_EQ(back.config.fusion.mode, FusionMode::weighted_sum);
  EXPECT_FALSE(back.backbone.parameters().at("backbone/cls_token").trainable());
  std::filesystem::remove(path);
}

TEST(Predict, ZeroLogitIsFakeAtHalf) {
  const auto p = predict(0.0, ThresholdPolicy::fixed_half());
  EXPECT_EQ(p.label, 1);
  EXPECT_DOUBLE_EQ(p.score, 0.5);
}

TEST(Predict, NegativeLogitIsReal) { EXPECT_EQ(predict(-3.0, ThresholdPolicy::fixed_half()).label, 0); }

TEST(Predict, CalibratedThreshold) {
  const auto p = predict(0.2, ThresholdPolicy::calibrated(0.7, "val"));
  EXPECT_NEAR(p.score, 1.0 / (1.0 + std::exp(-0.2)), 1e-15);
  EXPECT_EQ(p.label, 0);
}

TEST(Predict, UncalibratedPolicyIsStateError) {
  ThresholdPolicy p;
  p.kind = ThresholdKind::validation_eer;
  p.tau.reset();
  EXPECT_THROW(predict(0.0, p), StateError);
}

TEST(Predict, MonotoneInLogit) {
  Rng rng(32);
  const auto pol = ThresholdPolicy::calibrated(0.63, "val");
  for (int i = 0; i < 1000; ++i) {
    const double a = rng.normal(0, 4), b = a + rng.uniform(0, 2);
    ASSERT_LE(predict(a, pol).label, predict(b, pol).label);
    ASSERT_LE(predict(a, pol).score, predict(b, pol).score);
  }
}

TEST(Heads, ParsingRejectsUnknownNames) {
  EXPECT_EQ(parse_fusion_mode("concat"), FusionMode::concat);
  EXPECT_THROW(parse_fusion_mode("sum"), ConfigError);
  EXPECT_THROW(parse_token_scope("patches"), ConfigError);
  EXPECT_THROW(parse_head_kind("mlp3"), ConfigError);
}
