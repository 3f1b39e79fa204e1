#include <gtest/gtest.h>

#include "adpr/losses.hpp"
#include "adpr/model.hpp"
#include "support.hpp"

namespace adpr {
namespace {

using test::tiny_arch;
using test::uniform_values;

TEST(ParameterCount, DefaultConfigHandComputed) {
  // conv 448 + 4640 + 18496 + 36928; pr 2099200 + 2098176 + 16400;
  // sb 1049088 + 131328 + 2*257; fused 655872 + 8208.
  EXPECT_EQ(parameter_count(ArchConfig{}), 6119298u);
  EXPECT_EQ(build(ArchConfig{}, 1).parameter_count(), 6119298u);
}

TEST(ParameterCount, FormulaMatchesBuiltStoreProperty) {
  Rng rng(3);
  for (int trial = 0; trial < 25; ++trial) {
    ArchConfig a;
    a.height = 8 + 4 * rng.below(4);
    a.width = 8 + 4 * rng.below(4);
    a.backbone.clear();
    const std::size_t stages = rng.below(3);
    for (std::size_t s = 0; s < stages; ++s) a.backbone.push_back({1 + rng.below(6), 1 + 2 * rng.below(2), rng.below(2) == 1});
    a.pr_fc1_size = 1 + rng.below(20);
    a.pr_fc2_size = 1 + rng.below(20);
    a.sb_fc1_size = 1 + rng.below(20);
    a.sb_fc2_size = 1 + rng.below(20);
    a.jpr_fc_size = 1 + rng.below(20);
    a.classes = 1 + rng.below(10);
    a.attributes = 1 + rng.below(4);
    EXPECT_EQ(build(a, trial).parameter_count(), parameter_count(a)) << "trial " << trial;
  }
}

TEST(Build, DefaultShapes) {
  const ParamStore<float> p = build(ArchConfig{}, 7);
  EXPECT_EQ(p.at("pr_fc.fc1.weight").shape(), (Shape{ArchConfig{}.backbone_flat_dim(), 2048}));
  EXPECT_EQ(p.at("pr_fc.fc2.weight").shape(), (Shape{2048, 1024}));
  EXPECT_EQ(p.at("sb_fc.fc1.weight").shape(), (Shape{2048, 512}));
  EXPECT_EQ(p.at("sb_fc.fc2.weight").shape(), (Shape{512, 256}));
  EXPECT_EQ(p.at("jpr_fc.fc.weight").shape(), (Shape{1280, 512}));
  std::size_t heads = 0;
  for (const auto& e : p) {
    if (e.block == "sb_heads" && e.name.ends_with(".weight")) {
      ++heads;
      EXPECT_EQ(e.value.shape(), (Shape{256, 1}));
    }
  }
  EXPECT_EQ(heads, 2u);
}

TEST(Build, DeterministicPerSeedWithZeroBiases) {
  const ArchConfig a = tiny_arch();
  const ParamStore<float> x = build(a, 5), y = build(a, 5), z = build(a, 6);
  EXPECT_TRUE(x == y);
  EXPECT_FALSE(x == z);
  for (const auto& e : x) {
    ASSERT_TRUE(is_block_name(e.block));
    if (e.name.ends_with(".bias")) {
      for (float v : e.value.values()) EXPECT_EQ(v, 0.0f);
    }
  }
}

TEST(Build, WeightsWithinFanInBound) {
  const ArchConfig a = tiny_arch();
  const ParamStore<float> p = build(a, 5);
  const float bound = static_cast<float>(std::sqrt(a.init_scale / static_cast<double>(32)));
  for (float v : p.at("pr_fc.fc2.weight").values()) EXPECT_LE(std::abs(v), bound);
}

TEST(Build, RejectsInvalidConfig) {
  ArchConfig a = tiny_arch();
  a.jpr_fc_size = 0;
  EXPECT_THROW(build(a, 1), std::invalid_argument);
  a = tiny_arch();
  a.backbone[0].kernel = 2;
  EXPECT_THROW(build(a, 1), std::invalid_argument);
  ParamStore<float> p = build(tiny_arch(), 1);
  EXPECT_THROW(p.add("x", "not_a_block", Tensor<float>({1})), std::invalid_argument);
  EXPECT_THROW(p.add("jpr_softmax.bias", "jpr_softmax", Tensor<float>({1})), std::invalid_argument);
}

TEST(Forward, DefaultTapShapes) {
  const ArchConfig a;
  const auto taps = forward(build(a, 2), uniform_values<float>({2, 3, 64, 64}, 3));
  EXPECT_EQ(taps.pr_fc1.shape(), (Shape{2, 2048}));
  EXPECT_EQ(taps.pr_fc2.shape(), (Shape{2, 1024}));
  EXPECT_EQ(taps.pr_logits.shape(), (Shape{2, 16}));
  EXPECT_EQ(taps.sb_fc2.shape(), (Shape{2, 256}));
  EXPECT_EQ(taps.sb_logits.shape(), (Shape{2, 2}));
  EXPECT_EQ(taps.fused.shape(), (Shape{2, 1280}));
  EXPECT_EQ(taps.jpr_feat.shape(), (Shape{2, 512}));
  EXPECT_EQ(taps.jpr_logits.shape(), (Shape{2, 16}));
  EXPECT_TRUE(bitwise_equal(slice(taps.fused, 1, 0, 256), taps.sb_fc2));
  EXPECT_TRUE(bitwise_equal(slice(taps.fused, 1, 256, 1280), taps.pr_fc2));
}

TEST(Forward, RejectsWrongInputShape) {
  const ParamStore<float> p = build(tiny_arch(), 2);
  EXPECT_THROW(forward(p, Tensor<float>({1, 3, 8, 8})), ShapeError);
  EXPECT_THROW(forward(p, Tensor<float>({3, 16, 16})), ShapeError);
}

TEST(Forward, IdenticalImagesGiveIdenticalRows) {
  const ArchConfig a = tiny_arch();
  const Tensor<float> one = uniform_values<float>({1, 3, 16, 16}, 4);
  Tensor<float> batch({3, 3, 16, 16});
  std::copy_n(one.data(), one.size(), batch.data());
  std::copy_n(one.data(), one.size(), batch.data() + 2 * one.size());
  const Tensor<float> other = uniform_values<float>({1, 3, 16, 16}, 5);
  std::copy_n(other.data(), other.size(), batch.data() + one.size());
  const auto t = forward(build(a, 3), batch);
  for (const Tensor<float>* x : {&t.pr_fc1, &t.pr_logits, &t.sb_logits, &t.fused, &t.jpr_feat, &t.jpr_logits}) {
    EXPECT_TRUE(bitwise_equal(x->rows(0, 1), x->rows(2, 3)));
  }
}

TEST(Forward, BitIdenticalAcrossCallsAndCloseAcrossChunks) {
  const ParamStore<float> p = build(tiny_arch(), 3);
  const Tensor<float> x = uniform_values<float>({5, 3, 16, 16}, 6);
  const auto a = forward(p, x), b = forward(p, x);
  EXPECT_TRUE(bitwise_equal(a.jpr_logits, b.jpr_logits));
  EXPECT_TRUE(bitwise_equal(extract_embedding(p, x), a.jpr_feat));
  Tensor<float> chunked({5, 16});
  forward_chunked(p, x, 2, [&](const ForwardTaps<Tensor<float>>& t, std::size_t first) {
    std::copy_n(t.jpr_feat.data(), t.jpr_feat.size(), chunked.data() + first * 16);
  });
  // GEMM blocking depends on the batch size, so chunks agree to float rounding only.
  for (std::size_t i = 0; i < chunked.size(); ++i) EXPECT_NEAR(chunked[i], a.jpr_feat[i], 1e-5f * (1 + std::abs(a.jpr_feat[i])));
}

TEST(Forward, ZeroingSoftBiometricFeaturesOnlyMovesFusedHead) {
  const ParamStore<float> p = build(tiny_arch(), 8);
  const Tensor<float> x = uniform_values<float>({3, 3, 16, 16}, 9);
  const auto full = forward(p, x);
  const auto ablated = forward(p, x, {.zero_sb_features = true});
  EXPECT_TRUE(bitwise_equal(full.pr_logits, ablated.pr_logits));
  EXPECT_TRUE(bitwise_equal(full.sb_logits, ablated.sb_logits));
  EXPECT_FALSE(full.jpr_logits == ablated.jpr_logits);
  const Tensor<float> sb_part = slice(ablated.fused, 1, 0, 8);
  for (float v : sb_part.values()) EXPECT_EQ(v, 0.0f);
}

TEST(Forward, AttributeLossReachesSharedTrunkButNotRecognitionHead) {
  const ParamStore<double> p = build(tiny_arch(), 10).cast<double>();
  const Tensor<double> x = uniform_values<double>({2, 3, 16, 16}, 11);
  const Tensor<double> attrs = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
  Tape<double> tape;
  const auto bound = bind_parameters(tape, p);
  const auto taps = forward(tape, p, bound, tape.constant(x));
  tape.backward(e2(tape, taps.sb_logits, attrs).var);
  auto norm = [&](const std::string& name) {
    double s = 0.0;
    const Tensor<double> g = tape.grad(bound[p.index_of(name)]);
    for (double v : g.values()) s += std::abs(v);
    return s;
  };
  EXPECT_EQ(norm("pr_fc.fc2.weight"), 0.0);
  EXPECT_EQ(norm("pr_softmax.weight"), 0.0);
  EXPECT_EQ(norm("jpr_fc.fc.weight"), 0.0);
  EXPECT_GT(norm("pr_fc.fc1.weight"), 0.0);
  EXPECT_GT(norm("backbone.conv0.weight"), 0.0);
}

TEST(Forward, FrozenBlocksGetNoGradient) {
  const ParamStore<float> p = build(tiny_arch(), 12);
  Tape<float> tape;
  const auto bound = bind_parameters(tape, p, {"backbone", "pr_fc"});
  const auto taps = forward(tape, p, bound, tape.constant(uniform_values<float>({2, 3, 16, 16}, 13)));
  const std::vector<std::size_t> labels = {0, 1};
  tape.backward(e1(tape, taps.jpr_logits, labels).var);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool frozen = p[i].block == "backbone" || p[i].block == "pr_fc";
    EXPECT_EQ(tape.has_grad(bound[i]), !frozen && p[i].block != "pr_softmax" && p[i].block != "sb_heads") << p[i].name;
  }
}

TEST(ParamStore, CastRoundTripAndEquality) {
  const ParamStore<float> p = build(tiny_arch(), 14);
  EXPECT_TRUE(p.cast<double>().cast<float>() == p);
  ParamStore<float> q = p;
  q.at("jpr_softmax.bias")[0] = -0.0f;
  EXPECT_FALSE(q == p);
  EXPECT_THROW(p.at("missing"), std::out_of_range);
  EXPECT_EQ(p.index_of("missing"), ParamStore<float>::npos);
}

}  // namespace
}  // namespace adpr
