#include <gtest/gtest.h>

#include "adpr/siamese.hpp"
#include "support.hpp"

namespace adpr {
namespace {

using test::tiny_arch;
using test::tiny_synth;

struct OpenSets {
  PreparedSet train;
  PreparedSet val;
};

OpenSets open_sets(double noise = 0.5, std::size_t classes = 8, std::size_t per = 6) {
  SynthSpec s = tiny_synth(classes, per);
  s.noise_std = noise;
  const DatasetSplit sp = split_open_world(generate_synthetic(s, 3), 0.5, 4);
  const NormalizationStats st = normalization_stats(sp.train);
  return {prepare(sp.train, st), prepare(sp.eval, st)};
}

SiameseConfig small_cfg(std::size_t epochs = 2) {
  SiameseConfig c;
  c.epochs = epochs;
  c.pair_batch_size = 8;
  c.learning_rate = 0.01;
  c.seed = 5;
  return c;
}

TEST(SiameseConfig, DefaultsAndValidation) {
  const SiameseConfig d;
  EXPECT_EQ(d.margin, 1.0);
  EXPECT_EQ(d.sweep, (std::vector<double>{0.5, 1, 2, 3, 4, 5}));
  EXPECT_EQ(d.genuine_fraction, 0.5);
  EXPECT_EQ(d.contrastive_form, ContrastiveForm::paper);
  EXPECT_FALSE(d.normalize_embeddings);
  EXPECT_FALSE(d.add_e3);
  EXPECT_TRUE(d.frozen_blocks().contains("pr_softmax"));
  SiameseConfig bad;
  bad.sweep = {};
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = SiameseConfig{};
  bad.sweep = {1.0, 0.0};
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = SiameseConfig{};
  bad.margin = -1;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(TrainSiamese, SharedBranchesAndFrozenBlocks) {
  const OpenSets sets = open_sets();
  ParamStore<float> p = build(tiny_arch(4), 6);
  const ParamStore<float> before = p;
  train_siamese(p, sets.train, small_cfg());
  // One store serves both branches: the same image embeds identically through either side.
  const Tensor<float> img = sets.train.images.rows(0, 1).reshaped({3, 16, 16});
  EXPECT_EQ(verify_pair(p, img, img), 0.0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool same = bitwise_equal(p[i].value, before[i].value);
    if (p[i].block == "pr_softmax" || p[i].block == "sb_heads" || p[i].block == "jpr_softmax") {
      EXPECT_TRUE(same) << p[i].name;
    }
  }
  EXPECT_FALSE(bitwise_equal(p.at("jpr_fc.fc.weight"), before.at("jpr_fc.fc.weight")));
}

TEST(TrainSiamese, DeterministicForFixedSeed) {
  const OpenSets sets = open_sets();
  ParamStore<float> a = build(tiny_arch(4), 6), b = build(tiny_arch(4), 6);
  const auto la = train_siamese(a, sets.train, small_cfg());
  const auto lb = train_siamese(b, sets.train, small_cfg());
  EXPECT_TRUE(a == b);
  EXPECT_EQ(la.back().loss, lb.back().loss);
}

TEST(TrainSiamese, NoiseFreeDataPullsGenuinePairsTogether) {
  const OpenSets sets = open_sets(0.0);
  ParamStore<float> p = build(tiny_arch(4), 7);
  SiameseConfig c = small_cfg(12);
  c.margin = 2.0;
  const auto logs = train_siamese(p, sets.train, c);
  EXPECT_LT(logs.back().genuine_sq_dist, logs.front().genuine_sq_dist);
  EXPECT_LT(logs.back().loss, logs.front().loss);

  // Separation on held-out pairs of the training identities.
  double gen = 0, imp = 0;
  std::size_t ng = 0, ni = 0;
  for (const Pair& pr : all_pairs(sets.train.labels)) {
    const double s = verify_pair(p, sets.train.images.rows(pr.i, pr.i + 1).reshaped({3, 16, 16}),
                                 sets.train.images.rows(pr.j, pr.j + 1).reshaped({3, 16, 16}));
    (pr.c == 0 ? gen : imp) += s;
    ++(pr.c == 0 ? ng : ni);
  }
  EXPECT_GT(gen / static_cast<double>(ng), imp / static_cast<double>(ni));
}

TEST(TrainSiamese, RejectsSingleIdentity) {
  const PreparedSet one = test::tiny_prepared(1, 4);
  ParamStore<float> p = build(tiny_arch(1), 1);
  EXPECT_THROW(train_siamese(p, one, small_cfg()), std::invalid_argument);
}

TEST(VerifyPair, SymmetricExactlyProperty) {
  const OpenSets sets = open_sets();
  const ParamStore<float> p = build(tiny_arch(4), 8);
  for (std::size_t i = 0; i + 1 < sets.val.size(); i += 3) {
    const Tensor<float> a = sets.val.images.rows(i, i + 1).reshaped({3, 16, 16});
    const Tensor<float> b = sets.val.images.rows(i + 1, i + 2).reshaped({3, 16, 16});
    EXPECT_EQ(verify_pair(p, a, b), verify_pair(p, b, a));
    EXPECT_LE(verify_pair(p, a, b), 0.0);
    EXPECT_EQ(verify_pair(p, a, a), 0.0);
    EXPECT_EQ(verify_pair(p, a, a, true), 0.0);
  }
  EXPECT_THROW(verify_pair(p, sets.val.images, sets.val.images), ShapeError);
}

TEST(AllPairScores, MatchesVerifyPair) {
  const OpenSets sets = open_sets();
  const ParamStore<float> p = build(tiny_arch(4), 8);
  const ScoreSet scores = all_pair_scores(p, sets.val);
  const PairBatch pairs = all_pairs(sets.val.labels);
  ASSERT_EQ(scores.size(), pairs.size());
  for (std::size_t k = 0; k < pairs.size(); k += 7) {
    const double v = verify_pair(p, sets.val.images.rows(pairs[k].i, pairs[k].i + 1).reshaped({3, 16, 16}),
                                 sets.val.images.rows(pairs[k].j, pairs[k].j + 1).reshaped({3, 16, 16}));
    EXPECT_NEAR(scores[k].score, v, 1e-5 * (1.0 + std::abs(v)));
    EXPECT_EQ(scores[k].genuine, pairs[k].c == 0);
  }
}

TEST(MarginSweep, SingleMarginIsReturned) {
  const OpenSets sets = open_sets();
  SiameseConfig c = small_cfg(1);
  c.sweep = {2.5};
  const auto r = margin_sweep(build(tiny_arch(4), 9), sets.train, sets.val, c);
  EXPECT_EQ(r.best_margin, 2.5);
  ASSERT_EQ(r.table.size(), 1u);
}

TEST(MarginSweep, BestIsTableMinimumAndTiesGoToSmallerMargin) {
  const OpenSets sets = open_sets();
  SiameseConfig c = small_cfg(1);
  c.sweep = {3.0, 0.5, 1.0};
  const auto r = margin_sweep(build(tiny_arch(4), 9), sets.train, sets.val, c);
  double best = 1.0;
  for (const auto& row : r.table) best = std::min(best, row.eer);
  for (const auto& row : r.table) {
    if (row.margin == r.best_margin) {
      EXPECT_EQ(row.eer, best);
    }
  }
  // A step too small to move any float weight leaves every margin at the same EER.
  c.learning_rate = 1e-30;
  const auto tie = margin_sweep(build(tiny_arch(4), 9), sets.train, sets.val, c);
  EXPECT_EQ(tie.table[0].eer, tie.table[1].eer);
  EXPECT_EQ(tie.table[1].eer, tie.table[2].eer);
  EXPECT_EQ(tie.best_margin, 0.5);
}

TEST(MarginSweep, RunsFromSameStartDifferingOnlyByMargin) {
  const OpenSets sets = open_sets();
  SiameseConfig c = small_cfg(1);
  c.sweep = {1.0, 1.0};
  const auto r = margin_sweep(build(tiny_arch(4), 9), sets.train, sets.val, c);
  EXPECT_EQ(r.table[0].eer, r.table[1].eer);
  EXPECT_EQ(r.table[0].auc, r.table[1].auc);
}

TEST(MarginSweep, RejectsOverlappingIdentities) {
  const OpenSets sets = open_sets();
  EXPECT_THROW(margin_sweep(build(tiny_arch(4), 9), sets.train, sets.train, small_cfg(1)), std::invalid_argument);
}

TEST(MarginSweep, CsvHasHeaderAndRows) {
  test::TempDir dir("margin");
  write_margin_csv((dir / "m.csv").string(), {{0.5, 0.25, 0.8}, {1, 0.125, 0.9}});
  std::ifstream f(dir / "m.csv");
  std::string line;
  std::getline(f, line);
  EXPECT_EQ(line, "margin,eer,auc");
  std::size_t rows = 0;
  while (std::getline(f, line)) ++rows;
  EXPECT_EQ(rows, 2u);
}

}  // namespace
}  // namespace adpr
