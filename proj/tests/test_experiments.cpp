#include <fstream>

#include <gtest/gtest.h>

#include "adpr/experiments.hpp"
#include "support.hpp"

namespace adpr {
namespace {

using test::tiny_arch;
using test::tiny_synth;

ExperimentSpec tiny_spec() {
  ExperimentSpec s;
  s.synth = tiny_synth(4, 6);
  s.arch = tiny_arch();
  for (int st = 1; st <= 3; ++st) {
    StageConfig& c = s.pipeline.stages[static_cast<std::size_t>(st - 1)];
    c = StageConfig::for_stage(st, 1, static_cast<std::uint64_t>(st));
    c.batch_size = 4;
  }
  s.siamese.epochs = 1;
  s.siamese.pair_batch_size = 4;
  s.siamese.sweep = {1.0};
  s.open_train_identities = 3;
  s.open_eval_identities = 2;
  s.open_val_identities = 2;
  return s;
}

TrendReport report(const std::string& name, std::vector<TrendRow> rows, double tol = 0.0) {
  TrendReport r;
  r.experiment = name;
  r.rows = std::move(rows);
  r.tolerance = tol;
  finalize(r);
  return r;
}

TEST(Statistics, SampleStdAndVariantKeys) {
  const TrendReport r = report("fusion_gain", {{1, "", {{"eer_pr", 0.2}, {"eer_jpr", 0.1}}},
                                               {2, "", {{"eer_pr", 0.4}, {"eer_jpr", 0.3}}},
                                               {3, "", {{"eer_pr", 0.6}, {"eer_jpr", 0.2}}}});
  EXPECT_NEAR(r.means.at("eer_pr"), 0.4, 1e-12);
  EXPECT_NEAR(r.stds.at("eer_pr"), 0.2, 1e-12);  // n-1 denominator
  EXPECT_NEAR(r.means.at("eer_jpr"), 0.2, 1e-12);
  const TrendReport one = report("open_world", {{1, "", {{"auc", 0.9}}}}, 0.8);
  EXPECT_EQ(one.stds.at("auc"), 0.0);
  const TrendReport v = report("attr_count", {{1, "both", {{"eer", 0.1}}},
                                              {1, "attr1_only", {{"eer", 0.2}}},
                                              {1, "attr2_only", {{"eer", 0.3}}}}, 0.02);
  EXPECT_EQ(v.means.count("both/eer"), 1u);
}

TEST(Verdict, RegisteredPredicates) {
  EXPECT_EQ(report("fusion_gain", {{1, "", {{"eer_pr", 0.2}, {"eer_jpr", 0.2}}}}).verdict, true);
  EXPECT_EQ(report("fusion_gain", {{1, "", {{"eer_pr", 0.2}, {"eer_jpr", 0.21}}}}).verdict, false);
  EXPECT_EQ(report("attr_gain", {{1, "", {{"attr_acc_sb", 0.8}, {"attr_acc_jpr", 0.8}}}}).verdict, true);
  EXPECT_EQ(report("attr_gain", {{1, "", {{"attr_acc_sb", 0.8}, {"attr_acc_jpr", 0.7}}}}).verdict, false);
  EXPECT_EQ(report("open_world", {{1, "", {{"auc", 0.8}}}}, 0.8).verdict, true);
  EXPECT_EQ(report("open_world", {{1, "", {{"auc", 0.79}}}}, 0.8).verdict, false);
}

TEST(Verdict, AttrCountToleranceIsSymmetric) {
  auto run = [](double both, double a1, double a2) {
    return report("attr_count", {{1, "both", {{"eer", both}}}, {1, "attr1_only", {{"eer", a1}}},
                                 {1, "attr2_only", {{"eer", a2}}}}, 0.02)
        .verdict;
  };
  EXPECT_EQ(run(0.115, 0.1, 0.3), true);   // within tolerance above the best single variant
  EXPECT_EQ(run(0.125, 0.1, 0.3), false);  // beyond it
  EXPECT_EQ(run(0.05, 0.3, 0.1), true);
}

TEST(Verdict, ControlIsNotAssertedAndUnknownIsRejected) {
  TrendReport r;
  r.experiment = "fusion_gain";
  r.control = true;
  r.rows = {{1, "", {{"eer_pr", 0.1}, {"eer_jpr", 0.9}}}};
  finalize(r);
  EXPECT_FALSE(r.verdict.has_value());
  EXPECT_EQ(nlohmann::json(r)["verdict"], "not_asserted");
  TrendReport u;
  u.experiment = "mystery";
  u.rows = {{1, "", {{"x", 1.0}}}};
  EXPECT_THROW(finalize(u), std::invalid_argument);
  TrendReport missing;
  missing.experiment = "fusion_gain";
  missing.rows = {{1, "", {{"eer_pr", 0.1}}}};
  EXPECT_THROW(finalize(missing), std::invalid_argument);
}

TEST(Verdict, RecomputableFromStoredTable) {
  const TrendReport r = report("fusion_gain", {{1, "", {{"eer_pr", 0.3}, {"eer_jpr", 0.1}}},
                                               {2, "", {{"eer_pr", 0.1}, {"eer_jpr", 0.2}}}});
  TrendReport copy;
  copy.experiment = r.experiment;
  copy.rows = r.rows;
  finalize(copy);
  EXPECT_EQ(copy.verdict, r.verdict);
  EXPECT_EQ(copy.means, r.means);
}

TEST(Experiments, Rejections) {
  ExperimentSpec s = tiny_spec();
  EXPECT_THROW(exp_fusion_gain(s, {}), std::invalid_argument);
  s.synth.attributes = 0;
  EXPECT_THROW(exp_attr_gain(s, {1}), std::invalid_argument);
  s = tiny_spec();
  s.synth.attributes = 1;
  EXPECT_THROW(exp_attr_count(s, {1}), std::invalid_argument);
  EXPECT_THROW(run_experiment("nope", tiny_spec(), {1}), std::invalid_argument);
  s = tiny_spec();
  s.open_val_identities = 1;
  EXPECT_THROW(exp_open_world(s, {1}), std::invalid_argument);
}

TEST(Experiments, FusionAndAttrGainTinyRun) {
  const ExperimentSpec s = tiny_spec();
  const auto runs = run_fusion_seeds(s, {1, 2});
  const TrendReport f = fusion_gain_report(s, runs);
  EXPECT_EQ(f.rows.size(), 2u);
  EXPECT_TRUE(f.verdict.has_value());
  EXPECT_TRUE(f.details.contains("eer_difference_pr_minus_jpr"));
  EXPECT_EQ(f.rocs.size(), 4u);
  const TrendReport a = attr_gain_report(s, runs);
  EXPECT_EQ(a.rows.front().metrics.count("attr1_acc_sb"), 1u);
  EXPECT_EQ(a.rows.front().metrics.count("attr2_acc_jpr"), 1u);
  // Same seeds reproduce the report bit-exactly.
  EXPECT_EQ(nlohmann::json(exp_fusion_gain(s, {1, 2})).dump(), nlohmann::json(f).dump());

  ExperimentSpec control = s;
  control.synth.attribute_signal = 0.0;
  EXPECT_FALSE(exp_fusion_gain(control, {1}).verdict.has_value());
}

TEST(Experiments, AttrCountTinyRunHasFourVariantsPerSeed) {
  const TrendReport r = exp_attr_count(tiny_spec(), {3});
  ASSERT_EQ(r.rows.size(), 4u);
  std::set<std::string> variants;
  for (const auto& row : r.rows) variants.insert(row.variant);
  EXPECT_EQ(variants, (std::set<std::string>{"pr_only", "attr1_only", "attr2_only", "both"}));
  EXPECT_EQ(r.tolerance, 0.02);
  EXPECT_TRUE(r.verdict.has_value());
}

TEST(Experiments, OpenWorldTinyRun) {
  const ExperimentSpec s = tiny_spec();
  const OpenWorldData d = open_world_data(s, 4);
  EXPECT_EQ(d.train.classes, 3u);
  EXPECT_EQ(d.eval.classes, 2u);
  EXPECT_EQ(d.val.classes, 2u);
  EXPECT_NO_THROW(require_identity_disjoint(d.train.source_identity, d.eval.source_identity));
  EXPECT_EQ(d.gallery.size() + d.probes.size(), d.eval.size());

  const TrendReport r = exp_open_world(s, {4});
  ASSERT_EQ(r.rows.size(), 1u);
  EXPECT_EQ(r.rows[0].metrics.at("margin"), 1.0);
  EXPECT_TRUE(r.details.contains("margin_sweeps"));
  EXPECT_EQ(r.tolerance, 0.8);
}

TEST(Reports, JsonCsvAndRocFiles) {
  test::TempDir dir("report");
  TrendReport r = report("fusion_gain", {{1, "", {{"eer_pr", 0.3}, {"eer_jpr", 0.1}}}});
  r.rocs["seed1_pr"] = {{0, 0}, {1, 1}};
  write_report(dir.path(), r);
  std::ifstream j(dir / "fusion_gain.json");
  const nlohmann::json parsed = nlohmann::json::parse(j);
  EXPECT_EQ(parsed["verdict"], "pass");
  EXPECT_EQ(parsed["rows"].size(), 1u);
  std::ifstream c(dir / "fusion_gain.csv");
  std::string header;
  std::getline(c, header);
  EXPECT_EQ(header, "seed,variant,eer_jpr,eer_pr");
  EXPECT_TRUE(std::filesystem::exists(dir / "roc_fusion_gain_seed1_pr.csv"));
  EXPECT_EQ(experiment_names().size(), 4u);
}

}  // namespace
}  // namespace adpr
