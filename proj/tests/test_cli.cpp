#include <cstdlib>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "adpr/cli.hpp"
#include "support.hpp"

namespace adpr {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result cli(std::vector<std::string> args) {
  args.insert(args.begin(), "adpr");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

nlohmann::json last_event(const std::string& out) {
  std::istringstream in(out);
  std::string line, last;
  while (std::getline(in, line)) {
    if (!line.empty()) last = line;
  }
  return nlohmann::json::parse(last);
}

class CliTest : public ::testing::Test {
 protected:
  CliTest() : dir_("cli") {
    std::ofstream(dir_ / "run.json") << R"({
      "seed": 3,
      "data": {"synth": {"C": 4, "images_per_identity": 6, "H": 16, "W": 16}},
      "arch": {"backbone": [{"out_channels": 4}, {"out_channels": 8}],
               "pr_fc1_size": 32, "pr_fc2_size": 16, "sb_fc1_size": 16, "sb_fc2_size": 8, "jpr_fc_size": 16},
      "stages": [{"epochs": 1, "batch_size": 4}, {"epochs": 1, "batch_size": 4}, {"epochs": 1, "batch_size": 4}],
      "siamese": {"epochs": 1, "pair_batch_size": 4, "sweep": [1]}
    })";
  }

  std::string config() const { return (dir_ / "run.json").string(); }
  std::string out(const std::string& name) const { return (dir_ / name).string(); }

  test::TempDir dir_;
};

TEST_F(CliTest, GenDataIsDeterministic) {
  ASSERT_EQ(cli({"gen-data", "--config", config(), "--out", out("a")}).code, 0);
  ASSERT_EQ(cli({"gen-data", "--config", config(), "--out", out("b")}).code, 0);
  const std::string manifest = slurp(dir_ / "a" / "manifest.csv");
  EXPECT_FALSE(manifest.empty());
  EXPECT_EQ(manifest, slurp(dir_ / "b" / "manifest.csv"));
  std::size_t images = 0;
  for (const auto& e : fs::directory_iterator(dir_ / "a" / "images")) {
    EXPECT_EQ(slurp(e.path()), slurp(dir_ / "b" / "images" / e.path().filename())) << e.path();
    ++images;
  }
  EXPECT_EQ(images, 24u);
  const nlohmann::json m = nlohmann::json::parse(slurp(dir_ / "a" / "run_manifest.json"));
  EXPECT_EQ(m["command"], "gen-data");
  EXPECT_EQ(m["config_sha256"].get<std::string>().size(), 64u);
  EXPECT_FALSE(fs::exists(dir_ / "a" / ".adpr.lock"));
}

TEST_F(CliTest, StagesMustRunInOrder) {
  const Result fresh3 = cli({"train", "--config", config(), "--stage", "3", "--out", out("s3")});
  EXPECT_NE(fresh3.code, 0);
  EXPECT_NE(fresh3.err.find("completed stage 2"), std::string::npos) << fresh3.err;

  ASSERT_EQ(cli({"train", "--config", config(), "--stage", "1", "--out", out("s1")}).code, 0);
  const std::string ck1 = out("s1") + "/stage1.ckpt";
  EXPECT_EQ(load_checkpoint(ck1).stage, 1);
  const Result skip = cli({"train", "--config", config(), "--stage", "3", "--checkpoint", ck1, "--out", out("bad")});
  EXPECT_NE(skip.code, 0);
  EXPECT_NE(skip.err.find("checkpoint has stage 1"), std::string::npos) << skip.err;

  const Result s2 = cli({"train", "--config", config(), "--stage", "2", "--checkpoint", ck1, "--out", out("s2")});
  ASSERT_EQ(s2.code, 0) << s2.err;
  EXPECT_EQ(last_event(s2.out)["stage"], 2);
  const Checkpoint ck2 = load_checkpoint(out("s2") + "/stage2.ckpt");
  EXPECT_EQ(ck2.stage, 2);
  EXPECT_TRUE(ck2.optimizer.has_value());

  const Result ev = cli({"eval", "--config", config(), "--checkpoint", out("s2") + "/stage2.ckpt", "--out", out("ev")});
  ASSERT_EQ(ev.code, 0) << ev.err;
  const nlohmann::json summary = nlohmann::json::parse(slurp(dir_ / "ev" / "summary.json"));
  for (const char* key : {"auc", "eer", "rank1"}) EXPECT_TRUE(summary.contains(key)) << key;
  EXPECT_GE(summary["auc"].get<double>(), 0.0);
  EXPECT_TRUE(fs::exists(dir_ / "ev" / "roc.csv"));
  EXPECT_TRUE(fs::exists(dir_ / "ev" / "scores.csv"));

  const Result roc = cli({"export-roc", "--scores", out("ev") + "/scores.csv", "--out", out("roc")});
  ASSERT_EQ(roc.code, 0) << roc.err;
  EXPECT_EQ(last_event(roc.out)["auc"], summary["auc"]);

  const Result wrong_mode =
      cli({"eval", "--config", config(), "--checkpoint", out("s2") + "/stage2.ckpt", "--mode", "open", "--out", out("ev2")});
  EXPECT_NE(wrong_mode.code, 0);
}

TEST_F(CliTest, RepeatedTrainingIsBitIdentical) {
  ASSERT_EQ(cli({"train", "--config", config(), "--stage", "1", "--out", out("x")}).code, 0);
  ASSERT_EQ(cli({"train", "--config", config(), "--stage", "1", "--out", out("y")}).code, 0);
  EXPECT_EQ(slurp(dir_ / "x" / "stage1.ckpt"), slurp(dir_ / "y" / "stage1.ckpt"));
}

TEST_F(CliTest, ErrorsReturnNonzero) {
  EXPECT_NE(cli({"train", "--config", config(), "--stage", "1", "--bogus", "--out", out("u")}).code, 0);
  EXPECT_NE(cli({}).code, 0);
  EXPECT_NE(cli({"eval", "--config", config(), "--out", out("u")}).code, 0);  // missing --checkpoint
  EXPECT_NE(cli({"gen-data", "--config", config()}).code, 0);                 // no output directory
  EXPECT_NE(cli({"train", "--config", config(), "--stage", "1", "--mode", "sideways", "--out", out("u")}).code, 0);
  EXPECT_NE(cli({"run-experiment", "--config", config(), "--experiment", "nope", "--out", out("u")}).code, 0);
  std::ofstream(dir_ / "bad.json") << R"({"sed": 1})";
  const Result bad = cli({"gen-data", "--config", out("bad.json"), "--out", out("u")});
  EXPECT_NE(bad.code, 0);
  EXPECT_NE(bad.err.find("'sed'"), std::string::npos);
}

TEST_F(CliTest, LockFileBlocksConcurrentRun) {
  fs::create_directories(dir_ / "locked");
  std::ofstream(dir_ / "locked" / ".adpr.lock") << "";
  const Result r = cli({"gen-data", "--config", config(), "--out", out("locked")});
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("locked"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir_ / "locked" / "manifest.csv"));
  EXPECT_TRUE(fs::exists(dir_ / "locked" / ".adpr.lock"));
}

TEST_F(CliTest, ToolBinaryExitCodes) {
  const std::string tool = ADPR_TOOL_PATH;
  EXPECT_EQ(std::system((tool + " --version > /dev/null").c_str()), 0);
  EXPECT_NE(std::system((tool + " train --no-such-flag > /dev/null 2>&1").c_str()), 0);
  EXPECT_EQ(std::system((tool + " gen-data --config " + config() + " --out " + out("bin") + " > /dev/null").c_str()), 0);
  EXPECT_TRUE(fs::exists(dir_ / "bin" / "manifest.csv"));
}

}  // namespace
}  // namespace adpr
