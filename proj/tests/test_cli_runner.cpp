#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include "weckd/checkpoint.hpp"
#include "weckd/config.hpp"
#include "weckd/data.hpp"
#include "weckd/errors.hpp"
#include "weckd/run.hpp"

using namespace weckd;
namespace fs = std::filesystem;

namespace {

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "weckd");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return run::main(static_cast<int>(argv.size()), argv.data());
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("weckd_cli_" + std::to_string(::getpid()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  // Small IDX-backed experiment so eval can read the same pixels.
  fs::path tiny_config(std::size_t epochs = 3) {
    EXPECT_EQ(cli({"gen-data", "--out", (dir_ / "data" / "tiny").string(), "--n", "200", "--classes", "4", "--size",
                   "8", "--noise", "0.1", "--seed", "1"}),
              0);
    const config::json j = {
        {"dataset",
         {{"idx",
           {{"images", (dir_ / "data" / "tiny-images.idx3").string()},
            {"labels", (dir_ / "data" / "tiny-labels.idx1").string()}}}}},
        {"backbone",
         {{"input", {{"height", 8}, {"width", 8}, {"channels", 1}}},
          {"conv_blocks", {{{"filters", 4}}}},
          {"fc_width", 8},
          {"num_classes", 4}}},
        {"train", {{"max_epochs", epochs}, {"learning_rate", 0.05}, {"momentum", 0.5}, {"batch_size", 8}}},
        {"output_dir", (dir_ / "run").string()}};
    const fs::path p = dir_ / "tiny.json";
    run::write_text(p, j.dump(2));
    return p;
  }

  fs::path dir_;
};

}  // namespace

TEST(ParseConfig, MinimalSyntheticTakesDefaults) {
  const auto c = config::parse_config_text(R"({"dataset": {"synthetic": {}}})");
  ASSERT_TRUE(c.synthetic);
  EXPECT_FALSE(c.idx);
  EXPECT_EQ(c.train.learning_rate, 1e-3);
  EXPECT_EQ(c.train.batch_size, 32u);
  EXPECT_EQ(c.train.max_epochs, 50u);
  EXPECT_EQ(c.train.patience, 10u);
  EXPECT_EQ(c.train.lr_decay_factor, 0.1);
  EXPECT_EQ(c.train.distill.alpha, 0.7);
  EXPECT_EQ(c.synthetic->n, 1000u);
  EXPECT_EQ(c.backbone.num_classes, 4u);
  EXPECT_EQ(c.hyperopt.n_trials, 5u);
}

TEST(ParseConfig, AlphaOutOfRangeNamesPath) {
  try {
    config::parse_config_text(R"({"dataset": {"synthetic": {}}, "distill": {"alpha": 1.2}})");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.path(), "distill.alpha");
  }
}

TEST(ParseConfig, UnknownKeyRejected) {
  try {
    config::parse_config_text(R"({"dataset": {"synthetic": {}}, "train": {"learnig_rate": 0.1}})");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.path(), "train.learnig_rate");
  }
}

TEST(ParseConfig, MalformedAndAmbiguousSources) {
  EXPECT_THROW(config::parse_config_text("{"), ConfigError);
  EXPECT_THROW(config::parse_config_text(R"({"partition": {}})"), ConfigError);
  EXPECT_THROW(
      config::parse_config_text(R"({"dataset": {"synthetic": {}, "idx": {"images": "a", "labels": "b"}}})"),
      ConfigError);
  try {
    config::parse_config_text(R"({"dataset": {"idx": {"images": "a", "labels": "b"}}})");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.path(), "backbone.num_classes");
  }
}

TEST(ParseConfig, CanonicalRoundTrip) {
  const auto c = config::parse_config_text(R"({
    "dataset": {"synthetic": {"n": 300, "classes": 3, "seed": 4}},
    "train": {"momentum": 0.9, "stage_attention": [true, true, false], "augment": ["hflip"]},
    "distill": {"alpha": 0.55, "t_max": 3.5},
    "repeat_seeds": [1, 2, 3]
  })");
  const auto again = config::parse_config_text(config::to_json(c).dump());
  EXPECT_TRUE(c == again);
  EXPECT_EQ(config::to_json(c).dump(), config::to_json(again).dump());
}

TEST_F(CliTest, GenDataRoundTripAndDeterminism) {
  const fs::path a = dir_ / "a", b = dir_ / "b";
  ASSERT_EQ(cli({"gen-data", "--out", a.string(), "--n", "400", "--classes", "4", "--seed", "3"}), 0);
  ASSERT_EQ(cli({"gen-data", "--out", b.string(), "--n", "400", "--classes", "4", "--seed", "3"}), 0);
  const auto ds = data::load_idx(a.string() + "-images.idx3", a.string() + "-labels.idx1");
  EXPECT_EQ(ds.size(), 400u);
  EXPECT_EQ(ds.num_classes, 4u);
  EXPECT_EQ(run::read_text(a.string() + "-images.idx3"), run::read_text(b.string() + "-images.idx3"));
  EXPECT_EQ(run::read_text(a.string() + "-labels.idx1"), run::read_text(b.string() + "-labels.idx1"));
}

TEST_F(CliTest, GenDataTooManyClassesIsUsageError) {
  EXPECT_EQ(cli({"gen-data", "--out", (dir_ / "x").string(), "--classes", "9"}), run::kExitUsage);
}

TEST_F(CliTest, TrainWritesRunDirectory) {
  const fs::path cfg = tiny_config();
  ASSERT_EQ(cli({"train", "--config", cfg.string()}), 0);
  const fs::path r = dir_ / "run";
  for (const char* f : {"m1.wckd", "m2.wckd", "m3.wckd", run::kMetricsFile, run::kProgressionFile, run::kTimingFile,
                        run::kConfigFile}) {
    EXPECT_TRUE(fs::exists(r / f)) << f;
  }
  EXPECT_FALSE(fs::exists(r / run::kErrorFile));
  for (const char* f : {"m1.wckd", "m2.wckd", "m3.wckd"}) EXPECT_NO_THROW(load_checkpoint(r / f));
  const auto metrics = config::json::parse(run::read_text(r / run::kMetricsFile));
  EXPECT_EQ(metrics.at("stages").size(), 3u);
  EXPECT_TRUE(metrics.at("theory").contains("risks"));
  const std::string csv = run::read_text(r / run::kProgressionFile);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "dataset,stage,train_acc,test_acc,train_loss,test_loss,delta_prev");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  // The snapshot alone reproduces the run.
  EXPECT_NO_THROW(config::parse_config(r / run::kConfigFile));
}

TEST_F(CliTest, TrainTwiceGivesIdenticalMetrics) {
  const fs::path cfg = tiny_config();
  ASSERT_EQ(cli({"train", "--config", cfg.string(), "--out-dir", (dir_ / "a").string()}), 0);
  ASSERT_EQ(cli({"train", "--config", cfg.string(), "--out-dir", (dir_ / "b").string()}), 0);
  EXPECT_EQ(run::read_text(dir_ / "a" / run::kMetricsFile), run::read_text(dir_ / "b" / run::kMetricsFile));
  EXPECT_EQ(run::read_text(dir_ / "a" / "m3.wckd"), run::read_text(dir_ / "b" / "m3.wckd"));
}

TEST_F(CliTest, SnapshotReproducesRun) {
  const fs::path cfg = tiny_config();
  ASSERT_EQ(cli({"train", "--config", cfg.string()}), 0);
  ASSERT_EQ(cli({"train", "--config", (dir_ / "run" / run::kConfigFile).string(), "--out-dir",
                 (dir_ / "again").string()}),
            0);
  EXPECT_EQ(run::read_text(dir_ / "run" / run::kMetricsFile), run::read_text(dir_ / "again" / run::kMetricsFile));
}

TEST_F(CliTest, EvalOnTestIndicesMatchesMetrics) {
  const fs::path cfg = tiny_config();
  ASSERT_EQ(cli({"train", "--config", cfg.string()}), 0);
  const fs::path r = dir_ / "run";
  const auto ev = run::evaluate_checkpoint(r / "m3.wckd", dir_ / "data" / "tiny-images.idx3",
                                           dir_ / "data" / "tiny-labels.idx1", r / run::kTestIndicesFile);
  const auto metrics = config::json::parse(run::read_text(r / run::kMetricsFile));
  EXPECT_EQ(ev.at("evaluation"), metrics.at("stages").at(2).at("test"));
  EXPECT_EQ(ev.at("evaluation"), metrics.at("overall"));
}

TEST_F(CliTest, EvalWithoutDataIsUsageError) {
  EXPECT_EQ(cli({"eval", "--checkpoint", (dir_ / "m.wckd").string()}), run::kExitUsage);
}

TEST_F(CliTest, EvalClassMismatchIsRuntimeError) {
  const fs::path cfg = tiny_config();
  ASSERT_EQ(cli({"train", "--config", cfg.string()}), 0);
  ASSERT_EQ(cli({"gen-data", "--out", (dir_ / "k3").string(), "--n", "60", "--classes", "3", "--size", "8"}), 0);
  EXPECT_THROW(run::evaluate_checkpoint(dir_ / "run" / "m3.wckd", dir_ / "k3-images.idx3", dir_ / "k3-labels.idx1",
                                        std::nullopt),
               ChainError);
  EXPECT_EQ(cli({"eval", "--checkpoint", (dir_ / "run" / "m3.wckd").string(), "--data", (dir_ / "k3").string()}),
            run::kExitRuntime);
}

TEST_F(CliTest, ReportRerendersIdentically) {
  const fs::path cfg = tiny_config();
  ASSERT_EQ(cli({"train", "--config", cfg.string()}), 0);
  const fs::path r = dir_ / "run";
  const std::string metrics = run::read_text(r / run::kMetricsFile);
  const std::string progression = run::read_text(r / run::kProgressionFile);
  fs::remove(r / run::kMetricsFile);
  fs::remove(r / run::kProgressionFile);
  ASSERT_EQ(cli({"report", "--run-dir", r.string()}), 0);
  EXPECT_EQ(run::read_text(r / run::kMetricsFile), metrics);
  EXPECT_EQ(run::read_text(r / run::kProgressionFile), progression);
}

TEST_F(CliTest, FailedRunWritesErrorRecord) {
  const config::json j = {{"dataset", {{"idx", {{"images", (dir_ / "missing-images").string()},
                                                {"labels", (dir_ / "missing-labels").string()}}}}},
                          {"backbone", {{"num_classes", 4}}}};
  run::write_text(dir_ / "broken.json", j.dump());
  EXPECT_EQ(cli({"train", "--config", (dir_ / "broken.json").string(), "--out-dir", (dir_ / "r").string()}),
            run::kExitRuntime);
  const auto err = config::json::parse(run::read_text(dir_ / "r" / run::kErrorFile));
  EXPECT_TRUE(err.contains("error"));
  EXPECT_FALSE(err.at("message").get<std::string>().empty());
}

TEST_F(CliTest, ConfigErrorIsExitTwo) {
  run::write_text(dir_ / "bad.json", R"({"dataset": {"synthetic": {}}, "distill": {"alpha": 1.2}})");
  EXPECT_EQ(cli({"train", "--config", (dir_ / "bad.json").string()}), run::kExitUsage);
  EXPECT_EQ(cli({"no-such-command"}), run::kExitUsage);
}

TEST_F(CliTest, RepeatSeedsRunSequentially) {
  const fs::path cfg = tiny_config(2);
  ASSERT_EQ(cli({"train", "--config", cfg.string(), "--repeat-seeds", "0,1"}), 0);
  for (const char* s : {"seed-0", "seed-1"}) {
    EXPECT_TRUE(fs::exists(dir_ / "run" / s / run::kMetricsFile)) << s;
    EXPECT_EQ(config::parse_config(dir_ / "run" / s / run::kConfigFile).train.seed, s[5] == '0' ? 0u : 1u);
  }
  EXPECT_TRUE(fs::exists(dir_ / "run" / "repeat_summary.csv"));
}

TEST_F(CliTest, TuneEmitsTrialsAndReparseableBest) {
  const fs::path cfg = tiny_config(2);
  ASSERT_EQ(cli({"tune", "--config", cfg.string(), "--trials", "3", "--out-dir", (dir_ / "tune").string()}), 0);
  const std::string csv = run::read_text(dir_ / "tune" / "trials.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "trial_index,eta,alpha,temp,objective,status");
  const auto best = config::parse_config(dir_ / "tune" / "best-config.json");
  const hyperopt::SearchSpace space;
  EXPECT_TRUE(hyperopt::contains(space, {best.train.learning_rate, best.train.distill.alpha, best.train.distill.t_max}));
}

TEST_F(CliTest, ThreadCapMustBePositive) {
  const fs::path cfg = tiny_config(1);
  ::setenv("WECKD_THREADS", "0", 1);
  EXPECT_EQ(cli({"train", "--config", cfg.string()}), run::kExitUsage);
  ::setenv("WECKD_THREADS", "2", 1);
  EXPECT_EQ(cli({"train", "--config", cfg.string()}), 0);
  ::unsetenv("WECKD_THREADS");
}
