#include <gtest/gtest.h>

#include <filesystem>

#include "hfvad/pipeline.hpp"

using namespace hfvad;
using namespace hfvad::pipeline;

namespace {

json tiny_config() {
  return json::parse(R"({
    "dataset": {"frames": 120, "splits": [{"name": "train", "count": 1, "anomalous": false},
                                         {"name": "test", "count": 2, "anomalous": true}]},
    "flow": {"levels": 2, "iterations": 10},
    "cube": {"train_stride": 2},
    "training": {"memae": {"epochs": 1, "batch_size": 16},
                 "cvae": {"epochs": 1, "batch_size": 16},
                 "finetune": {"epochs": 1, "batch_size": 16}}
  })");
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("hfvad_pipeline_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

class TinyRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    log_stream() = nullptr;
    run_ = new pipeline::Run(open_run(scratch("tiny"), config::parse(tiny_config())));
    run_all(*run_);
  }
  static void TearDownTestSuite() {
    fs::remove_all(run_->dir);
    delete run_;
  }
  static pipeline::Run* run_;
};

pipeline::Run* TinyRun::run_ = nullptr;

}  // namespace

TEST(Pipeline, StageWithoutPrerequisiteNamesTheArtifact) {
  log_stream() = nullptr;
  const auto run = open_run(scratch("missing"), config::parse(tiny_config()));
  try {
    stage_flow(run);
    FAIL() << "expected MissingPrerequisite";
  } catch (const MissingPrerequisite& e) {
    EXPECT_NE(std::string(e.what()).find("gen"), std::string::npos);
  }
  EXPECT_THROW(stage_eval(run), MissingPrerequisite);
  fs::remove_all(run.dir);
}

TEST_F(TinyRun, ProducesTheRunLayout) {
  const auto& d = run_->dir;
  for (const char* f : {"config.json", "data/manifest.json", "models/memae.vadt", "models/cvae.vadt",
                        "models/final_memae.vadt", "models/final_cvae.vadt", "calib/stats.json", "eval/metrics.csv",
                        "eval/summary.json", "report/metrics.csv", "report/roc_gt.csv", "manifests/report.json"})
    EXPECT_TRUE(fs::exists(d / f)) << f;
  for (const auto& c : config::resolve_conditions(run_->cfg)) EXPECT_TRUE(fs::exists(d / "scores" / c.name / "condition.json"));
}

TEST_F(TinyRun, MetricsAreWellFormed) {
  const auto s = json::parse(read_file(run_->eval_dir() / "summary.json"));
  ASSERT_EQ(s.size(), 5u);
  for (const auto& [name, m] : s.items()) {
    EXPECT_GE(m.at("frame_auroc").get<double>(), 0.0) << name;
    EXPECT_LE(m.at("frame_auroc").get<double>(), 1.0) << name;
    EXPECT_GT(m.at("anomalous_frames").get<int>(), 0) << name;
  }
  EXPECT_DOUBLE_EQ(s.at("gt").at("box_iou").get<double>(), 1.0);
  EXPECT_LT(s.at("detected").at("box_iou").get<double>(), 1.0);
}

TEST_F(TinyRun, ConditionsSharingBoxesShareErrors) {
  const auto a = json::parse(read_file(run_->scores("gt") / "test_000" / "scores.json"));
  const auto b = json::parse(read_file(run_->scores("gt-flow-only") / "test_000" / "scores.json"));
  ASSERT_EQ(a.at("cubes").size(), b.at("cubes").size());
  for (std::size_t i = 0; i < a.at("cubes").size(); ++i) {
    EXPECT_EQ(a["cubes"][i]["s_r"], b["cubes"][i]["s_r"]);
    EXPECT_EQ(a["cubes"][i]["s_p"], b["cubes"][i]["s_p"]);
  }
}

TEST_F(TinyRun, EvalRefusesScoresFromOtherCalibration) {
  const auto copy = scratch("stale");
  fs::copy(run_->dir, copy, fs::copy_options::recursive);
  pipeline::Run stale{copy, run_->cfg, run_->eff};
  auto st = json::parse(read_file(stale.stats_path()));
  st["mu_r"] = st["mu_r"].get<double>() + 1.0;
  write_file(stale.stats_path(), st.dump());
  EXPECT_THROW(stage_eval(stale), ConfigError);
  fs::remove_all(copy);
}

TEST_F(TinyRun, RescoringIsBitIdentical) {
  const auto before = read_file(run_->scores("detected") / "test_001" / "scores.json");
  const auto maps = read_file(run_->scores("detected") / "test_001" / "maps.vadt");
  stage_score(*run_);
  EXPECT_EQ(read_file(run_->scores("detected") / "test_001" / "scores.json"), before);
  EXPECT_EQ(read_file(run_->scores("detected") / "test_001" / "maps.vadt"), maps);
}

TEST_F(TinyRun, DisabledFinetunePassesCheckpointsThrough) {
  const auto copy = scratch("noft");
  fs::copy(run_->dir, copy, fs::copy_options::recursive);
  auto j = tiny_config();
  j["training"]["finetune_enabled"] = false;
  const auto run = open_run(copy, config::parse(j));
  stage_finetune(run);
  EXPECT_EQ(read_file(copy / "models" / "final_memae.vadt"), read_file(copy / "models" / "memae.vadt"));
  EXPECT_EQ(read_file(copy / "models" / "final_cvae.vadt"), read_file(copy / "models" / "cvae.vadt"));
  fs::remove_all(copy);
}
