#include "mfas/pipeline.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#ifndef MFAS_CONFIG_DIR
#error "MFAS_CONFIG_DIR must point at the configs directory"
#endif

namespace mfas::pipeline {
namespace {

namespace fs = std::filesystem;

fs::path config_dir() { return fs::path(MFAS_CONFIG_DIR); }

RunConfig tiny(const std::string& out) {
  RunConfig config = load_config(config_dir() / "tiny.json");
  config.output_dir = fs::temp_directory_path() / out;
  return config;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

TEST(Config, ShippedConfigsParseAndRoundTrip) {
  for (const char* name : {"default.json", "tiny.json"}) {
    const RunConfig config = load_config(config_dir() / name);
    const RunConfig back = RunConfig::from_json(config.to_json());
    EXPECT_EQ(back.to_json(), config.to_json()) << name;
  }
}

TEST(Config, UnknownKeyIsRejected) {
  auto j = tiny("unused").to_json();
  j["search"]["sampels"] = 10;
  EXPECT_THROW(RunConfig::from_json(j), ConfigError);
  auto top = tiny("unused").to_json();
  top["extra"] = true;
  EXPECT_THROW(RunConfig::from_json(top), ConfigError);
}

TEST(Config, OutOfRangeValuesAreRejected) {
  auto bad_samples = tiny("unused").to_json();
  bad_samples["search"]["samples"] = 0;
  EXPECT_THROW(RunConfig::from_json(bad_samples), ConfigError);

  auto bad_levels = tiny("unused").to_json();
  bad_levels["search"]["levels"] = 3;
  EXPECT_THROW(RunConfig::from_json(bad_levels), ConfigError);

  auto bad_fractions = tiny("unused").to_json();
  bad_fractions["data"]["fractions"] = {0.5, 0.2, 0.2};
  EXPECT_THROW(RunConfig::from_json(bad_fractions), ConfigError);

  auto bad_md = tiny("unused").to_json();
  bad_md["final"]["md_rate"] = 1.0;
  EXPECT_THROW(RunConfig::from_json(bad_md), ConfigError);

  auto bad_type = tiny("unused").to_json();
  bad_type["seed"] = "seven";
  EXPECT_THROW(RunConfig::from_json(bad_type), ConfigError);
}

TEST(Config, MissingFileIsConfigError) {
  EXPECT_THROW(load_config(config_dir() / "does_not_exist.json"), ConfigError);
}

TEST(Stages, NamesRoundTrip) {
  for (Stage s : all_stages()) EXPECT_EQ(parse_stage(stage_name(s)), s);
  EXPECT_FALSE(parse_stage("bogus").has_value());
  EXPECT_EQ(all_stages().size(), 6u);
}

TEST(Stages, HashChangesPropagateDownstreamOnly) {
  const RunConfig base = tiny("unused");
  RunConfig changed = base;
  changed.final.plan.epochs += 1;
  for (Stage s : {Stage::gen_data, Stage::train_encoders, Stage::search})
    EXPECT_EQ(stage_hash(base, s), stage_hash(changed, s)) << stage_name(s);
  for (Stage s : {Stage::train_final, Stage::evaluate, Stage::report})
    EXPECT_NE(stage_hash(base, s), stage_hash(changed, s)) << stage_name(s);

  RunConfig seeded = base;
  seeded.seed += 1;
  for (Stage s : all_stages()) EXPECT_NE(stage_hash(base, s), stage_hash(seeded, s)) << stage_name(s);

  RunConfig moved = base;
  moved.output_dir = "elsewhere";
  for (Stage s : all_stages()) EXPECT_EQ(stage_hash(base, s), stage_hash(moved, s)) << stage_name(s);
}

TEST(Stages, MissingPrerequisiteNamesUpstreamStage) {
  const RunConfig config = tiny("mfas_test_prereq");
  fs::remove_all(config.output_dir);
  try {
    run_stage(Stage::evaluate, config);
    FAIL() << "expected MissingPrerequisite";
  } catch (const MissingPrerequisite& e) {
    EXPECT_EQ(e.prerequisite, "train-final");
    EXPECT_NE(std::string(e.what()).find("train-final"), std::string::npos);
  }
  fs::remove_all(config.output_dir);
}

class TinyRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    config_ = new RunConfig(tiny("mfas_test_tiny_run"));
    fs::remove_all(config_->output_dir);
    run_all(*config_);
  }
  static void TearDownTestSuite() {
    fs::remove_all(config_->output_dir);
    delete config_;
    config_ = nullptr;
  }
  static RunConfig* config_;
};

RunConfig* TinyRun::config_ = nullptr;

TEST_F(TinyRun, WritesSummary) {
  const auto path = summary_path(*config_);
  ASSERT_TRUE(fs::exists(path));
  const auto summary = nlohmann::json::parse(slurp(path));
  EXPECT_TRUE(summary.is_object());
}

TEST_F(TinyRun, RerunWithUnchangedConfigIsSkipped) {
  const std::string before = slurp(summary_path(*config_));
  std::vector<std::string> lines;
  for (Stage s : all_stages()) {
    const auto outcome = run_stage(s, *config_, [&](const std::string& line) { lines.push_back(line); });
    EXPECT_TRUE(outcome.skipped) << stage_name(s);
  }
  EXPECT_EQ(slurp(summary_path(*config_)), before);
}

TEST_F(TinyRun, ChangedFinalConfigRerunsDownstreamOnly) {
  RunConfig changed = *config_;
  changed.final.plan.epochs += 1;
  EXPECT_THROW(run_stage(Stage::evaluate, changed), MissingPrerequisite);
  for (Stage s : {Stage::gen_data, Stage::train_encoders, Stage::search})
    EXPECT_TRUE(run_stage(s, changed).skipped) << stage_name(s);
  for (Stage s : {Stage::train_final, Stage::evaluate, Stage::report})
    EXPECT_FALSE(run_stage(s, changed).skipped) << stage_name(s);
  for (Stage s : all_stages()) EXPECT_TRUE(run_stage(s, changed).skipped) << stage_name(s);
}

}  // namespace
}  // namespace mfas::pipeline
