#include "crsim/errors.hpp"
#include "crsim/pipeline.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <unistd.h>

namespace crsim {
namespace {

namespace fs = std::filesystem;
using testing::read_text;

class PipelineTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::path(::testing::TempDir()) /
            ("crsim_pipeline_" + std::to_string(::getpid()) + "_" +
             ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  void TearDown() override { fs::remove_all(root_); }

  // A small synthetic run that finishes in well under a second.
  std::vector<std::string> small(const std::string& dir) const {
    return {"paths.output_dir=" + (root_ / dir).string(),
            "ingest.synthetic=true",
            "ingest.synthetic_corpus.items=60",
            "ingest.synthetic_corpus.users=16",
            "ingest.synthetic_corpus.dim=4",
            "ingest.synthetic_corpus.attributes=3",
            "ingest.synthetic_corpus.ratings_per_user=25",
            "sampler.num_samples=30",
            "sampler.burn_in=60",
            "sampler.thinning=2",
            "eval.samples=50",
            "eval.profile_size=6"};
  }

  int run(const std::string& command, const PipelineConfig& cfg) {
    log_.str("");
    err_.str("");
    return run_command(command, cfg, log_, err_);
  }

  fs::path root_;
  std::ostringstream log_, err_;
};

TEST_F(PipelineTest, MissingRatingsFileNamesTheKey) {
  auto cfg = config_from_json_text("{}", {"paths.output_dir=" + (root_ / "o").string(),
                                          "paths.ratings=" + (root_ / "nope.csv").string(),
                                          "paths.catalog=" + (root_ / "nope2.csv").string()});
  EXPECT_EQ(run("ingest", cfg), kExitConfig);
  EXPECT_NE(err_.str().find("paths.ratings"), std::string::npos) << err_.str();
}

TEST_F(PipelineTest, UnknownKeysAndBadValuesAreConfigErrors) {
  try {
    config_from_json_text(R"({"agent":{"max_turn":3}})", {});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("agent.max_turn"), std::string::npos) << e.what();
  }
  EXPECT_THROW(config_from_json_text("{}", {"agent.nonsense=1"}), ConfigError);
  EXPECT_THROW(config_from_json_text("{}", {"agent.max_turns=abc"}), ConfigError);
  EXPECT_THROW(config_from_json_text("{}", {"no_equals_sign"}), ConfigError);
  try {
    config_from_json_text("{}", {"cavs.reg=0"}).validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("cavs.reg"), std::string::npos) << e.what();
  }
  EXPECT_THROW(config_from_json_text("{}", {"eval.max_turn=9"}).validate(), ConfigError);
}

TEST_F(PipelineTest, OverridesApplyInOrder) {
  const auto cfg = config_from_json_text(R"({"agent":{"max_turns":5},"seed":3})",
                                         {"agent.max_turns=4", "behavior.temperature=0.5", "cavs.attributes=funny,dark",
                                          "agent.optimizer=gradient", "agent.max_turns=6", "eval.max_turn=6"});
  EXPECT_EQ(cfg.simulate.config.agent.max_turns, 6u);
  EXPECT_EQ(cfg.seed, 3u);
  EXPECT_DOUBLE_EQ(cfg.simulate.config.behavior.temperature, 0.5);
  EXPECT_EQ(cfg.cavs.attributes, (std::vector<std::string>{"funny", "dark"}));
  EXPECT_EQ(cfg.simulate.config.agent.optimizer, OptimizerMode::kGradient);
  // The canonical JSON reloads to the same configuration.
  EXPECT_EQ(config_to_json(config_from_json_text(config_to_json(cfg), {})), config_to_json(cfg));
}

TEST_F(PipelineTest, AllWithSyntheticCorpusProducesEveryArtifact) {
  const auto cfg = config_from_json_text("{}", small("a"));
  ASSERT_EQ(run("all", cfg), kExitOk) << err_.str();
  for (const char* name : {artifacts::kRatings, artifacts::kTags, artifacts::kCatalog, artifacts::kItems,
                           artifacts::kUsers, artifacts::kPriors, artifacts::kCavs, artifacts::kTrajectories,
                           artifacts::kTemplatized, artifacts::kRefined, artifacts::kReport, artifacts::kManifest})
    EXPECT_TRUE(fs::exists(root_ / "a" / name)) << name;
  const auto report = nlohmann::json::parse(read_text((root_ / "a" / artifacts::kReport).string()));
  EXPECT_EQ(report["turns"].size(), 8u);
  // The mock inpainter returns the templatized text unchanged.
  const auto templ = read_dialogues((root_ / "a" / artifacts::kTemplatized).string());
  const auto refined = read_dialogues((root_ / "a" / artifacts::kRefined).string());
  ASSERT_EQ(templ.size(), refined.size());
  for (std::size_t i = 0; i < templ.size(); ++i) EXPECT_EQ(to_text(templ[i]), to_text(refined[i]));
}

TEST_F(PipelineTest, SimulateIsDeterministicAcrossRunsAndParallelism) {
  auto one = small("p1");
  one.push_back("parallelism=1");
  auto four = small("p4");
  four.push_back("parallelism=4");
  ASSERT_EQ(run("all", config_from_json_text("{}", one)), kExitOk) << err_.str();
  ASSERT_EQ(run("all", config_from_json_text("{}", four)), kExitOk) << err_.str();
  ASSERT_EQ(run("simulate", config_from_json_text("{}", one)), kExitOk) << err_.str();
  const auto a = read_text((root_ / "p1" / artifacts::kTrajectories).string());
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(content_hash(a), content_hash(read_text((root_ / "p4" / artifacts::kTrajectories).string())));
  EXPECT_EQ(read_text((root_ / "p1" / artifacts::kReport).string()),
            read_text((root_ / "p4" / artifacts::kReport).string()));
}

TEST_F(PipelineTest, ManifestRerunIsByteIdentical) {
  ASSERT_EQ(run("all", config_from_json_text("{}", small("m"))), kExitOk) << err_.str();
  const fs::path manifest = root_ / "manifest_copy.json";
  fs::copy_file(root_ / "m" / artifacts::kManifest, manifest);
  fs::remove_all(root_ / "m");
  ASSERT_EQ(run("all", load_config(manifest, {})), kExitOk) << err_.str();
  EXPECT_EQ(read_text((root_ / "m" / artifacts::kManifest).string()), read_text(manifest.string()));
  const auto doc = nlohmann::json::parse(read_text(manifest.string()));
  EXPECT_TRUE(doc.contains("config_hash"));
  EXPECT_EQ(doc["artifacts"][artifacts::kTrajectories],
            content_hash(read_text((root_ / "m" / artifacts::kTrajectories).string())));
}

TEST_F(PipelineTest, CsvCorpusTrainsEmbeddingsAndCavs) {
  ASSERT_EQ(run("ingest", config_from_json_text("{}", small("src"))), kExitOk) << err_.str();
  const fs::path src = root_ / "src";
  const auto cfg = config_from_json_text(
      "{}", {"paths.output_dir=" + (root_ / "csv").string(), "paths.ratings=" + (src / artifacts::kRatings).string(),
             "paths.tags=" + (src / artifacts::kTags).string(), "paths.catalog=" + (src / artifacts::kCatalog).string(),
             "mf.dim=4", "mf.iters=5", "cavs.min_tagged=3", "simulate.users=5", "sampler.num_samples=30",
             "sampler.burn_in=60", "sampler.thinning=2", "eval.samples=50", "eval.profile_size=6"});
  ASSERT_EQ(run("all", cfg), kExitOk) << err_.str();
  const auto cavs = read_cavs(root_ / "csv" / artifacts::kCavs);
  EXPECT_FALSE(cavs.empty());
  EXPECT_EQ(read_trajectories((root_ / "csv" / artifacts::kTrajectories).string()).size(), 5u);
}

TEST_F(PipelineTest, StageOrderingErrorsAreDataErrors) {
  EXPECT_EQ(run("simulate", config_from_json_text("{}", small("empty"))), kExitData);
  EXPECT_NE(err_.str().find("not found; run"), std::string::npos) << err_.str();
  EXPECT_EQ(run("frobnicate", config_from_json_text("{}", small("empty"))), kExitConfig);
}

TEST_F(PipelineTest, UnreachableLmFailsEvaluationWithLmExitCode) {
  ASSERT_EQ(run("all", config_from_json_text("{}", small("lm"))), kExitOk) << err_.str();
  ::setenv("CRSIM_PIPELINE_TEST_TOKEN", "t", 1);
  auto overrides = small("lm");
  for (const char* o : {"lm.mode=http", "lm.url=http://127.0.0.1:1/generate", "lm.token_env=CRSIM_PIPELINE_TEST_TOKEN",
                        "lm.max_retries=0", "lm.timeout_ms=200", "lm.initial_backoff_ms=1"})
    overrides.push_back(o);
  const auto cfg = config_from_json_text("{}", overrides);
  // Inpainting falls back to templates and flags every turn.
  ASSERT_EQ(run("inpaint", cfg), kExitOk) << err_.str();
  for (const auto& d : read_dialogues((root_ / "lm" / artifacts::kRefined).string()))
    for (const auto& u : d.turns) EXPECT_TRUE(u.flagged);
  EXPECT_EQ(run("evaluate", cfg), kExitLm);
}

}  // namespace
}  // namespace crsim
