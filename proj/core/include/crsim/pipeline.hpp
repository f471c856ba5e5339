#pragma once

#include "crsim/agent.hpp"
#include "crsim/belief.hpp"
#include "crsim/dialogue.hpp"
#include "crsim/eval.hpp"
#include "crsim/lm_client.hpp"
#include "crsim/synthetic.hpp"
#include "crsim/trajectory.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace crsim {

enum class LmMode { kMock, kOracle, kHttp };

/// Fully resolved pipeline configuration. See README for the file schema;
/// every key can be overridden with `--set section.key=value`.
struct PipelineConfig {
  std::uint64_t seed = 0;
  std::size_t parallelism = 1;

  struct Paths {
    std::filesystem::path ratings;
    std::filesystem::path tags;
    std::filesystem::path catalog;
    std::filesystem::path output_dir = "out";
  } paths;

  struct Ingest {
    bool synthetic = false;
    std::size_t min_item_ratings = 0;
    std::size_t min_user_ratings = 0;
    SyntheticConfig synthetic_corpus;
  } ingest;

  MfConfig mf;

  struct Cavs {
    /// Empty: every tag with at least min_tagged items.
    std::vector<std::string> attributes;
    std::size_t min_tagged = 5;
    double reg = 1e-3;
    double sigma = 1.0;
  } cavs;

  struct Simulate {
    /// 0 = every user with a prior.
    std::size_t users = 0;
    SimulationConfig config;
    FailurePolicy failure_policy = FailurePolicy::kAbort;
  } simulate;

  InpaintPolicy inpaint;

  struct Lm {
    LmMode mode = LmMode::kMock;
    HttpLmConfig http;
    /// Accuracy of the oracle responder in evaluation (1 = perfect).
    double oracle_accuracy = 1.0;
  } lm;

  struct Eval {
    /// 0 = every simulated user.
    std::size_t users = 0;
    std::size_t min_turn = 0;
    std::size_t max_turn = 7;
    ProfileConfig profile;
    NdcgConfig ndcg;
    QuartileFallback fallback = QuartileFallback::kExtend;
  } eval;

  /// Throws ConfigError naming the first out-of-range key.
  void validate() const;
};

/// Defaults, then the JSON file (a pipeline manifest is accepted too), then
/// `key=value` overrides in order. Throws ConfigError.
PipelineConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides);
PipelineConfig config_from_json_text(const std::string& text, const std::vector<std::string>& overrides);

/// Canonical JSON of the resolved configuration (stable key order).
std::string config_to_json(const PipelineConfig& config);

/// 64-bit FNV-1a, hex encoded.
std::string content_hash(const std::string& bytes);

enum ExitCode : int {
  kExitOk = 0,
  kExitConfig = 1,
  kExitData = 2,
  kExitLm = 3,
};

/// Runs one command (ingest, train-mf, learn-cavs, simulate, render,
/// inpaint, evaluate, all) and updates `manifest.json` in the output dir.
/// Errors are reported on `err` and mapped to exit codes.
int run_command(const std::string& command, const PipelineConfig& config, std::ostream& log, std::ostream& err);

/// Artifact file names inside the output directory.
namespace artifacts {
inline constexpr const char* kRatings = "ratings.csv";
inline constexpr const char* kTags = "tags.csv";
inline constexpr const char* kCatalog = "catalog.csv";
inline constexpr const char* kItems = "items.emb";
inline constexpr const char* kUsers = "users.emb";
inline constexpr const char* kPriors = "priors.emb";
inline constexpr const char* kCavs = "cavs.json";
inline constexpr const char* kTrajectories = "trajectories.jsonl";
inline constexpr const char* kTemplatized = "dialogues.templatized.jsonl";
inline constexpr const char* kRefined = "dialogues.refined.jsonl";
inline constexpr const char* kReport = "eval_report.json";
inline constexpr const char* kManifest = "manifest.json";
}  // namespace artifacts

}  // namespace crsim
