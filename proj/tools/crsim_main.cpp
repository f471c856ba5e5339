// Command-line entry point for the simulation pipeline.

#include "crsim/errors.hpp"
#include "crsim/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace {

/// "a..b" or "n" -> (a, b).
std::pair<std::string, std::string> split_turns(const std::string& spec) {
  const auto dots = spec.find("..");
  if (dots == std::string::npos) return {spec, spec};
  return {spec.substr(0, dots), spec.substr(dots + 2)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conversational recommender simulator: ingest, simulate, render, refine and evaluate."};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::size_t> parallelism;
  std::optional<std::string> lm_mode;
  std::optional<std::string> turns;
  std::optional<std::size_t> users;
  std::optional<std::string> relevance;
  std::optional<std::uint64_t> seed;
  bool synthetic = false;
  bool print_config = false;

  app.add_option("-c,--config", config_path, "JSON config file or a previous manifest.json");
  app.add_option("--set", overrides, "Override a config key, e.g. --set sampler.num_samples=200")
      ->expected(1)
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  app.add_option("-j,--parallelism", parallelism, "Worker threads");
  app.add_option("--lm", lm_mode, "LM backend")->check(CLI::IsMember({"mock", "oracle", "http"}));
  app.add_option("--turns", turns, "Evaluated turn range, e.g. 0..7");
  app.add_option("--users", users, "Number of users to simulate and evaluate (0 = all)");
  app.add_option("--relevance", relevance, "NDCG relevance mode")->check(CLI::IsMember({"graded", "binary"}));
  app.add_option("--seed", seed, "Global seed");
  app.add_flag("--print-config", print_config, "Print the resolved config and exit");

  std::string command;
  for (const char* name : {"ingest", "train-mf", "learn-cavs", "simulate", "render", "inpaint", "evaluate", "all"}) {
    auto* sub = app.add_subcommand(name);
    sub->callback([&command, name] { command = name; });
    if (std::string(name) == "ingest" || std::string(name) == "all")
      sub->add_flag("--synthetic", synthetic, "Generate a synthetic corpus instead of reading files");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : crsim::kExitConfig;
  }

  if (parallelism) overrides.push_back("parallelism=" + std::to_string(*parallelism));
  if (lm_mode) overrides.push_back("lm.mode=" + *lm_mode);
  if (users) {
    overrides.push_back("simulate.users=" + std::to_string(*users));
    overrides.push_back("eval.users=" + std::to_string(*users));
  }
  if (turns) {
    const auto [lo, hi] = split_turns(*turns);
    overrides.push_back("eval.min_turn=" + lo);
    overrides.push_back("eval.max_turn=" + hi);
  }
  if (relevance) overrides.push_back("eval.relevance=" + *relevance);
  if (seed) overrides.push_back("seed=" + std::to_string(*seed));
  if (synthetic) overrides.push_back("ingest.synthetic=true");

  crsim::PipelineConfig config;
  try {
    config = crsim::load_config(config_path, overrides);
  } catch (const crsim::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return crsim::kExitConfig;
  }
  if (print_config) {
    std::cout << crsim::config_to_json(config) << "\n";
    return crsim::kExitOk;
  }
  return crsim::run_command(command, config, std::cout, std::cerr);
}
