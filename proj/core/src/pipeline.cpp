#include "crsim/pipeline.hpp"

#include "crsim/errors.hpp"
#include "crsim/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cinttypes>
#include <cstdio>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>
#include <unordered_map>

#ifndef CRSIM_VERSION
#define CRSIM_VERSION "0.0.0"
#endif

namespace crsim {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config <-> JSON

namespace {

template <typename E>
using EnumNames = std::vector<std::pair<E, const char*>>;

const EnumNames<OptimizerMode> kOptimizerNames = {{OptimizerMode::kExhaustive, "exhaustive"},
                                                  {OptimizerMode::kGradient, "gradient"}};
const EnumNames<FailurePolicy> kFailureNames = {{FailurePolicy::kAbort, "abort"}, {FailurePolicy::kSkip, "skip"}};
const EnumNames<PassMode> kPassNames = {{PassMode::kTwoPass, "two_pass"}, {PassMode::kSinglePass, "single_pass"}};
const EnumNames<LmMode> kLmNames = {{LmMode::kMock, "mock"}, {LmMode::kOracle, "oracle"}, {LmMode::kHttp, "http"}};
const EnumNames<RelevanceMode> kRelevanceNames = {{RelevanceMode::kGraded, "graded"},
                                                  {RelevanceMode::kBinary, "binary"}};
const EnumNames<QuartileFallback> kFallbackNames = {{QuartileFallback::kError, "error"},
                                                    {QuartileFallback::kExtend, "extend"}};

template <typename E>
const char* name_of(const EnumNames<E>& names, E value) {
  for (const auto& [v, n] : names)
    if (v == value) return n;
  return "";
}

json to_json(const PipelineConfig& c) {
  const auto& sc = c.ingest.synthetic_corpus;
  const auto& sim = c.simulate.config;
  const auto& th = c.eval.profile.thresholds;
  return json{
      {"seed", c.seed},
      {"parallelism", c.parallelism},
      {"paths",
       {{"ratings", c.paths.ratings.string()},
        {"tags", c.paths.tags.string()},
        {"catalog", c.paths.catalog.string()},
        {"output_dir", c.paths.output_dir.string()}}},
      {"ingest",
       {{"synthetic", c.ingest.synthetic},
        {"min_item_ratings", c.ingest.min_item_ratings},
        {"min_user_ratings", c.ingest.min_user_ratings},
        {"synthetic_corpus",
         {{"items", sc.items},
          {"users", sc.users},
          {"dim", sc.dim},
          {"attributes", sc.attributes},
          {"item_scale", sc.item_scale},
          {"population_variance", sc.population_variance},
          {"prior_variance", sc.prior_variance},
          {"cav_sigma", sc.cav_sigma},
          {"ratings_per_user", sc.ratings_per_user},
          {"tag_fraction", sc.tag_fraction}}}}},
      {"mf", {{"dim", c.mf.dim}, {"reg", c.mf.reg}, {"iters", c.mf.iters}, {"prior_scale", c.mf.prior_scale}}},
      {"cavs",
       {{"attributes", c.cavs.attributes},
        {"min_tagged", c.cavs.min_tagged},
        {"reg", c.cavs.reg},
        {"sigma", c.cavs.sigma}}},
      {"agent",
       {{"rec_slate_size", sim.agent.rec_slate_size},
        {"item_query_size", sim.agent.item_query_size},
        {"evoi_threshold", sim.agent.evoi_threshold},
        {"max_turns", sim.agent.max_turns},
        {"optimizer", name_of(kOptimizerNames, sim.agent.optimizer)},
        {"exact_pair_limit", sim.agent.exact_pair_limit},
        {"gradient",
         {{"steps", sim.agent.gradient.steps},
          {"step_size", sim.agent.gradient.step_size},
          {"restarts", sim.agent.gradient.restarts},
          {"fd_step", sim.agent.gradient.fd_step}}}}},
      {"behavior",
       {{"temperature", sim.behavior.temperature},
        {"null_utility", sim.behavior.null_utility},
        {"critique_probability", sim.behavior.critique_probability},
        {"termination",
         {{"enabled", sim.behavior.termination.enabled},
          {"p0", sim.behavior.termination.p0},
          {"slope", sim.behavior.termination.slope}}}}},
      {"sampler",
       {{"num_samples", sim.sampler.num_samples},
        {"burn_in", sim.sampler.burn_in},
        {"thinning", sim.sampler.thinning},
        {"proposal_scale", sim.sampler.proposal_scale}}},
      {"reject", {{"null_choice", sim.reject.null_choice}, {"critique", sim.reject.critique}}},
      {"simulate",
       {{"users", c.simulate.users},
        {"export_embedding", sim.export_embedding},
        {"failure_policy", name_of(kFailureNames, c.simulate.failure_policy)}}},
      {"inpaint",
       {{"mode", name_of(kPassNames, c.inpaint.mode)},
        {"max_attempts", c.inpaint.max_attempts},
        {"max_chars", c.inpaint.max_chars},
        {"temperature", c.inpaint.temperature},
        {"max_tokens", c.inpaint.max_tokens}}},
      {"lm",
       {{"mode", name_of(kLmNames, c.lm.mode)},
        {"url", c.lm.http.url},
        {"token_env", c.lm.http.token_env},
        {"timeout_ms", static_cast<std::uint64_t>(c.lm.http.timeout.count())},
        {"max_retries", c.lm.http.max_retries},
        {"initial_backoff_ms", static_cast<std::uint64_t>(c.lm.http.initial_backoff.count())},
        {"backoff_multiplier", c.lm.http.backoff_multiplier},
        {"max_in_flight", c.lm.http.max_in_flight},
        {"oracle_accuracy", c.lm.oracle_accuracy}}},
      {"eval",
       {{"users", c.eval.users},
        {"min_turn", c.eval.min_turn},
        {"max_turn", c.eval.max_turn},
        {"samples", c.eval.profile.samples},
        {"profile_size", c.eval.profile.size},
        {"thresholds",
         {{"liked_mean", th.liked_mean},
          {"disliked_mean", th.disliked_mean},
          {"uncertain_mean_low", th.uncertain_mean_low},
          {"uncertain_mean_high", th.uncertain_mean_high},
          {"confident_std", th.confident_std},
          {"uncertain_std", th.uncertain_std},
          {"min_uncertain_std", th.min_uncertain_std}}},
        {"relevance", name_of(kRelevanceNames, c.eval.ndcg.mode)},
        {"gain_floor", c.eval.ndcg.gain_floor},
        {"fallback", name_of(kFallbackNames, c.eval.fallback)}}},
  };
}

/// Typed, path-aware reads from a merged config document.
class Reader {
 public:
  explicit Reader(const json& root) : root_(root) {}

  const json& at(const std::string& path) const {
    const json* node = &root_;
    std::size_t start = 0;
    while (true) {
      const auto dot = path.find('.', start);
      const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (!node->is_object() || !node->contains(key)) throw ConfigError(path + ": missing key");
      node = &node->at(key);
      if (dot == std::string::npos) return *node;
      start = dot + 1;
    }
  }

  void read(const std::string& path, std::size_t& out) const {
    const json& j = at(path);
    if (!j.is_number_unsigned()) throw ConfigError(path + ": expected a non-negative integer");
    out = j.get<std::size_t>();
  }
  void read(const std::string& path, int& out) const {
    const json& j = at(path);
    if (!j.is_number_integer()) throw ConfigError(path + ": expected an integer");
    out = j.get<int>();
  }
  void read(const std::string& path, double& out) const {
    const json& j = at(path);
    if (!j.is_number()) throw ConfigError(path + ": expected a number");
    out = j.get<double>();
  }
  void read(const std::string& path, bool& out) const {
    const json& j = at(path);
    if (!j.is_boolean()) throw ConfigError(path + ": expected true or false");
    out = j.get<bool>();
  }
  void read(const std::string& path, std::string& out) const {
    const json& j = at(path);
    if (!j.is_string()) throw ConfigError(path + ": expected a string");
    out = j.get<std::string>();
  }
  void read(const std::string& path, fs::path& out) const {
    std::string s;
    read(path, s);
    out = s;
  }
  void read(const std::string& path, std::vector<std::string>& out) const {
    const json& j = at(path);
    if (!j.is_array()) throw ConfigError(path + ": expected a list of strings");
    out.clear();
    for (const auto& e : j) {
      if (!e.is_string()) throw ConfigError(path + ": expected a list of strings");
      out.push_back(e.get<std::string>());
    }
  }
  void read(const std::string& path, std::chrono::milliseconds& out) const {
    std::size_t ms = 0;
    read(path, ms);
    out = std::chrono::milliseconds(static_cast<std::int64_t>(ms));
  }
  template <typename E>
  void read(const std::string& path, E& out, const EnumNames<E>& names) const {
    std::string s;
    read(path, s);
    for (const auto& [v, n] : names)
      if (s == n) {
        out = v;
        return;
      }
    std::string allowed;
    for (const auto& [v, n] : names) allowed += std::string(allowed.empty() ? "" : "|") + n;
    throw ConfigError(path + ": expected one of " + allowed + ", got '" + s + "'");
  }

 private:
  const json& root_;
};

PipelineConfig from_json(const json& doc) {
  const Reader r(doc);
  PipelineConfig c;
  auto& sc = c.ingest.synthetic_corpus;
  auto& sim = c.simulate.config;
  auto& th = c.eval.profile.thresholds;
  r.read("seed", c.seed);
  r.read("parallelism", c.parallelism);
  r.read("paths.ratings", c.paths.ratings);
  r.read("paths.tags", c.paths.tags);
  r.read("paths.catalog", c.paths.catalog);
  r.read("paths.output_dir", c.paths.output_dir);
  r.read("ingest.synthetic", c.ingest.synthetic);
  r.read("ingest.min_item_ratings", c.ingest.min_item_ratings);
  r.read("ingest.min_user_ratings", c.ingest.min_user_ratings);
  r.read("ingest.synthetic_corpus.items", sc.items);
  r.read("ingest.synthetic_corpus.users", sc.users);
  r.read("ingest.synthetic_corpus.dim", sc.dim);
  r.read("ingest.synthetic_corpus.attributes", sc.attributes);
  r.read("ingest.synthetic_corpus.item_scale", sc.item_scale);
  r.read("ingest.synthetic_corpus.population_variance", sc.population_variance);
  r.read("ingest.synthetic_corpus.prior_variance", sc.prior_variance);
  r.read("ingest.synthetic_corpus.cav_sigma", sc.cav_sigma);
  r.read("ingest.synthetic_corpus.ratings_per_user", sc.ratings_per_user);
  r.read("ingest.synthetic_corpus.tag_fraction", sc.tag_fraction);
  r.read("mf.dim", c.mf.dim);
  r.read("mf.reg", c.mf.reg);
  r.read("mf.iters", c.mf.iters);
  r.read("mf.prior_scale", c.mf.prior_scale);
  r.read("cavs.attributes", c.cavs.attributes);
  r.read("cavs.min_tagged", c.cavs.min_tagged);
  r.read("cavs.reg", c.cavs.reg);
  r.read("cavs.sigma", c.cavs.sigma);
  r.read("agent.rec_slate_size", sim.agent.rec_slate_size);
  r.read("agent.item_query_size", sim.agent.item_query_size);
  r.read("agent.evoi_threshold", sim.agent.evoi_threshold);
  r.read("agent.max_turns", sim.agent.max_turns);
  r.read("agent.optimizer", sim.agent.optimizer, kOptimizerNames);
  r.read("agent.exact_pair_limit", sim.agent.exact_pair_limit);
  r.read("agent.gradient.steps", sim.agent.gradient.steps);
  r.read("agent.gradient.step_size", sim.agent.gradient.step_size);
  r.read("agent.gradient.restarts", sim.agent.gradient.restarts);
  r.read("agent.gradient.fd_step", sim.agent.gradient.fd_step);
  r.read("behavior.temperature", sim.behavior.temperature);
  r.read("behavior.null_utility", sim.behavior.null_utility);
  r.read("behavior.critique_probability", sim.behavior.critique_probability);
  r.read("behavior.termination.enabled", sim.behavior.termination.enabled);
  r.read("behavior.termination.p0", sim.behavior.termination.p0);
  r.read("behavior.termination.slope", sim.behavior.termination.slope);
  r.read("sampler.num_samples", sim.sampler.num_samples);
  r.read("sampler.burn_in", sim.sampler.burn_in);
  r.read("sampler.thinning", sim.sampler.thinning);
  r.read("sampler.proposal_scale", sim.sampler.proposal_scale);
  r.read("reject.null_choice", sim.reject.null_choice);
  r.read("reject.critique", sim.reject.critique);
  r.read("simulate.users", c.simulate.users);
  r.read("simulate.export_embedding", sim.export_embedding);
  r.read("simulate.failure_policy", c.simulate.failure_policy, kFailureNames);
  r.read("inpaint.mode", c.inpaint.mode, kPassNames);
  r.read("inpaint.max_attempts", c.inpaint.max_attempts);
  r.read("inpaint.max_chars", c.inpaint.max_chars);
  r.read("inpaint.temperature", c.inpaint.temperature);
  r.read("inpaint.max_tokens", c.inpaint.max_tokens);
  r.read("lm.mode", c.lm.mode, kLmNames);
  r.read("lm.url", c.lm.http.url);
  r.read("lm.token_env", c.lm.http.token_env);
  r.read("lm.timeout_ms", c.lm.http.timeout);
  r.read("lm.max_retries", c.lm.http.max_retries);
  r.read("lm.initial_backoff_ms", c.lm.http.initial_backoff);
  r.read("lm.backoff_multiplier", c.lm.http.backoff_multiplier);
  r.read("lm.max_in_flight", c.lm.http.max_in_flight);
  r.read("lm.oracle_accuracy", c.lm.oracle_accuracy);
  r.read("eval.users", c.eval.users);
  r.read("eval.min_turn", c.eval.min_turn);
  r.read("eval.max_turn", c.eval.max_turn);
  r.read("eval.samples", c.eval.profile.samples);
  r.read("eval.profile_size", c.eval.profile.size);
  r.read("eval.thresholds.liked_mean", th.liked_mean);
  r.read("eval.thresholds.disliked_mean", th.disliked_mean);
  r.read("eval.thresholds.uncertain_mean_low", th.uncertain_mean_low);
  r.read("eval.thresholds.uncertain_mean_high", th.uncertain_mean_high);
  r.read("eval.thresholds.confident_std", th.confident_std);
  r.read("eval.thresholds.uncertain_std", th.uncertain_std);
  r.read("eval.thresholds.min_uncertain_std", th.min_uncertain_std);
  r.read("eval.relevance", c.eval.ndcg.mode, kRelevanceNames);
  r.read("eval.gain_floor", c.eval.ndcg.gain_floor);
  r.read("eval.fallback", c.eval.fallback, kFallbackNames);
  return c;
}

/// Rejects keys in `doc` that the defaults do not define.
void check_known_keys(const json& doc, const json& defaults, const std::string& prefix) {
  if (!doc.is_object()) throw ConfigError((prefix.empty() ? std::string("config") : prefix) + ": expected an object");
  for (const auto& [key, value] : doc.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!defaults.contains(key)) throw ConfigError(path + ": unknown key");
    if (defaults.at(key).is_object()) check_known_keys(value, defaults.at(key), path);
  }
}

void apply_override(json& doc, const std::string& override) {
  const auto eq = override.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + override + "' is not key=value");
  const std::string key = override.substr(0, eq);
  const std::string raw = override.substr(eq + 1);
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw ConfigError(key + ": unknown key");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (node->is_object()) throw ConfigError(key + ": cannot override a whole section");
  if (node->is_string()) {
    *node = raw;
    return;
  }
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) {
    if (node->is_array()) {
      // Comma-separated shorthand for string lists.
      value = json::array();
      std::stringstream ss(raw);
      std::string item;
      while (std::getline(ss, item, ','))
        if (!item.empty()) value.push_back(item);
    } else {
      value = raw;
    }
  }
  *node = std::move(value);
}

json merged_config(const json& file_doc, const std::vector<std::string>& overrides) {
  json doc = to_json(PipelineConfig{});
  const json& source = file_doc.is_object() && file_doc.contains("config") && file_doc.contains("artifacts")
                           ? file_doc.at("config")
                           : file_doc;
  if (!source.is_null()) {
    check_known_keys(source, doc, "");
    doc.merge_patch(source);
  }
  for (const auto& o : overrides) apply_override(doc, o);
  return doc;
}

}  // namespace

PipelineConfig config_from_json_text(const std::string& text, const std::vector<std::string>& overrides) {
  json doc;
  if (!text.empty()) {
    doc = json::parse(text, nullptr, false, true);
    if (doc.is_discarded()) throw ConfigError("config: invalid JSON");
  }
  PipelineConfig config = from_json(merged_config(doc, overrides));
  config.validate();
  return config;
}

PipelineConfig load_config(const fs::path& path, const std::vector<std::string>& overrides) {
  if (path.empty()) return config_from_json_text("", overrides);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_json_text(ss.str(), overrides);
}

std::string config_to_json(const PipelineConfig& config) { return to_json(config).dump(2); }

std::string content_hash(const std::string& bytes) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, fnv1a64(bytes));
  return buf;
}

void PipelineConfig::validate() const {
  auto require = [](bool ok, const std::string& message) {
    if (!ok) throw ConfigError(message);
  };
  auto unit = [](double x) { return x >= 0.0 && x <= 1.0; };
  require(parallelism >= 1, "parallelism must be >= 1");
  require(!paths.output_dir.empty(), "paths.output_dir must be set");

  const auto& sc = ingest.synthetic_corpus;
  require(sc.items >= 2, "ingest.synthetic_corpus.items must be >= 2");
  require(sc.users >= 1, "ingest.synthetic_corpus.users must be >= 1");
  require(sc.dim >= 1, "ingest.synthetic_corpus.dim must be >= 1");
  require(sc.item_scale > 0.0, "ingest.synthetic_corpus.item_scale must be > 0");
  require(sc.population_variance > 0.0, "ingest.synthetic_corpus.population_variance must be > 0");
  require(sc.prior_variance > 0.0, "ingest.synthetic_corpus.prior_variance must be > 0");
  require(sc.cav_sigma > 0.0, "ingest.synthetic_corpus.cav_sigma must be > 0");
  require(sc.ratings_per_user >= 1 && sc.ratings_per_user <= sc.items,
          "ingest.synthetic_corpus.ratings_per_user must be in [1, items]");
  require(sc.tag_fraction > 0.0 && sc.tag_fraction <= 1.0, "ingest.synthetic_corpus.tag_fraction must be in (0, 1]");

  require(mf.dim >= 1, "mf.dim must be >= 1");
  require(mf.reg > 0.0, "mf.reg must be > 0");
  require(mf.iters >= 1, "mf.iters must be >= 1");
  require(mf.prior_scale > 0.0, "mf.prior_scale must be > 0");

  require(cavs.min_tagged >= 1, "cavs.min_tagged must be >= 1");
  require(cavs.reg > 0.0, "cavs.reg must be > 0");
  require(cavs.sigma > 0.0, "cavs.sigma must be > 0");

  simulate.config.agent.validate();
  simulate.config.behavior.validate();
  simulate.config.sampler.validate();

  require(inpaint.max_attempts >= 1, "inpaint.max_attempts must be >= 1");
  require(inpaint.max_chars >= 1, "inpaint.max_chars must be >= 1");
  require(inpaint.temperature >= 0.0, "inpaint.temperature must be >= 0");
  require(inpaint.max_tokens >= 1, "inpaint.max_tokens must be >= 1");

  require(lm.mode != LmMode::kHttp || !lm.http.url.empty(), "lm.url must be set when lm.mode is http");
  require(lm.http.max_in_flight >= 1, "lm.max_in_flight must be >= 1");
  require(lm.http.backoff_multiplier >= 1.0, "lm.backoff_multiplier must be >= 1");
  require(unit(lm.oracle_accuracy), "lm.oracle_accuracy must be in [0, 1]");

  require(eval.min_turn <= eval.max_turn, "eval.min_turn must be <= eval.max_turn");
  require(eval.max_turn <= simulate.config.agent.max_turns, "eval.max_turn must be <= agent.max_turns");
  require(eval.profile.samples >= 2, "eval.samples must be >= 2");
  require(eval.profile.size >= 3, "eval.profile_size must be >= 3");
  const auto& th = eval.profile.thresholds;
  require(unit(th.liked_mean), "eval.thresholds.liked_mean must be in [0, 1]");
  require(unit(th.disliked_mean), "eval.thresholds.disliked_mean must be in [0, 1]");
  require(unit(th.uncertain_mean_low), "eval.thresholds.uncertain_mean_low must be in [0, 1]");
  require(unit(th.uncertain_mean_high), "eval.thresholds.uncertain_mean_high must be in [0, 1]");
  require(unit(th.confident_std), "eval.thresholds.confident_std must be in [0, 1]");
  require(unit(th.uncertain_std), "eval.thresholds.uncertain_std must be in [0, 1]");
  require(th.disliked_mean < th.liked_mean, "eval.thresholds.disliked_mean must be < liked_mean");
  require(th.uncertain_mean_low < th.uncertain_mean_high,
          "eval.thresholds.uncertain_mean_low must be < uncertain_mean_high");
  require(th.min_uncertain_std >= 0.0, "eval.thresholds.min_uncertain_std must be >= 0");
  require(eval.ndcg.gain_floor >= 0.0, "eval.gain_floor must be >= 0");
}

// ---------------------------------------------------------------------------
// Commands

namespace {

/// Salts separating the seed streams of the pipeline stages.
enum SeedSalt : std::uint64_t {
  kSaltSynthetic = 0x51,
  kSaltMf = 0x52,
  kSaltCavs = 0x53,
  kSaltSimulate = 0x54,
  kSaltProfile = 0x55,
  kSaltPair = 0x56,
  kSaltEvalTurn = 0x57,
  kSaltMockLm = 0x58,
};

/// Runs fn(i) for i in [0, n) across `workers` threads.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::size_t error_index = n;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (i < error_index) {
            error_index = i;
            error = std::current_exception();
          }
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class StageRunner {
 public:
  StageRunner(const PipelineConfig& config, std::ostream& log) : config_(config), log_(log), dir_(config.paths.output_dir) {}

  fs::path out(const char* name) const { return dir_ / name; }

  fs::path need(const char* name, const char* producer) const {
    const fs::path p = out(name);
    if (!fs::exists(p)) throw DataError(p.string() + " not found; run '" + producer + "' first");
    return p;
  }

  void ingest() {
    fs::create_directories(dir_);
    if (config_.ingest.synthetic) {
      SyntheticConfig sc = config_.ingest.synthetic_corpus;
      sc.seed = stable_hash({config_.seed, kSaltSynthetic});
      const SyntheticCorpus corpus = make_synthetic_corpus(sc);
      const SyntheticFiles files = export_synthetic(corpus, sc);
      write_ratings_csv(out(artifacts::kRatings), files.ratings);
      write_tags_csv(out(artifacts::kTags), files.tags);
      write_catalog_csv(out(artifacts::kCatalog), files.items);
      // Ground truth, so later stages can run without training.
      EmbeddingTable items{{}, corpus.catalog.embeddings()};
      for (std::size_t i = 0; i < corpus.catalog.size(); ++i) items.ids.push_back(corpus.catalog.item(i).id);
      write_embeddings(out(artifacts::kItems), items);
      write_embeddings(out(artifacts::kUsers), user_table(corpus.users, sc.dim));
      write_priors(out(artifacts::kPriors), corpus.priors);
      write_cavs(out(artifacts::kCavs), corpus.cavs);
      log_ << "ingest: synthetic corpus with " << corpus.catalog.size() << " items, " << corpus.users.size()
           << " users, " << files.ratings.size() << " ratings\n";
      return;
    }
    if (config_.paths.ratings.empty()) throw ConfigError("paths.ratings must be set (or use ingest.synthetic)");
    if (!fs::exists(config_.paths.ratings))
      throw ConfigError("paths.ratings: " + config_.paths.ratings.string() + " does not exist");
    if (config_.paths.catalog.empty()) throw ConfigError("paths.catalog must be set");
    if (!fs::exists(config_.paths.catalog))
      throw ConfigError("paths.catalog: " + config_.paths.catalog.string() + " does not exist");
    if (!config_.paths.tags.empty() && !fs::exists(config_.paths.tags))
      throw ConfigError("paths.tags: " + config_.paths.tags.string() + " does not exist");

    const RatingsDataset ratings =
        load_ratings(config_.paths.ratings, config_.ingest.min_item_ratings, config_.ingest.min_user_ratings);
    write_ratings_csv(out(artifacts::kRatings), ratings);
    write_catalog_csv(out(artifacts::kCatalog), read_catalog_csv(config_.paths.catalog));
    write_tags_csv(out(artifacts::kTags),
                   config_.paths.tags.empty() ? std::vector<TagAssertion>{} : read_tags_csv(config_.paths.tags));
    log_ << "ingest: " << ratings.size() << " ratings after filtering\n";
  }

  void train_mf() {
    const RatingsDataset ratings = read_ratings_csv(need(artifacts::kRatings, "ingest"));
    MfConfig mf = config_.mf;
    mf.seed = stable_hash({config_.seed, kSaltMf});
    const MfModel model = crsim::train_mf(ratings, mf);
    write_embeddings(out(artifacts::kItems), model.items);
    write_embeddings(out(artifacts::kUsers), user_table(model.users, mf.dim));
    write_priors(out(artifacts::kPriors), model.priors);
    log_ << "train-mf: " << model.items.ids.size() << " items, " << model.users.size() << " users, final loss "
         << model.loss_history.back() << "\n";
  }

  void learn_cavs() {
    const ItemCatalog catalog = load_catalog();
    const auto tags = read_tags_csv(need(artifacts::kTags, "ingest"));
    std::vector<std::string> names = config_.cavs.attributes;
    if (names.empty()) {
      std::map<std::string, std::set<ItemId>> tagged;
      for (const auto& t : tags)
        if (catalog.find(t.item)) tagged[t.tag].insert(t.item);
      for (const auto& [tag, items] : tagged)
        if (items.size() >= config_.cavs.min_tagged) names.push_back(tag);
    }
    CavSet cavs;
    for (std::size_t g = 0; g < names.size(); ++g) {
      const auto set = cav_training_set(tags, catalog, names[g], stable_hash({config_.seed, kSaltCavs}));
      if (set.positives.size() < config_.cavs.min_tagged)
        throw DataError("attribute '" + names[g] + "' has " + std::to_string(set.positives.size()) +
                        " tagged items, fewer than cavs.min_tagged");
      cavs.push_back(learn_cav(catalog, set.positives, set.negatives, names[g], config_.cavs.reg,
                               static_cast<int>(g + 1), config_.cavs.sigma));
    }
    write_cavs(out(artifacts::kCavs), cavs);
    log_ << "learn-cavs: " << cavs.size() << " attributes\n";
  }

  void simulate() {
    const ItemCatalog catalog = load_catalog();
    const CavSet cavs = read_cavs(need(artifacts::kCavs, "learn-cavs"));
    const auto [users, priors] = load_users(catalog.dim(), config_.simulate.users);
    const BatchResult batch =
        simulate_batch(users, priors, catalog, cavs, config_.simulate.config,
                       stable_hash({config_.seed, kSaltSimulate}), config_.parallelism, config_.simulate.failure_policy);
    for (const auto& f : batch.failures)
      log_ << "simulate: user " << f.user_id << " skipped: " << f.message << "\n";
    write_trajectories(out(artifacts::kTrajectories), batch.trajectories);
    log_ << "simulate: " << batch.trajectories.size() << " trajectories\n";
  }

  void render() {
    const ItemCatalog catalog = load_catalog();
    const CavSet cavs = read_cavs(need(artifacts::kCavs, "learn-cavs"));
    const auto trajectories = read_trajectories(need(artifacts::kTrajectories, "simulate"));
    std::vector<Dialogue> dialogues;
    for (const auto& t : trajectories) dialogues.push_back(render_templates(t, catalog, cavs, trajectory_ref(t)));
    write_dialogues(out(artifacts::kTemplatized), dialogues);
    log_ << "render: " << dialogues.size() << " dialogues\n";
  }

  void inpaint() {
    const auto templatized = read_dialogues(need(artifacts::kTemplatized, "render"));
    std::unique_ptr<LmClient> lm = config_.lm.mode == LmMode::kHttp
                                       ? std::unique_ptr<LmClient>(std::make_unique<HttpLm>(config_.lm.http))
                                       : make_refinement_mock();
    std::vector<Dialogue> refined(templatized.size());
    parallel_for(templatized.size(), config_.parallelism,
                 [&](std::size_t i) { refined[i] = crsim::inpaint(templatized[i], *lm, config_.inpaint); });
    std::size_t flagged = 0;
    for (const auto& d : refined)
      for (const auto& u : d.turns) flagged += u.flagged ? 1 : 0;
    write_dialogues(out(artifacts::kRefined), refined);
    log_ << "inpaint: " << refined.size() << " dialogues, " << flagged << " flagged turns\n";
  }

  void evaluate() {
    const ItemCatalog catalog = load_catalog();
    const auto dialogues = read_dialogues(need(artifacts::kRefined, "inpaint"));
    const auto trajectories = read_trajectories(need(artifacts::kTrajectories, "simulate"));
    if (dialogues.size() != trajectories.size())
      throw DataError("refined dialogues and trajectories differ in count");
    const auto [users, priors] = load_users(catalog.dim(), 0);
    std::unordered_map<UserId, std::size_t> user_pos;
    for (std::size_t i = 0; i < users.size(); ++i) user_pos[users[i].id] = i;

    std::size_t count = dialogues.size();
    if (config_.eval.users > 0) count = std::min(count, config_.eval.users);
    if (count == 0) throw DataError("no dialogues to evaluate");

    std::unique_ptr<LmClient> shared;
    if (config_.lm.mode == LmMode::kHttp) shared = std::make_unique<HttpLm>(config_.lm.http);
    if (config_.lm.mode == LmMode::kMock) shared = make_answer_mock();

    const std::size_t turns = config_.eval.max_turn - config_.eval.min_turn + 1;
    std::vector<EvalTurnResult> results(count * turns);
    parallel_for(count, config_.parallelism, [&](std::size_t k) {
      const auto it = user_pos.find(trajectories[k].user_id);
      if (it == user_pos.end()) throw DataError("no embedding for user " + std::to_string(trajectories[k].user_id));
      const GroundTruthUser& user = users[it->second];
      const TextProfile profile =
          build_profile(priors[it->second], catalog, config_.eval.profile, stable_hash({config_.seed, kSaltProfile, static_cast<std::uint64_t>(user.id)}));
      const PairwiseTask pair = sample_pair(user, catalog, profile,
                                            stable_hash({config_.seed, kSaltPair, static_cast<std::uint64_t>(user.id)}),
                                            config_.eval.fallback);
      std::unique_ptr<LmClient> oracle;
      if (config_.lm.mode == LmMode::kOracle)
        oracle = std::make_unique<OracleLm>(oracle_scores(user, catalog), config_.lm.oracle_accuracy,
                                            stable_hash({config_.seed, kSaltMockLm, static_cast<std::uint64_t>(user.id)}));
      LmClient& lm = oracle ? *oracle : *shared;
      for (std::size_t t = 0; t < turns; ++t) {
        const std::size_t n = config_.eval.min_turn + t;
        results[k * turns + t] =
            eval_turn(lm, profile, dialogues[k], n, pair, catalog,
                      stable_hash({config_.seed, kSaltEvalTurn, static_cast<std::uint64_t>(user.id), n}));
      }
    });
    const EvalReport report = aggregate(results, config_.eval.ndcg);
    std::ofstream f(out(artifacts::kReport), std::ios::binary);
    if (!f) throw DataError("cannot write " + out(artifacts::kReport).string());
    f << report_to_json(report) << '\n';
    log_ << "evaluate: " << count << " users, turns " << config_.eval.min_turn << ".." << config_.eval.max_turn
         << "\n";
    for (const auto& t : report.turns)
      log_ << "  turn " << t.turn << ": accuracy " << t.accuracy << " +- " << t.acc_ci << ", ndcg " << t.ndcg
           << " +- " << t.ndcg_ci << "\n";
  }

  void write_manifest(const std::vector<std::string>& commands) {
    fs::create_directories(dir_);
    const fs::path path = out(artifacts::kManifest);
    json manifest;
    if (fs::exists(path)) {
      manifest = json::parse(read_file(path), nullptr, false);
      if (manifest.is_discarded() || !manifest.is_object()) manifest = json::object();
    }
    const std::string config_text = config_to_json(config_);
    manifest["version"] = CRSIM_VERSION;
    manifest["config"] = json::parse(config_text);
    manifest["config_hash"] = content_hash(config_text);
    manifest["seed"] = config_.seed;
    for (const auto& c : commands) manifest["stages"][c] = content_hash(config_text);
    json files = json::object();
    for (const char* name : {artifacts::kRatings, artifacts::kTags, artifacts::kCatalog, artifacts::kItems,
                             artifacts::kUsers, artifacts::kPriors, artifacts::kCavs, artifacts::kTrajectories,
                             artifacts::kTemplatized, artifacts::kRefined, artifacts::kReport})
      if (fs::exists(out(name))) files[name] = content_hash(read_file(out(name)));
    manifest["artifacts"] = std::move(files);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path.string());
    f << manifest.dump(2) << '\n';
  }

 private:
  static EmbeddingTable user_table(const std::vector<GroundTruthUser>& users, std::size_t dim) {
    EmbeddingTable t;
    t.values.resize(static_cast<Eigen::Index>(users.size()), static_cast<Eigen::Index>(dim));
    for (std::size_t u = 0; u < users.size(); ++u) {
      t.ids.push_back(users[u].id);
      t.values.row(static_cast<Eigen::Index>(u)) = users[u].embedding.transpose();
    }
    return t;
  }

  static std::string trajectory_ref(const Trajectory& t) {
    return "user:" + std::to_string(t.user_id) + "/seed:" + std::to_string(t.seed);
  }

  ItemCatalog load_catalog() const {
    const auto table = read_embeddings(need(artifacts::kItems, "train-mf"));
    return make_catalog(read_catalog_csv(need(artifacts::kCatalog, "ingest")), table);
  }

  /// Users that have both an embedding and a prior, in prior order.
  std::pair<std::vector<GroundTruthUser>, std::vector<UserPrior>> load_users(std::size_t dim,
                                                                               std::size_t limit) const {
    const auto table = read_embeddings(need(artifacts::kUsers, "train-mf"));
    const auto all_priors = read_priors(need(artifacts::kPriors, "train-mf"));
    if (static_cast<std::size_t>(table.values.cols()) != dim)
      throw DataError("user embeddings have dimension " + std::to_string(table.values.cols()) +
                      ", items have " + std::to_string(dim));
    std::unordered_map<std::int64_t, std::size_t> row;
    for (std::size_t i = 0; i < table.ids.size(); ++i) row[table.ids[i]] = i;
    std::vector<GroundTruthUser> users;
    std::vector<UserPrior> priors;
    for (const auto& p : all_priors) {
      if (limit > 0 && users.size() == limit) break;
      const auto it = row.find(p.id);
      if (it == row.end()) continue;
      users.push_back({p.id, table.values.row(static_cast<Eigen::Index>(it->second)).transpose()});
      priors.push_back(p);
    }
    if (users.empty()) throw DataError("no user has both an embedding and a prior");
    return {std::move(users), std::move(priors)};
  }

  /// Offline refiner: echoes the templatized line being rewritten with the
  /// required speaker prefix.
  static std::unique_ptr<LmClient> make_refinement_mock() {
    return std::make_unique<FunctionLm>([](const LmRequest& request) {
      const std::string& p = request.prompt;
      const auto end = p.find("\n\nAbove is a conversation");
      const std::string head = p.substr(0, end);
      const auto start = head.rfind('\n');
      return LmResponse{start == std::string::npos ? head : head.substr(start + 1), "stop"};
    });
  }

  /// Offline pairwise responder: YES or NO from a hash of the prompt.
  std::unique_ptr<LmClient> make_answer_mock() const {
    const std::uint64_t seed = stable_hash({config_.seed, kSaltMockLm});
    return std::make_unique<FunctionLm>([seed](const LmRequest& request) {
      return LmResponse{(stable_hash({seed, fnv1a64(request.prompt)}) & 1) ? "YES" : "NO", "stop"};
    });
  }

  const PipelineConfig& config_;
  std::ostream& log_;
  fs::path dir_;
};

const std::vector<std::string> kAllCommands = {"ingest", "train-mf", "learn-cavs", "simulate",
                                               "render", "inpaint",  "evaluate"};

}  // namespace

int run_command(const std::string& command, const PipelineConfig& config, std::ostream& log, std::ostream& err) {
  try {
    config.validate();
    std::vector<std::string> commands;
    if (command == "all")
      commands = kAllCommands;
    else if (std::find(kAllCommands.begin(), kAllCommands.end(), command) != kAllCommands.end())
      commands = {command};
    else
      throw ConfigError("unknown command '" + command + "'");

    StageRunner stage(config, log);
    for (const auto& c : commands) {
      if (c == "ingest") stage.ingest();
      if (c == "train-mf") {
        // A synthetic corpus already ships with its ground-truth embeddings.
        if (command == "all" && config.ingest.synthetic) continue;
        stage.train_mf();
      }
      if (c == "learn-cavs") {
        if (command == "all" && config.ingest.synthetic) continue;
        stage.learn_cavs();
      }
      if (c == "simulate") stage.simulate();
      if (c == "render") stage.render();
      if (c == "inpaint") stage.inpaint();
      if (c == "evaluate") stage.evaluate();
    }
    stage.write_manifest(commands);
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const LmTransportError& e) {
    err << "LM error: " << e.what() << "\n";
    return kExitLm;
  } catch (const std::exception& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  }
}

}  // namespace crsim
