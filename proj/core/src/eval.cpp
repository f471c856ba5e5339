#include "crsim/eval.hpp"

#include "crsim/errors.hpp"
#include "crsim/numeric.hpp"
#include "crsim/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

namespace crsim {

bool TextProfile::contains(std::size_t item) const {
  auto in = [item](const std::vector<std::size_t>& v) { return std::find(v.begin(), v.end(), item) != v.end(); };
  return in(liked) || in(disliked) || in(uncertain);
}

namespace {

/// Linear-interpolation quantile of an unsorted sample.
double quantile(std::vector<double> values, double q) {
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

std::string join_titles(const std::vector<std::size_t>& items, const ItemCatalog& catalog) {
  std::string out;
  for (std::size_t i : items) {
    if (!out.empty()) out += ", ";
    out += catalog.item(i).display_title();
  }
  return out;
}

}  // namespace

TextProfile build_profile(const UserPrior& prior, const ItemCatalog& catalog, const ProfileConfig& config,
                          std::uint64_t seed, const std::vector<std::size_t>& vocabulary) {
  if (config.samples < 2) throw ConfigError("profile.samples must be at least 2");
  if (config.size < 3) throw ConfigError("profile.size must be at least 3");
  prior.validate(catalog.dim());

  std::vector<std::size_t> vocab = vocabulary;
  if (vocab.empty()) {
    vocab.resize(catalog.size());
    std::iota(vocab.begin(), vocab.end(), std::size_t{0});
  }
  for (std::size_t i : vocab)
    if (i >= catalog.size()) throw DataError("profile vocabulary index out of range");
  if (vocab.size() < config.size) throw DataError("profile vocabulary is smaller than the profile size");

  const auto d = static_cast<Eigen::Index>(catalog.dim());
  const auto m = static_cast<Eigen::Index>(config.samples);
  Rng rng(seed);
  RowMatrix samples(m, d);
  for (Eigen::Index s = 0; s < m; ++s)
    for (Eigen::Index j = 0; j < d; ++j)
      samples(s, j) = prior.mean(j) + std::sqrt(prior.variance(j)) * standard_normal(rng);
  Vec sample_norms = samples.rowwise().norm();

  const std::size_t v = vocab.size();
  std::vector<double> means(v), stds(v);
  for (std::size_t k = 0; k < v; ++k) {
    const Vec item = catalog.embedding(vocab[k]);
    const double item_norm = item.norm();
    Vec cos = samples * item;
    for (Eigen::Index s = 0; s < m; ++s) {
      const double denom = sample_norms(s) * item_norm;
      cos(s) = denom > 0.0 ? cos(s) / denom : 0.0;
    }
    const double mean = cos.mean();
    means[k] = mean;
    stds[k] = std::sqrt((cos.array() - mean).square().sum() / static_cast<double>(m - 1));
  }

  const auto& th = config.thresholds;
  const double liked_cut = quantile(means, th.liked_mean);
  const double disliked_cut = quantile(means, th.disliked_mean);
  const double band_lo = quantile(means, th.uncertain_mean_low);
  const double band_hi = quantile(means, th.uncertain_mean_high);
  const double confident_cut = quantile(stds, th.confident_std);
  const double uncertain_cut = quantile(stds, th.uncertain_std);

  // Candidate lists in preference order; ties broken by vocabulary position.
  std::vector<std::size_t> by_mean_desc(v);
  std::iota(by_mean_desc.begin(), by_mean_desc.end(), std::size_t{0});
  std::stable_sort(by_mean_desc.begin(), by_mean_desc.end(), [&](auto a, auto b) { return means[a] > means[b]; });
  std::vector<std::size_t> by_mean_asc(v);
  std::iota(by_mean_asc.begin(), by_mean_asc.end(), std::size_t{0});
  std::stable_sort(by_mean_asc.begin(), by_mean_asc.end(), [&](auto a, auto b) { return means[a] < means[b]; });
  std::vector<std::size_t> by_std_desc(v);
  std::iota(by_std_desc.begin(), by_std_desc.end(), std::size_t{0});
  std::stable_sort(by_std_desc.begin(), by_std_desc.end(), [&](auto a, auto b) { return stds[a] > stds[b]; });

  const std::size_t per_bucket = config.size / 3;
  const std::size_t uncertain_size = config.size - 2 * per_bucket;
  std::vector<bool> used(v, false);
  TextProfile profile;

  auto take = [&](const std::vector<std::size_t>& order, auto&& qualifies, std::size_t want,
                  std::vector<std::size_t>& out) {
    for (std::size_t k : order) {
      if (out.size() == want) break;
      if (!used[k] && qualifies(k)) {
        used[k] = true;
        out.push_back(k);
      }
    }
    return out.size();
  };
  auto liked_ok = [&](std::size_t k) { return means[k] >= liked_cut && stds[k] <= confident_cut; };
  auto disliked_ok = [&](std::size_t k) { return means[k] <= disliked_cut && stds[k] <= confident_cut; };
  auto uncertain_ok = [&](std::size_t k) {
    return means[k] > band_lo && means[k] < band_hi && stds[k] >= uncertain_cut && stds[k] > th.min_uncertain_std;
  };
  auto any = [](std::size_t) { return true; };

  std::vector<std::size_t> liked, disliked, uncertain;
  profile.liked_before_fill = take(by_mean_desc, liked_ok, per_bucket, liked);
  profile.disliked_before_fill = take(by_mean_asc, disliked_ok, per_bucket, disliked);
  profile.uncertain_before_fill = take(by_std_desc, uncertain_ok, uncertain_size, uncertain);

  take(by_mean_desc, any, per_bucket, liked);
  take(by_mean_asc, any, per_bucket, disliked);
  take(by_std_desc, any, uncertain_size, uncertain);
  profile.filled = profile.liked_before_fill < per_bucket || profile.disliked_before_fill < per_bucket ||
                   profile.uncertain_before_fill < uncertain_size;

  auto to_catalog = [&](const std::vector<std::size_t>& ks) {
    std::vector<std::size_t> out;
    for (std::size_t k : ks) out.push_back(vocab[k]);
    return out;
  };
  profile.liked = to_catalog(liked);
  profile.disliked = to_catalog(disliked);
  profile.uncertain = to_catalog(uncertain);
  profile.rendered_text = render_profile(profile, catalog);
  return profile;
}

std::string render_profile(const TextProfile& profile, const ItemCatalog& catalog) {
  std::string out;
  auto line = [&](const std::vector<std::size_t>& items, const char* answer) {
    if (items.empty()) return;
    if (!out.empty()) out += '\n';
    out += "Q: Do you like movies " + join_titles(items, catalog) + "? A: " + answer;
  };
  line(profile.liked, "Definitely yes.");
  line(profile.disliked, "Definitely no.");
  line(profile.uncertain, "I am not sure as I have not watched them.");
  return out;
}

PairwiseTask sample_pair(const GroundTruthUser& user, const ItemCatalog& catalog, const TextProfile& profile,
                         std::uint64_t seed, QuartileFallback fallback) {
  const std::size_t n = catalog.size();
  if (n < 2) throw DataError("pair sampling needs at least two items");
  if (static_cast<std::size_t>(user.embedding.size()) != catalog.dim())
    throw DataError("user embedding dimension does not match the catalog");
  const Vec scores = catalog.embeddings() * user.embedding;

  std::vector<std::size_t> ranked(n);  // ascending score
  std::iota(ranked.begin(), ranked.end(), std::size_t{0});
  std::stable_sort(ranked.begin(), ranked.end(),
                   [&](auto a, auto b) { return scores(static_cast<Eigen::Index>(a)) < scores(static_cast<Eigen::Index>(b)); });
  const std::size_t q = (n + 3) / 4;

  auto pool_from = [&](auto begin, auto end, const char* which) {
    std::vector<std::size_t> pool;
    std::size_t seen = 0;
    for (auto it = begin; it != end && seen < q; ++it, ++seen)
      if (!profile.contains(*it)) pool.push_back(*it);
    if (pool.empty()) {
      if (fallback == QuartileFallback::kError)
        throw DataError(std::string(which) + " quartile is empty after excluding profile items");
      for (auto it = begin; it != end && pool.size() < q; ++it)
        if (!profile.contains(*it)) pool.push_back(*it);
    }
    if (pool.empty()) throw DataError("no items left after excluding profile items");
    return pool;
  };
  const auto top = pool_from(ranked.rbegin(), ranked.rend(), "top");
  const auto bottom = pool_from(ranked.begin(), ranked.end(), "bottom");

  Rng rng(seed);
  PairwiseTask task;
  task.user_id = user.id;
  task.item_hi = top[uniform_index(rng, top.size())];
  task.item_lo = bottom[uniform_index(rng, bottom.size())];
  task.score_hi = scores(static_cast<Eigen::Index>(task.item_hi));
  task.score_lo = scores(static_cast<Eigen::Index>(task.item_lo));
  if (!(task.score_hi > task.score_lo)) throw DataError("sampled pair does not have distinct scores");
  return task;
}

std::string pairwise_question(const std::string& first_title, const std::string& second_title) {
  return "Q: Considering your preference demonstrated above do you like " + first_title + " more than " +
         second_title + "? Please just answer YES or NO. A:";
}

std::string eval_prompt(const TextProfile& profile, const Dialogue& dialogue, std::size_t n,
                        const std::string& first_title, const std::string& second_title) {
  std::string prompt = profile.rendered_text;
  const std::size_t utterances = std::min(2 * n, dialogue.turns.size());
  if (utterances > 0) {
    prompt += "\n\n";
    prompt += to_text(std::span<const Utterance>(dialogue.turns.data(), utterances));
  }
  prompt += "\n\n";
  prompt += pairwise_question(first_title, second_title);
  return prompt;
}

std::optional<bool> parse_yes_no(const std::string& reply) {
  std::size_t i = 0;
  while (i < reply.size() && !std::isalpha(static_cast<unsigned char>(reply[i]))) ++i;
  std::size_t j = i;
  while (j < reply.size() && std::isalpha(static_cast<unsigned char>(reply[j]))) ++j;
  std::string word = reply.substr(i, j - i);
  for (auto& c : word) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (word == "yes") return true;
  if (word == "no") return false;
  return std::nullopt;
}

EvalTurnResult eval_turn(LmClient& lm, const TextProfile& profile, const Dialogue& dialogue, std::size_t n,
                         const PairwiseTask& pair, const ItemCatalog& catalog, std::uint64_t seed,
                         const EvalTurnOptions& options) {
  EvalTurnResult result;
  result.user_id = pair.user_id;
  result.turn = n;
  result.score_hi = pair.score_hi;
  result.score_lo = pair.score_lo;
  Rng rng(seed);
  result.swapped = options.force_swap.value_or(bernoulli(rng, 0.5));
  const std::string hi = catalog.item(pair.item_hi).display_title();
  const std::string lo = catalog.item(pair.item_lo).display_title();
  const LmRequest request{result.swapped ? eval_prompt(profile, dialogue, n, lo, hi)
                                         : eval_prompt(profile, dialogue, n, hi, lo),
                          options.temperature, options.max_tokens};
  for (std::size_t attempt = 0; attempt < std::max<std::size_t>(1, options.max_attempts); ++attempt) {
    result.raw_reply = lm.generate(request).text;
    if (const auto yes = parse_yes_no(result.raw_reply)) {
      // YES means the first-presented item is preferred.
      result.chose_hi = *yes != result.swapped;
      result.flagged = false;
      return result;
    }
  }
  result.chose_hi = false;
  result.flagged = true;
  return result;
}

double pair_ndcg(bool chose_hi, const NdcgConfig& config) {
  const double rel_hi = config.mode == RelevanceMode::kGraded ? 1.0 + config.gain_floor : 1.0;
  const double rel_lo = config.mode == RelevanceMode::kGraded ? config.gain_floor : 0.0;
  const double second = 1.0 / std::log2(3.0);
  const double ideal = rel_hi + rel_lo * second;
  const double dcg = chose_hi ? ideal : rel_lo + rel_hi * second;
  return dcg / ideal;
}

EvalReport aggregate(const std::vector<EvalTurnResult>& results, const NdcgConfig& config) {
  std::map<std::size_t, std::vector<const EvalTurnResult*>> by_turn;
  for (const auto& r : results) by_turn[r.turn].push_back(&r);
  auto mean_ci = [](const std::vector<double>& x) {
    const double n = static_cast<double>(x.size());
    const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
    if (x.size() < 2) return std::pair{mean, 0.0};
    double ss = 0.0;
    for (double v : x) ss += (v - mean) * (v - mean);
    return std::pair{mean, 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n)};
  };
  EvalReport report;
  report.relevance_mode = config.mode;
  for (const auto& [turn, rs] : by_turn) {
    std::vector<double> acc, ndcg;
    TurnMetrics m;
    m.turn = turn;
    m.n = rs.size();
    for (const auto* r : rs) {
      acc.push_back(r->chose_hi ? 1.0 : 0.0);
      ndcg.push_back(pair_ndcg(r->chose_hi, config));
      m.flagged += r->flagged ? 1 : 0;
    }
    std::tie(m.accuracy, m.acc_ci) = mean_ci(acc);
    std::tie(m.ndcg, m.ndcg_ci) = mean_ci(ndcg);
    report.turns.push_back(m);
  }
  return report;
}

std::string report_to_json(const EvalReport& report) {
  const char* mode = report.relevance_mode == RelevanceMode::kGraded ? "graded" : "binary";
  nlohmann::json turns = nlohmann::json::array();
  for (const auto& t : report.turns)
    turns.push_back({{"turn", t.turn},
                     {"accuracy", t.accuracy},
                     {"acc_ci", t.acc_ci},
                     {"ndcg", t.ndcg},
                     {"ndcg_ci", t.ndcg_ci},
                     {"n", t.n},
                     {"flagged", t.flagged},
                     {"relevance_mode", mode}});
  return nlohmann::json{{"relevance_mode", mode}, {"turns", std::move(turns)}}.dump(2);
}

OracleLm::OracleLm(std::unordered_map<std::string, double> scores, double accuracy, std::uint64_t seed)
    : scores_(std::move(scores)), accuracy_(accuracy), seed_(seed) {
  if (!(accuracy >= 0.0 && accuracy <= 1.0)) throw ConfigError("oracle accuracy must be in [0, 1]");
}

LmResponse OracleLm::generate(const LmRequest& request) {
  static constexpr std::string_view kLead = "do you like ";
  static constexpr std::string_view kMid = " more than ";
  static constexpr std::string_view kTail = "? Please just answer YES or NO.";
  const std::string& p = request.prompt;
  const auto lead = p.rfind(kLead);
  const auto tail = p.rfind(kTail);
  const auto mid = lead == std::string::npos ? std::string::npos : p.find(kMid, lead + kLead.size());
  if (lead == std::string::npos || tail == std::string::npos || mid == std::string::npos || mid > tail)
    return {"I cannot tell.", "stop"};
  const std::string first = p.substr(lead + kLead.size(), mid - lead - kLead.size());
  const std::string second = p.substr(mid + kMid.size(), tail - mid - kMid.size());
  const auto a = scores_.find(first);
  const auto b = scores_.find(second);
  if (a == scores_.end() || b == scores_.end()) return {"I cannot tell.", "stop"};
  bool yes = a->second > b->second;
  Rng rng(stable_hash({seed_, fnv1a64(p)}));
  if (!bernoulli(rng, accuracy_)) yes = !yes;
  return {yes ? "YES" : "NO", "stop"};
}

std::unordered_map<std::string, double> oracle_scores(const GroundTruthUser& user, const ItemCatalog& catalog) {
  std::unordered_map<std::string, double> out;
  const Vec scores = catalog.embeddings() * user.embedding;
  for (std::size_t i = 0; i < catalog.size(); ++i)
    out[catalog.item(i).display_title()] = scores(static_cast<Eigen::Index>(i));
  return out;
}

}  // namespace crsim
