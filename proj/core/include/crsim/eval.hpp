#pragma once

#include "crsim/corpus.hpp"
#include "crsim/dialogue.hpp"
#include "crsim/lm_client.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace crsim {

/// Percentile cut points (in [0, 1]) used to partition the profile
/// vocabulary by the mean and spread of each item's cosine score.
struct ProfileThresholds {
  double liked_mean = 0.8;
  double disliked_mean = 0.2;
  double uncertain_mean_low = 0.4;
  double uncertain_mean_high = 0.6;
  double confident_std = 0.5;
  double uncertain_std = 0.7;
  /// Uncertain items also need an absolute std above this floor.
  double min_uncertain_std = 1e-6;
};

struct TextProfile {
  std::vector<std::size_t> liked;
  std::vector<std::size_t> disliked;
  std::vector<std::size_t> uncertain;
  std::string rendered_text;
  /// Bucket sizes produced by the thresholds before any fill.
  std::size_t liked_before_fill = 0;
  std::size_t disliked_before_fill = 0;
  std::size_t uncertain_before_fill = 0;
  /// True when some bucket was topped up with nearest-ranked items.
  bool filled = false;

  std::size_t size() const { return liked.size() + disliked.size() + uncertain.size(); }
  bool contains(std::size_t item) const;
};

struct ProfileConfig {
  std::size_t samples = 500;  // M
  std::size_t size = 10;      // K
  ProfileThresholds thresholds;
};

/// Samples M embeddings from the prior, scores every vocabulary item by
/// cosine similarity per sample and selects liked, disliked and uncertain
/// items. Bucket sizes are K/3, K/3 and the remainder. An empty vocabulary
/// means the whole catalog.
TextProfile build_profile(const UserPrior& prior, const ItemCatalog& catalog, const ProfileConfig& config,
                          std::uint64_t seed, const std::vector<std::size_t>& vocabulary = {});

/// First-person Q/A priming text for a profile.
std::string render_profile(const TextProfile& profile, const ItemCatalog& catalog);

struct PairwiseTask {
  UserId user_id = 0;
  std::size_t item_hi = 0;
  std::size_t item_lo = 0;
  double score_hi = 0.0;
  double score_lo = 0.0;
};

enum class QuartileFallback {
  kError,
  /// Walk further down (up) the ranking past profile items.
  kExtend,
};

/// Quartiles are taken over the true scores of the whole catalog; profile
/// items are then excluded. One uniform draw from the top and one from the
/// bottom quartile.
PairwiseTask sample_pair(const GroundTruthUser& user, const ItemCatalog& catalog, const TextProfile& profile,
                         std::uint64_t seed, QuartileFallback fallback = QuartileFallback::kError);

/// "Q: Considering your preference ... do you like A more than B? ..."
std::string pairwise_question(const std::string& first_title, const std::string& second_title);

struct EvalTurnResult {
  UserId user_id = 0;
  std::size_t turn = 0;
  bool chose_hi = false;
  /// True when the LM reply could not be parsed as YES or NO.
  bool flagged = false;
  /// True when the lower-scored item was presented first.
  bool swapped = false;
  double score_hi = 0.0;
  double score_lo = 0.0;
  std::string raw_reply;
};

struct EvalTurnOptions {
  std::size_t max_attempts = 3;
  double temperature = 0.0;
  int max_tokens = 8;
  /// Forces the presentation order instead of drawing it from the seed.
  std::optional<bool> force_swap;
};

/// Builds the prompt from the text profile, the first n dialogue turns
/// (2n utterances, clipped to the dialogue) and the pairwise question, and
/// parses the LM's YES/NO into a choice.
EvalTurnResult eval_turn(LmClient& lm, const TextProfile& profile, const Dialogue& dialogue, std::size_t n,
                         const PairwiseTask& pair, const ItemCatalog& catalog, std::uint64_t seed,
                         const EvalTurnOptions& options = {});

std::string eval_prompt(const TextProfile& profile, const Dialogue& dialogue, std::size_t n,
                        const std::string& first_title, const std::string& second_title);

/// YES -> true, NO -> false, anything else -> empty.
std::optional<bool> parse_yes_no(const std::string& reply);

enum class RelevanceMode { kGraded, kBinary };

struct NdcgConfig {
  RelevanceMode mode = RelevanceMode::kGraded;
  /// Gain floor g0: graded relevance is 1 + g0 for the preferred item and
  /// g0 for the other.
  double gain_floor = 0.5;
};

/// NDCG of the two-item ranking implied by the choice.
double pair_ndcg(bool chose_hi, const NdcgConfig& config);

struct TurnMetrics {
  std::size_t turn = 0;
  double accuracy = 0.0;
  double acc_ci = 0.0;
  double ndcg = 0.0;
  double ndcg_ci = 0.0;
  std::size_t n = 0;
  std::size_t flagged = 0;
};

struct EvalReport {
  RelevanceMode relevance_mode = RelevanceMode::kGraded;
  std::vector<TurnMetrics> turns;
};

/// Per-turn accuracy and NDCG with 95% normal-approximation half-widths.
EvalReport aggregate(const std::vector<EvalTurnResult>& results, const NdcgConfig& config);

std::string report_to_json(const EvalReport& report);

/// Answers pairwise questions from true scores keyed by display title. With
/// accuracy < 1 the answer is flipped with probability 1 - accuracy, decided
/// by a hash of (seed, prompt) so concurrent use stays deterministic.
class OracleLm : public LmClient {
 public:
  OracleLm(std::unordered_map<std::string, double> scores, double accuracy = 1.0, std::uint64_t seed = 0);
  LmResponse generate(const LmRequest& request) override;

 private:
  std::unordered_map<std::string, double> scores_;
  double accuracy_;
  std::uint64_t seed_;
};

/// Scores for OracleLm: the user's true utility for every catalog item.
std::unordered_map<std::string, double> oracle_scores(const GroundTruthUser& user, const ItemCatalog& catalog);

}  // namespace crsim
