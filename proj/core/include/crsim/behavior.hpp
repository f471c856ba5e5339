#pragma once

#include "crsim/corpus.hpp"
#include "crsim/numeric.hpp"
#include "crsim/rng.hpp"

#include <optional>
#include <variant>
#include <vector>

namespace crsim {

// ---------------------------------------------------------------------------
// Interaction vocabulary. Items and attributes are referenced by their dense
// index in the ItemCatalog / CavSet; ids are resolved only at the edges.

/// Ordered catalog indices, no duplicates.
using Slate = std::vector<std::size_t>;

void validate_slate(const Slate& slate, const ItemCatalog& catalog);

struct ItemQuery {
  Slate slate;
  bool operator==(const ItemQuery&) const = default;
};

/// Attribute query over a single anchor item.
struct AttrQuery {
  std::size_t item = 0;
  std::size_t attr = 0;
  bool operator==(const AttrQuery&) const = default;
};

using Query = std::variant<ItemQuery, AttrQuery>;

struct Recommend {
  Slate slate;
  bool operator==(const Recommend&) const = default;
};

using AgentAction = std::variant<ItemQuery, AttrQuery, Recommend>;

struct Critique {
  std::size_t attr = 0;
  int direction = 1;  // +1 more, -1 less
  bool operator==(const Critique&) const = default;
};

struct ItemChoice {
  std::size_t index = 0;
  bool operator==(const ItemChoice&) const = default;
};
struct SlateReject {
  std::optional<Critique> critique;
  bool operator==(const SlateReject&) const = default;
};
struct SlateAccept {
  std::size_t index = 0;
  bool operator==(const SlateAccept&) const = default;
};
struct AttrAnswer {
  int direction = 1;
  bool operator==(const AttrAnswer&) const = default;
};
struct Terminate {
  bool operator==(const Terminate&) const = default;
};

using Response = std::variant<ItemChoice, SlateReject, SlateAccept, AttrAnswer, Terminate>;

/// Checks that a response can answer an action (AskItem -> ItemChoice,
/// AskAttr -> AttrAnswer, Recommend -> Accept/Reject/Terminate) and that
/// indices are in range.
bool compatible(const AgentAction& action, const Response& response, std::size_t num_cavs);

const Slate& slate_of(const AgentAction& action);

// ---------------------------------------------------------------------------
// Response models

struct TerminationConfig {
  bool enabled = false;
  double p0 = 0.0;
  double slope = 0.0;
};

struct BehaviorConfig {
  double temperature = 1.0;
  double null_utility = 0.0;
  /// Probability that a rejection carries a critique.
  double critique_probability = 1.0;
  TerminationConfig termination;

  void validate() const;
};

enum class SlateMode { kRecommendation, kItemQuery };

/// Multinomial logit over the slate at temperature T. With include_null an
/// extra final entry holds the probability of the implicit null item.
std::vector<double> logit_choice_probs(const Slate& slate, const Eigen::Ref<const Vec>& embedding,
                                       const ItemCatalog& catalog, const BehaviorConfig& config, bool include_null);

/// log of logit_choice_probs at one position (position == slate.size() is the
/// null item when include_null).
double logit_log_prob(const Slate& slate, std::size_t position, const Eigen::Ref<const Vec>& embedding,
                      const ItemCatalog& catalog, const BehaviorConfig& config, bool include_null);

/// The user's ideal item: the utility direction scaled to the largest item
/// norm in the catalog. Throws DataError on a zero embedding.
Vec target_item(const Eigen::Ref<const Vec>& user_embedding, const ItemCatalog& catalog);

/// Mean embedding of the slate's items.
Vec slate_mean(const Slate& slate, const ItemCatalog& catalog);

/// c_g^T(target - slate mean) / sigma_g; the probit argument for "more of g".
double attr_evidence(const Eigen::Ref<const Vec>& target, const Eigen::Ref<const Vec>& slate_mean, const Cav& cav);

/// Probability that the user answers "more" (+1) to an attribute query.
double attr_response_prob(const AttrQuery& query, const GroundTruthUser& user, const CavSet& cavs,
                          const ItemCatalog& catalog);

/// Samples the user's choice from a slate. Recommendation mode includes the
/// null item; drawing it yields a SlateReject whose critique comes from
/// select_critique with probability config.critique_probability.
Response respond_to_slate(const Slate& slate, const GroundTruthUser& user, const CavSet& cavs,
                          const ItemCatalog& catalog, const BehaviorConfig& config, SlateMode mode, Rng& rng);

Response respond_to_attr_query(const AttrQuery& query, const GroundTruthUser& user, const CavSet& cavs,
                               const ItemCatalog& catalog, Rng& rng);

/// Salience of attribute g for a slate: |c_g^T(target - slate mean)| / sigma_g.
std::vector<double> critique_salience(const Slate& slate, const GroundTruthUser& user, const CavSet& cavs,
                                      const ItemCatalog& catalog);

/// Critiques the most salient attribute (lowest index on ties); the direction
/// is drawn from the attribute probit.
Critique select_critique(const Slate& slate, const GroundTruthUser& user, const CavSet& cavs,
                         const ItemCatalog& catalog, Rng& rng);

/// Linear-hazard session termination.
bool maybe_terminate(std::size_t turn_index, const BehaviorConfig& config, Rng& rng);

}  // namespace crsim
