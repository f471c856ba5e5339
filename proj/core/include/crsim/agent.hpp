#pragma once

#include "crsim/behavior.hpp"
#include "crsim/belief.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace crsim {

enum class OptimizerMode { kExhaustive, kGradient };

struct GradientConfig {
  std::size_t steps = 60;
  double step_size = 0.5;
  std::size_t restarts = 10;
  /// Central-difference step.
  double fd_step = 1e-4;
  std::uint64_t seed = 0;
};

struct AgentConfig {
  std::size_t rec_slate_size = 2;
  std::size_t item_query_size = 2;
  double evoi_threshold = 0.0;
  std::size_t max_turns = 7;
  OptimizerMode optimizer = OptimizerMode::kExhaustive;
  GradientConfig gradient;
  /// Catalogs up to this size use exact pair enumeration for item queries
  /// (when item_query_size == 2) instead of greedy slate growth.
  std::size_t exact_pair_limit = 12;

  void validate() const;
};

struct EuStar {
  double value = 0.0;
  std::size_t best_item = 0;
};

/// max_i mean_j phi_j^T phi_I(i) over the sample rows; lowest index on ties.
EuStar eu_star(const RowMatrix& samples, const ItemCatalog& catalog);

/// The PEU surrogate (max_norm / m) * sum_rho || sum_j phi_j P(rho | q, phi_j) ||.
/// Item queries range over slate positions (no null); attribute queries
/// over {+1, -1}.
double f_score(const Query& query, const RowMatrix& samples, const ItemCatalog& catalog, const CavSet& cavs,
               const BehaviorConfig& behavior);

/// F of an uninformative query: max_norm * || mean sample ||. The baseline
/// subtracted from F(q) in the stopping rule.
double f_baseline(const RowMatrix& samples, const ItemCatalog& catalog);

/// Finite weighted belief used for exact value-of-information computations.
struct DiscreteBelief {
  RowMatrix atoms;
  std::vector<double> weights;
};

/// PEU(q) - EU*(belief) computed exactly over the atoms.
double evoi_exact(const Query& query, const DiscreteBelief& belief, const ItemCatalog& catalog, const CavSet& cavs,
                  const BehaviorConfig& behavior);

struct QueryChoice {
  Query query;
  double f_value = 0.0;
};

/// Best query by F under the belief's cached samples. Queries already in the
/// history are skipped. Throws InfeasibleError when nothing can be asked.
QueryChoice select_query(const BeliefState& belief, const ItemCatalog& catalog, const CavSet& cavs,
                         const AgentConfig& config, const BehaviorConfig& behavior);

/// Top-k slate for one posterior sample drawn uniformly from the cache.
Slate recommend(const BeliefState& belief, const ItemCatalog& catalog, const AgentConfig& config, Rng& rng,
                const std::vector<std::size_t>& excluded = {});

struct AgentDecision {
  AgentAction action;
  /// F(q*) - f_baseline; empty on the forced final turn or when no query is
  /// feasible.
  std::optional<double> evoi_estimate;
};

/// Asks the best query while its estimated EVOI exceeds the threshold;
/// otherwise, and always on the final turn, recommends.
AgentDecision decide(const BeliefState& belief, const ItemCatalog& catalog, const CavSet& cavs,
                     const AgentConfig& config, const BehaviorConfig& behavior, std::size_t turn_index, Rng& rng,
                     const std::vector<std::size_t>& excluded = {});

inline AgentAction step(const BeliefState& belief, const ItemCatalog& catalog, const CavSet& cavs,
                        const AgentConfig& config, const BehaviorConfig& behavior, std::size_t turn_index,
                        Rng& rng) {
  return decide(belief, catalog, cavs, config, behavior, turn_index, rng).action;
}

}  // namespace crsim
