#pragma once

#include "crsim/agent.hpp"
#include "crsim/behavior.hpp"
#include "crsim/belief.hpp"
#include "crsim/corpus.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace crsim {

// Serializable trajectory records reference items and attributes by id and
// carry display names so that documents stand alone.

struct ItemRef {
  ItemId id = 0;
  std::string name;
  bool operator==(const ItemRef&) const = default;
};

struct AttrRef {
  int id = 0;
  std::string name;
  bool operator==(const AttrRef&) const = default;
};

enum class AgentKind { kAttrQuery, kItemQuery, kRecommend };
enum class UserKind { kAttrResp, kItemChoice, kAccept, kReject, kTerminate };

struct AgentRecord {
  AgentKind kind = AgentKind::kRecommend;
  std::vector<ItemRef> slate;
  std::optional<AttrRef> attr;
  bool operator==(const AgentRecord&) const = default;
};

struct CritiqueRecord {
  AttrRef attr;
  int direction = 1;
  bool operator==(const CritiqueRecord&) const = default;
};

struct UserRecord {
  UserKind kind = UserKind::kAccept;
  std::optional<int> direction;
  std::optional<std::size_t> item_idx;
  std::optional<CritiqueRecord> critique;
  bool operator==(const UserRecord&) const = default;
};

struct Turn {
  AgentRecord agent;
  UserRecord user;
  bool operator==(const Turn&) const = default;
};

enum class Outcome { kAccepted, kMaxTurns, kTerminated };

struct Trajectory {
  UserId user_id = 0;
  std::optional<std::vector<double>> ground_truth_embedding;
  std::uint64_t seed = 0;
  std::vector<Turn> turns;
  Outcome outcome = Outcome::kMaxTurns;
  bool operator==(const Trajectory&) const = default;

  /// Id of the accepted item, if any.
  std::optional<ItemId> accepted_item() const;
};

/// Checks the record-level invariants: response kind matches the action,
/// at most one acceptance and only as the last turn, indices in range.
void validate(const Trajectory& trajectory);

AgentRecord to_record(const AgentAction& action, const ItemCatalog& catalog, const CavSet& cavs);
UserRecord to_record(const Response& response, const CavSet& cavs);

struct SimulationConfig {
  AgentConfig agent;
  BehaviorConfig behavior;
  SamplerConfig sampler;
  RejectLikelihood reject;
  bool export_embedding = false;
};

/// Called with the turn index and the belief (samples fresh) before each
/// agent decision, and once more after the final update.
using BeliefObserver = std::function<void(std::size_t turn, const BeliefState& belief)>;

/// Runs the agent-user loop for one user until acceptance, termination or
/// max_turns. Fully determined by `seed`.
Trajectory simulate(const GroundTruthUser& user, const UserPrior& prior, const ItemCatalog& catalog,
                    const CavSet& cavs, const SimulationConfig& config, std::uint64_t seed,
                    const BeliefObserver& observer = {});

enum class FailurePolicy { kAbort, kSkip };

struct BatchFailure {
  std::size_t index;
  UserId user_id;
  std::string message;
};

struct BatchResult {
  /// In input order; users that failed under kSkip are absent.
  std::vector<Trajectory> trajectories;
  std::vector<BatchFailure> failures;
};

/// Per-user seed: stable_hash(base_seed, user_id).
std::uint64_t user_seed(std::uint64_t base_seed, UserId user_id);

/// Simulates every (user, prior) pair across `parallelism` worker threads.
/// Output order and content do not depend on parallelism.
BatchResult simulate_batch(const std::vector<GroundTruthUser>& users, const std::vector<UserPrior>& priors,
                           const ItemCatalog& catalog, const CavSet& cavs, const SimulationConfig& config,
                           std::uint64_t base_seed, std::size_t parallelism,
                           FailurePolicy policy = FailurePolicy::kAbort);

/// Single-line JSON document.
std::string serialize(const Trajectory& trajectory);
/// Throws SchemaError naming the offending path.
Trajectory deserialize(const std::string& text);

std::vector<Trajectory> read_trajectories(const std::string& path);
void write_trajectories(const std::string& path, const std::vector<Trajectory>& trajectories);

}  // namespace crsim
