#pragma once

#include "crsim/behavior.hpp"

#include <cstdint>
#include <functional>
#include <vector>

namespace crsim {

struct Observation {
  AgentAction action;
  Response response;
  bool operator==(const Observation&) const = default;
};

struct SamplerConfig {
  std::size_t num_samples = 100;
  std::size_t burn_in = 500;
  std::size_t thinning = 5;
  /// Random-walk step, in units of the prior standard deviation.
  double proposal_scale = 0.25;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Which likelihood terms a slate rejection contributes.
struct RejectLikelihood {
  bool null_choice = true;
  bool critique = true;
};

/// Everything the posterior needs besides the belief itself.
struct LikelihoodModel {
  const ItemCatalog* catalog = nullptr;
  const CavSet* cavs = nullptr;
  BehaviorConfig behavior;
  RejectLikelihood reject;
};

/// One Metropolis-Hastings step as seen by an instrumented chain.
struct MhStep {
  double current_log_posterior;
  double proposed_log_posterior;
  bool accepted;
};

/// The agent's belief over the user's embedding: a Gaussian prior, the
/// observed history, and a cache of posterior samples (one row each).
class BeliefState {
 public:
  BeliefState(UserPrior prior, SamplerConfig sampler);

  const UserPrior& prior() const { return prior_; }
  const SamplerConfig& sampler() const { return sampler_; }
  const std::vector<Observation>& history() const { return history_; }
  std::size_t dim() const { return static_cast<std::size_t>(prior_.mean.size()); }

  /// Empty when invalidated by an update.
  const RowMatrix& samples() const { return samples_; }
  bool has_samples() const { return samples_.rows() > 0; }
  void set_samples(RowMatrix samples) { samples_ = std::move(samples); }

  /// Appends an observation and drops the sample cache. Throws
  /// InfeasibleError when the response cannot answer the action.
  void update(Observation obs, std::size_t num_cavs);

  /// Extra log-likelihood term added to the posterior (test hook for
  /// conjugate oracles).
  std::function<double(const Vec&)> extra_log_likelihood;

 private:
  UserPrior prior_;
  SamplerConfig sampler_;
  std::vector<Observation> history_;
  RowMatrix samples_;
};

/// Returns a copy of `belief` with `obs` appended.
BeliefState update(const BeliefState& belief, Observation obs, std::size_t num_cavs);

double log_prior_density(const Eigen::Ref<const Vec>& phi, const UserPrior& prior);

/// log P(response | action, phi).
double log_likelihood(const Observation& obs, const Eigen::Ref<const Vec>& phi, const LikelihoodModel& model);

/// log N(phi; prior) + sum of per-observation log-likelihoods (+ hook term).
double log_unnormalized_posterior(const Eigen::Ref<const Vec>& phi, const BeliefState& belief,
                                  const LikelihoodModel& model);

/// Gaussian random-walk Metropolis-Hastings started at the prior mean.
/// Deterministic given the sampler seed and history length. The optional
/// trace receives every step (burn-in included).
RowMatrix mh_sample(const BeliefState& belief, const LikelihoodModel& model,
                    std::vector<MhStep>* trace = nullptr);

/// Runs mh_sample and stores the result in the belief's cache.
void refresh_samples(BeliefState& belief, const LikelihoodModel& model);

}  // namespace crsim
