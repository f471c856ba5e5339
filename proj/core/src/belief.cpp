#include "crsim/belief.hpp"

#include "crsim/errors.hpp"

#include <cmath>

namespace crsim {

void SamplerConfig::validate() const {
  if (num_samples < 1) throw ConfigError("sampler.num_samples must be >= 1");
  if (thinning < 1) throw ConfigError("sampler.thinning must be >= 1");
  if (!(proposal_scale > 0.0) || !std::isfinite(proposal_scale)) throw ConfigError("sampler.proposal_scale must be > 0");
}

BeliefState::BeliefState(UserPrior prior, SamplerConfig sampler) : prior_(std::move(prior)), sampler_(sampler) {
  prior_.validate(static_cast<std::size_t>(prior_.mean.size()));
  sampler_.validate();
}

void BeliefState::update(Observation obs, std::size_t num_cavs) {
  if (!compatible(obs.action, obs.response, num_cavs))
    throw InfeasibleError("observation response does not answer its action");
  history_.push_back(std::move(obs));
  samples_.resize(0, 0);
}

BeliefState update(const BeliefState& belief, Observation obs, std::size_t num_cavs) {
  BeliefState next = belief;
  next.update(std::move(obs), num_cavs);
  return next;
}

double log_prior_density(const Eigen::Ref<const Vec>& phi, const UserPrior& prior) {
  double lp = 0.0;
  for (Eigen::Index k = 0; k < phi.size(); ++k) {
    const double v = prior.variance[k];
    const double diff = phi[k] - prior.mean[k];
    lp += -0.5 * std::log(2.0 * M_PI * v) - 0.5 * diff * diff / v;
  }
  return lp;
}

namespace {

// Probit argument for "more of g" given a candidate user embedding; a zero
// embedding has no preferred direction, so its target is the origin.
double evidence_for(const Eigen::Ref<const Vec>& phi, const Eigen::Ref<const Vec>& anchor, const Cav& cav,
                    const ItemCatalog& catalog) {
  const double norm = phi.norm();
  const double target_score = norm > 0.0 ? cav.direction.dot(phi) * (catalog.max_norm() / norm) : 0.0;
  return (target_score - cav.direction.dot(anchor)) / cav.sigma;
}

}  // namespace

double log_likelihood(const Observation& obs, const Eigen::Ref<const Vec>& phi, const LikelihoodModel& model) {
  const ItemCatalog& catalog = *model.catalog;
  const CavSet& cavs = *model.cavs;
  if (auto* q = std::get_if<ItemQuery>(&obs.action)) {
    const auto& choice = std::get<ItemChoice>(obs.response);
    return logit_log_prob(q->slate, choice.index, phi, catalog, model.behavior, false);
  }
  if (auto* q = std::get_if<AttrQuery>(&obs.action)) {
    const auto& answer = std::get<AttrAnswer>(obs.response);
    const double ev = evidence_for(phi, catalog.embedding(q->item), cavs[q->attr], catalog);
    return log_normal_cdf(answer.direction * ev);
  }
  const auto& rec = std::get<Recommend>(obs.action);
  if (auto* a = std::get_if<SlateAccept>(&obs.response))
    return logit_log_prob(rec.slate, a->index, phi, catalog, model.behavior, true);
  if (auto* r = std::get_if<SlateReject>(&obs.response)) {
    double ll = 0.0;
    if (model.reject.null_choice) ll += logit_log_prob(rec.slate, rec.slate.size(), phi, catalog, model.behavior, true);
    if (model.reject.critique && r->critique) {
      const Vec mean = slate_mean(rec.slate, catalog);
      const double ev = evidence_for(phi, mean, cavs[r->critique->attr], catalog);
      ll += log_normal_cdf(r->critique->direction * ev);
    }
    return ll;
  }
  return 0.0;  // Terminate carries no preference information.
}

double log_unnormalized_posterior(const Eigen::Ref<const Vec>& phi, const BeliefState& belief,
                                  const LikelihoodModel& model) {
  if (static_cast<std::size_t>(phi.size()) != belief.dim()) throw DataError("embedding dimension mismatch");
  double lp = log_prior_density(phi, belief.prior());
  for (const auto& obs : belief.history()) lp += log_likelihood(obs, phi, model);
  if (belief.extra_log_likelihood) lp += belief.extra_log_likelihood(phi);
  return lp < kLogZeroFloor ? kLogZeroFloor : lp;
}

RowMatrix mh_sample(const BeliefState& belief, const LikelihoodModel& model, std::vector<MhStep>* trace) {
  const auto& cfg = belief.sampler();
  const auto d = static_cast<Eigen::Index>(belief.dim());
  Rng rng(stable_hash({cfg.seed, belief.history().size(), 0x3c4a1e}));

  const Vec step_sd = cfg.proposal_scale * belief.prior().variance.cwiseSqrt();
  Vec current = belief.prior().mean;
  double current_lp = log_unnormalized_posterior(current, belief, model);
  Vec proposal(d);

  RowMatrix samples(static_cast<Eigen::Index>(cfg.num_samples), d);
  std::size_t kept = 0;
  const std::size_t total = cfg.burn_in + cfg.num_samples * cfg.thinning;
  if (trace) trace->reserve(trace->size() + total);
  for (std::size_t t = 1; t <= total; ++t) {
    for (Eigen::Index k = 0; k < d; ++k) proposal[k] = current[k] + step_sd[k] * standard_normal(rng);
    const double proposal_lp = log_unnormalized_posterior(proposal, belief, model);
    const double u = uniform01(rng);
    const bool accept = proposal_lp >= current_lp || std::log(u) < proposal_lp - current_lp;
    if (trace) trace->push_back(MhStep{current_lp, proposal_lp, accept});
    if (accept) {
      current.swap(proposal);
      current_lp = proposal_lp;
    }
    if (t > cfg.burn_in && (t - cfg.burn_in) % cfg.thinning == 0) samples.row(static_cast<Eigen::Index>(kept++)) = current.transpose();
  }
  return samples;
}

void refresh_samples(BeliefState& belief, const LikelihoodModel& model) {
  belief.set_samples(mh_sample(belief, model));
}

}  // namespace crsim
