#include "crsim/behavior.hpp"

#include "crsim/errors.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace crsim {

void validate_slate(const Slate& slate, const ItemCatalog& catalog) {
  if (slate.empty()) throw InfeasibleError("slate must contain at least one item");
  std::unordered_set<std::size_t> seen;
  for (auto i : slate) {
    if (i >= catalog.size()) throw InfeasibleError("slate item index " + std::to_string(i) + " out of range");
    if (!seen.insert(i).second) throw InfeasibleError("slate contains item index " + std::to_string(i) + " twice");
  }
}

const Slate& slate_of(const AgentAction& action) {
  static const Slate kEmpty;
  if (auto* q = std::get_if<ItemQuery>(&action)) return q->slate;
  if (auto* r = std::get_if<Recommend>(&action)) return r->slate;
  return kEmpty;
}

bool compatible(const AgentAction& action, const Response& response, std::size_t num_cavs) {
  if (auto* q = std::get_if<ItemQuery>(&action)) {
    auto* c = std::get_if<ItemChoice>(&response);
    return c && c->index < q->slate.size();
  }
  if (auto* q = std::get_if<AttrQuery>(&action)) {
    auto* a = std::get_if<AttrAnswer>(&response);
    return q->attr < num_cavs && a && (a->direction == 1 || a->direction == -1);
  }
  const auto& rec = std::get<Recommend>(action);
  if (auto* a = std::get_if<SlateAccept>(&response)) return a->index < rec.slate.size();
  if (auto* r = std::get_if<SlateReject>(&response)) {
    if (!r->critique) return true;
    return r->critique->attr < num_cavs && (r->critique->direction == 1 || r->critique->direction == -1);
  }
  return std::holds_alternative<Terminate>(response);
}

void BehaviorConfig::validate() const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ConfigError("behavior.temperature must be > 0");
  if (!std::isfinite(null_utility)) throw ConfigError("behavior.null_utility must be finite");
  if (!(critique_probability >= 0.0 && critique_probability <= 1.0))
    throw ConfigError("behavior.critique_probability must be in [0, 1]");
  if (!(termination.p0 >= 0.0 && termination.p0 <= 1.0)) throw ConfigError("behavior.termination.p0 must be in [0, 1]");
  if (!(termination.slope >= 0.0)) throw ConfigError("behavior.termination.slope must be >= 0");
}

namespace {

// Scaled utilities (u / T) for the slate, plus the null item when requested.
void scaled_utilities(const Slate& slate, const Eigen::Ref<const Vec>& embedding, const ItemCatalog& catalog,
                      const BehaviorConfig& config, bool include_null, std::vector<double>& out) {
  out.clear();
  out.reserve(slate.size() + 1);
  const double inv_t = 1.0 / config.temperature;
  for (auto i : slate) out.push_back(catalog.embedding(i).dot(embedding) * inv_t);
  if (include_null) out.push_back(config.null_utility * inv_t);
}

std::size_t draw_categorical(const std::vector<double>& probs, Rng& rng) {
  const double u = uniform01(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  // Rounding left u above the final partial sum: take the last nonzero entry.
  for (std::size_t i = probs.size(); i-- > 0;)
    if (probs[i] > 0.0) return i;
  return probs.size() - 1;
}

}  // namespace

std::vector<double> logit_choice_probs(const Slate& slate, const Eigen::Ref<const Vec>& embedding,
                                       const ItemCatalog& catalog, const BehaviorConfig& config, bool include_null) {
  if (slate.empty()) throw InfeasibleError("logit choice over an empty slate");
  if (static_cast<std::size_t>(embedding.size()) != catalog.dim())
    throw DataError("embedding dimension does not match the catalog");
  std::vector<double> p;
  scaled_utilities(slate, embedding, catalog, config, include_null, p);
  const double mx = *std::max_element(p.begin(), p.end());
  double total = 0.0;
  for (auto& v : p) {
    v = std::exp(v - mx);
    total += v;
  }
  for (auto& v : p) v /= total;
  return p;
}

double logit_log_prob(const Slate& slate, std::size_t position, const Eigen::Ref<const Vec>& embedding,
                      const ItemCatalog& catalog, const BehaviorConfig& config, bool include_null) {
  thread_local std::vector<double> u;
  scaled_utilities(slate, embedding, catalog, config, include_null, u);
  const double mx = *std::max_element(u.begin(), u.end());
  double total = 0.0;
  for (double v : u) total += std::exp(v - mx);
  const double lp = u[position] - mx - std::log(total);
  return lp < kLogZeroFloor ? kLogZeroFloor : lp;
}

Vec target_item(const Eigen::Ref<const Vec>& user_embedding, const ItemCatalog& catalog) {
  const double norm = user_embedding.norm();
  if (!(norm > 0.0)) throw DataError("target item undefined for a zero user embedding");
  return (catalog.max_norm() / norm) * user_embedding;
}

Vec slate_mean(const Slate& slate, const ItemCatalog& catalog) {
  Vec mean = Vec::Zero(static_cast<Eigen::Index>(catalog.dim()));
  for (auto i : slate) mean += catalog.embedding(i);
  return mean / static_cast<double>(slate.size());
}

double attr_evidence(const Eigen::Ref<const Vec>& target, const Eigen::Ref<const Vec>& mean, const Cav& cav) {
  return cav.direction.dot(target - mean) / cav.sigma;
}

double attr_response_prob(const AttrQuery& query, const GroundTruthUser& user, const CavSet& cavs,
                          const ItemCatalog& catalog) {
  if (query.attr >= cavs.size()) throw InfeasibleError("attribute index out of range");
  const Vec target = target_item(user.embedding, catalog);
  return normal_cdf(attr_evidence(target, catalog.embedding(query.item), cavs[query.attr]));
}

Response respond_to_attr_query(const AttrQuery& query, const GroundTruthUser& user, const CavSet& cavs,
                               const ItemCatalog& catalog, Rng& rng) {
  const double p = attr_response_prob(query, user, cavs, catalog);
  return AttrAnswer{bernoulli(rng, p) ? 1 : -1};
}

std::vector<double> critique_salience(const Slate& slate, const GroundTruthUser& user, const CavSet& cavs,
                                      const ItemCatalog& catalog) {
  const Vec target = target_item(user.embedding, catalog);
  const Vec mean = slate_mean(slate, catalog);
  std::vector<double> s;
  s.reserve(cavs.size());
  for (const auto& cav : cavs) s.push_back(std::abs(attr_evidence(target, mean, cav)));
  return s;
}

Critique select_critique(const Slate& slate, const GroundTruthUser& user, const CavSet& cavs,
                         const ItemCatalog& catalog, Rng& rng) {
  if (cavs.empty()) throw InfeasibleError("critique needs at least one attribute");
  const auto salience = critique_salience(slate, user, cavs, catalog);
  const std::size_t g = argmax(salience);
  const Vec target = target_item(user.embedding, catalog);
  const double p = normal_cdf(attr_evidence(target, slate_mean(slate, catalog), cavs[g]));
  return Critique{g, bernoulli(rng, p) ? 1 : -1};
}

Response respond_to_slate(const Slate& slate, const GroundTruthUser& user, const CavSet& cavs,
                          const ItemCatalog& catalog, const BehaviorConfig& config, SlateMode mode, Rng& rng) {
  const bool recommendation = mode == SlateMode::kRecommendation;
  const auto probs = logit_choice_probs(slate, user.embedding, catalog, config, recommendation);
  const std::size_t pick = draw_categorical(probs, rng);
  if (!recommendation) return ItemChoice{pick};
  if (pick < slate.size()) return SlateAccept{pick};
  SlateReject reject;
  if (!cavs.empty() && bernoulli(rng, config.critique_probability))
    reject.critique = select_critique(slate, user, cavs, catalog, rng);
  return reject;
}

bool maybe_terminate(std::size_t turn_index, const BehaviorConfig& config, Rng& rng) {
  if (!config.termination.enabled) return false;
  const double p =
      std::clamp(config.termination.p0 + config.termination.slope * static_cast<double>(turn_index), 0.0, 1.0);
  return bernoulli(rng, p);
}

}  // namespace crsim
