#include "crsim/agent.hpp"

#include "crsim/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <set>

namespace crsim {

void AgentConfig::validate() const {
  if (rec_slate_size < 1) throw ConfigError("agent.rec_slate_size must be >= 1");
  if (item_query_size < 2) throw ConfigError("agent.item_query_size must be >= 2");
  if (max_turns < 1) throw ConfigError("agent.max_turns must be >= 1");
  if (!std::isfinite(evoi_threshold)) throw ConfigError("agent.evoi_threshold must be finite");
  if (optimizer == OptimizerMode::kGradient) {
    if (gradient.restarts < 1) throw ConfigError("agent.gradient.restarts must be >= 1");
    if (!(gradient.step_size > 0.0)) throw ConfigError("agent.gradient.step_size must be > 0");
    if (!(gradient.fd_step > 0.0)) throw ConfigError("agent.gradient.fd_step must be > 0");
  }
}

EuStar eu_star(const RowMatrix& samples, const ItemCatalog& catalog) {
  if (samples.rows() == 0) throw InfeasibleError("EU* needs at least one sample");
  const Vec mean = samples.colwise().mean().transpose();
  const Vec scores = catalog.embeddings() * mean;
  EuStar best{scores[0], 0};
  for (Eigen::Index i = 1; i < scores.size(); ++i)
    if (scores[i] > best.value) best = {scores[i], static_cast<std::size_t>(i)};
  return best;
}

double f_baseline(const RowMatrix& samples, const ItemCatalog& catalog) {
  if (samples.rows() == 0) throw InfeasibleError("F baseline needs at least one sample");
  return catalog.max_norm() * samples.colwise().mean().norm();
}

namespace {

// c_g^T target(phi): the attribute score of a sample's ideal item.
double target_attr_score(const Eigen::Ref<const Vec>& phi, const Cav& cav, const ItemCatalog& catalog) {
  const double norm = phi.norm();
  return norm > 0.0 ? cav.direction.dot(phi) * (catalog.max_norm() / norm) : 0.0;
}

// P(rho | q, phi) for every response rho of the query (slate positions, or
// {+1, -1} for attribute queries).
void response_probs(const Query& query, const Eigen::Ref<const Vec>& phi, const ItemCatalog& catalog,
                    const CavSet& cavs, const BehaviorConfig& behavior, std::vector<double>& out) {
  if (auto* iq = std::get_if<ItemQuery>(&query)) {
    out = logit_choice_probs(iq->slate, phi, catalog, behavior, false);
    return;
  }
  const auto& aq = std::get<AttrQuery>(query);
  const Cav& cav = cavs[aq.attr];
  const double ev = (target_attr_score(phi, cav, catalog) - cav.direction.dot(catalog.embedding(aq.item))) / cav.sigma;
  const double p = normal_cdf(ev);
  out.assign({p, 1.0 - p});
}

void check_query(const Query& query, const ItemCatalog& catalog, const CavSet& cavs) {
  if (auto* iq = std::get_if<ItemQuery>(&query)) {
    validate_slate(iq->slate, catalog);
    return;
  }
  const auto& aq = std::get<AttrQuery>(query);
  if (aq.item >= catalog.size()) throw InfeasibleError("attribute query item out of range");
  if (aq.attr >= cavs.size()) throw InfeasibleError("attribute query attribute out of range");
}

}  // namespace

double f_score(const Query& query, const RowMatrix& samples, const ItemCatalog& catalog, const CavSet& cavs,
               const BehaviorConfig& behavior) {
  if (samples.rows() == 0) throw InfeasibleError("F needs at least one sample");
  check_query(query, catalog, cavs);
  const auto m = samples.rows();
  std::vector<double> probs;
  std::vector<Vec> sums;
  for (Eigen::Index j = 0; j < m; ++j) {
    const Vec phi = samples.row(j).transpose();
    response_probs(query, phi, catalog, cavs, behavior, probs);
    if (sums.empty()) sums.assign(probs.size(), Vec::Zero(samples.cols()));
    for (std::size_t r = 0; r < probs.size(); ++r) sums[r] += probs[r] * phi;
  }
  double total = 0.0;
  for (const auto& s : sums) total += s.norm();
  return catalog.max_norm() / static_cast<double>(m) * total;
}

double evoi_exact(const Query& query, const DiscreteBelief& belief, const ItemCatalog& catalog, const CavSet& cavs,
                  const BehaviorConfig& behavior) {
  const auto n_atoms = belief.atoms.rows();
  if (n_atoms == 0 || static_cast<std::size_t>(n_atoms) != belief.weights.size())
    throw DataError("discrete belief needs one weight per atom");
  double wsum = 0.0;
  for (double w : belief.weights) {
    if (!(w >= 0.0)) throw DataError("discrete belief weights must be nonnegative");
    wsum += w;
  }
  if (std::abs(wsum - 1.0) > 1e-9) throw DataError("discrete belief weights must sum to 1");
  check_query(query, catalog, cavs);

  // utilities(a, i) = phi_a^T phi_I(i)
  const Eigen::MatrixXd utilities = belief.atoms * catalog.embeddings().transpose();
  const Eigen::Map<const Vec> w(belief.weights.data(), n_atoms);
  const double eu_prior = (utilities.transpose() * w).maxCoeff();

  std::vector<double> probs;
  Eigen::MatrixXd likelihood;  // atoms x responses
  for (Eigen::Index a = 0; a < n_atoms; ++a) {
    response_probs(query, belief.atoms.row(a).transpose(), catalog, cavs, behavior, probs);
    if (likelihood.size() == 0) likelihood.resize(n_atoms, static_cast<Eigen::Index>(probs.size()));
    for (std::size_t r = 0; r < probs.size(); ++r) likelihood(a, static_cast<Eigen::Index>(r)) = probs[r];
  }
  // sum_rho P(rho) * EU*(posterior_rho) = sum_rho max_i sum_a w_a P(rho|a) u(a, i)
  double peu = 0.0;
  for (Eigen::Index r = 0; r < likelihood.cols(); ++r) {
    const Vec joint = w.cwiseProduct(likelihood.col(r));
    peu += (utilities.transpose() * joint).maxCoeff();
  }
  return peu - eu_prior;
}

// ---------------------------------------------------------------------------
// Query selection

namespace {

// Precomputed per-sample quantities shared by every candidate query.
class QueryScorer {
 public:
  QueryScorer(const RowMatrix& samples, const ItemCatalog& catalog, const CavSet& cavs, const BehaviorConfig& behavior)
      : samples_(samples), catalog_(catalog), cavs_(cavs), behavior_(behavior) {
    const auto m = samples.rows();
    const auto g = static_cast<Eigen::Index>(cavs.size());
    scale_ = catalog.max_norm() / static_cast<double>(m);
    sum_ = samples.colwise().sum().transpose();
    target_scores_.resize(m, g);
    item_scores_.resize(static_cast<Eigen::Index>(catalog.size()), g);
    for (Eigen::Index k = 0; k < g; ++k) {
      const Cav& cav = cavs[static_cast<std::size_t>(k)];
      for (Eigen::Index j = 0; j < m; ++j) target_scores_(j, k) = target_attr_score(samples.row(j).transpose(), cav, catalog);
      item_scores_.col(k) = catalog.embeddings() * cav.direction;
    }
    utilities_ = (samples * catalog.embeddings().transpose()) / behavior.temperature;
    probs_.resize(m);
  }

  std::size_t num_items() const { return catalog_.size(); }
  std::size_t num_attrs() const { return cavs_.size(); }
  const Eigen::MatrixXd& item_scores() const { return item_scores_; }

  /// F of an attribute query whose anchor has attribute score `anchor_score`.
  double attr_f(double anchor_score, std::size_t attr) {
    const auto k = static_cast<Eigen::Index>(attr);
    const double inv_sigma = 1.0 / cavs_[attr].sigma;
    for (Eigen::Index j = 0; j < probs_.size(); ++j)
      probs_[j] = normal_cdf((target_scores_(j, k) - anchor_score) * inv_sigma);
    const Vec more = samples_.transpose() * probs_;
    return scale_ * (more.norm() + (sum_ - more).norm());
  }

  double attr_f(std::size_t item, std::size_t attr) {
    return attr_f(item_scores_(static_cast<Eigen::Index>(item), static_cast<Eigen::Index>(attr)), attr);
  }

  double item_f(const Slate& slate) {
    const auto m = samples_.rows();
    const auto k = static_cast<Eigen::Index>(slate.size());
    Eigen::MatrixXd p(m, k);
    for (Eigen::Index j = 0; j < m; ++j) {
      double mx = -std::numeric_limits<double>::infinity();
      for (Eigen::Index r = 0; r < k; ++r) mx = std::max(mx, utilities_(j, static_cast<Eigen::Index>(slate[static_cast<std::size_t>(r)])));
      double total = 0.0;
      for (Eigen::Index r = 0; r < k; ++r) {
        p(j, r) = std::exp(utilities_(j, static_cast<Eigen::Index>(slate[static_cast<std::size_t>(r)])) - mx);
        total += p(j, r);
      }
      p.row(j) /= total;
    }
    const Eigen::MatrixXd v = samples_.transpose() * p;  // d x k
    return scale_ * v.colwise().norm().sum();
  }

  /// Relaxed item query: slate "items" are free vectors (rows of `slots`).
  double relaxed_item_f(const RowMatrix& slots) {
    const Eigen::MatrixXd u = (samples_ * slots.transpose()) / behavior_.temperature;  // m x k
    Eigen::MatrixXd p = u;
    for (Eigen::Index j = 0; j < p.rows(); ++j) {
      p.row(j) = (u.row(j).array() - u.row(j).maxCoeff()).exp();
      p.row(j) /= p.row(j).sum();
    }
    const Eigen::MatrixXd v = samples_.transpose() * p;
    return scale_ * v.colwise().norm().sum();
  }

 private:
  const RowMatrix& samples_;
  const ItemCatalog& catalog_;
  const CavSet& cavs_;
  const BehaviorConfig& behavior_;
  double scale_ = 0.0;
  Vec sum_;
  Eigen::MatrixXd target_scores_;  // m x G
  Eigen::MatrixXd item_scores_;    // items x G
  Eigen::MatrixXd utilities_;      // m x items, already divided by T
  Vec probs_;
};

struct AskedQueries {
  std::set<std::pair<std::size_t, std::size_t>> attr;
  std::set<std::vector<std::size_t>> item;

  static std::vector<std::size_t> key(Slate slate) {
    std::sort(slate.begin(), slate.end());
    return slate;
  }
  bool asked(const AttrQuery& q) const { return attr.count({q.item, q.attr}) > 0; }
  bool asked(const Slate& s) const { return item.count(key(s)) > 0; }
};

AskedQueries asked_queries(const BeliefState& belief) {
  AskedQueries asked;
  for (const auto& obs : belief.history()) {
    if (auto* q = std::get_if<AttrQuery>(&obs.action)) asked.attr.insert({q->item, q->attr});
    if (auto* q = std::get_if<ItemQuery>(&obs.action)) asked.item.insert(AskedQueries::key(q->slate));
  }
  return asked;
}

// Running argmax that keeps the earliest candidate unless a later one is
// larger beyond floating-point noise.
struct Best {
  std::optional<Query> query;
  double value = -std::numeric_limits<double>::infinity();

  void offer(double f, const Query& q) {
    if (!query || f > value + 1e-13 * std::max(1.0, std::abs(value))) {
      value = f;
      query = q;
    }
  }
};

// Visits every k-subset of [0, n) in lexicographic order.
template <typename Fn>
void for_each_subset(std::size_t n, std::size_t k, Fn&& fn) {
  if (k > n) return;
  Slate idx(k);
  std::iota(idx.begin(), idx.end(), 0);
  while (true) {
    fn(idx);
    std::size_t pos = k;
    while (pos > 0 && idx[pos - 1] == n - k + (pos - 1)) --pos;
    if (pos == 0) return;
    ++idx[pos - 1];
    for (std::size_t j = pos; j < k; ++j) idx[j] = idx[j - 1] + 1;
  }
}

void exhaustive_attr(QueryScorer& scorer, const AskedQueries& asked, Best& best) {
  for (std::size_t i = 0; i < scorer.num_items(); ++i)
    for (std::size_t g = 0; g < scorer.num_attrs(); ++g) {
      const AttrQuery q{i, g};
      if (asked.asked(q)) continue;
      best.offer(scorer.attr_f(i, g), q);
    }
}

void exhaustive_item(QueryScorer& scorer, const AgentConfig& config, const AskedQueries& asked, std::size_t seed_item,
                     Best& best) {
  const std::size_t n = scorer.num_items();
  const std::size_t k = config.item_query_size;
  if (k > n) return;
  if (n <= config.exact_pair_limit) {
    for_each_subset(n, k, [&](const Slate& s) {
      if (!asked.asked(s)) best.offer(scorer.item_f(s), ItemQuery{s});
    });
    return;
  }
  // Greedy growth from the seed item.
  Slate slate{seed_item};
  std::vector<bool> used(n, false);
  used[seed_item] = true;
  while (slate.size() < k) {
    const bool last = slate.size() + 1 == k;
    std::optional<std::size_t> pick;
    double pick_f = -std::numeric_limits<double>::infinity();
    Slate trial = slate;
    trial.push_back(0);
    for (std::size_t c = 0; c < n; ++c) {
      if (used[c]) continue;
      trial.back() = c;
      if (last && asked.asked(trial)) continue;
      const double f = scorer.item_f(trial);
      if (!pick || f > pick_f) {
        pick = c;
        pick_f = f;
      }
    }
    if (!pick) return;
    slate.push_back(*pick);
    used[*pick] = true;
    if (last) best.offer(pick_f, ItemQuery{slate});
  }
}

// Central-difference gradient of f at x.
template <typename Fn>
Vec numeric_gradient(Fn&& f, Vec x, double h) {
  Vec grad(x.size());
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    const double orig = x[k];
    x[k] = orig + h;
    const double up = f(x);
    x[k] = orig - h;
    const double down = f(x);
    x[k] = orig;
    grad[k] = (up - down) / (2.0 * h);
  }
  return grad;
}

void clamp_norm(Eigen::Ref<Vec> v, double radius) {
  const double n = v.norm();
  if (n > radius) v *= radius / n;
}

void gradient_attr(QueryScorer& scorer, const ItemCatalog& catalog, const CavSet& cavs, const GradientConfig& cfg,
                   const AskedQueries& asked, Rng& rng, Best& best) {
  const std::size_t n = catalog.size();
  const auto g = static_cast<Eigen::Index>(cavs.size());
  if (g == 0) return;
  const auto d = static_cast<Eigen::Index>(catalog.dim());
  const double radius = catalog.max_norm();

  // Parameters: anchor pseudo-embedding x (d) then attribute logits (G).
  Vec params(d + g);
  params.head(d) = catalog.embedding(uniform_index(rng, n));
  for (Eigen::Index k = 0; k < g; ++k) params[d + k] = 0.1 * standard_normal(rng);

  auto objective = [&](const Vec& p) {
    const Vec logits = p.tail(g);
    const Vec w = (logits.array() - logits.maxCoeff()).exp();
    double total = 0.0;
    for (Eigen::Index k = 0; k < g; ++k) {
      const double anchor = cavs[static_cast<std::size_t>(k)].direction.dot(p.head(d));
      total += w[k] * scorer.attr_f(anchor, static_cast<std::size_t>(k));
    }
    return total / w.sum();
  };

  for (std::size_t t = 0; t < cfg.steps; ++t) {
    const double eta = cfg.step_size * (1.0 - static_cast<double>(t) / static_cast<double>(cfg.steps)) + 0.02;
    const Vec grad = numeric_gradient(objective, params, cfg.fd_step);
    const double gx = grad.head(d).norm();
    const double gz = grad.tail(g).norm();
    if (gx > 0.0) params.head(d) += eta * radius * grad.head(d) / gx;
    if (gz > 0.0) params.tail(g) += eta * 4.0 * grad.tail(g) / gz;
    clamp_norm(params.head(d), radius);
  }

  // Project: strongest attribute, then the unasked items whose attribute
  // score brackets the relaxed anchor's.
  Eigen::Index attr = 0;
  params.tail(g).maxCoeff(&attr);
  const double anchor = cavs[static_cast<std::size_t>(attr)].direction.dot(params.head(d));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const auto& scores = scorer.item_scores();
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(scores(static_cast<Eigen::Index>(a), attr) - anchor) <
           std::abs(scores(static_cast<Eigen::Index>(b), attr) - anchor);
  });
  std::size_t tried = 0;
  for (std::size_t i : order) {
    const AttrQuery q{i, static_cast<std::size_t>(attr)};
    if (asked.asked(q)) continue;
    best.offer(scorer.attr_f(i, q.attr), q);
    if (++tried == 2) break;
  }
}

void gradient_item(QueryScorer& scorer, const ItemCatalog& catalog, const AgentConfig& config,
                   const AskedQueries& asked, Rng& rng, Best& best) {
  const std::size_t n = catalog.size();
  const std::size_t k = config.item_query_size;
  if (k > n) return;
  const auto d = static_cast<Eigen::Index>(catalog.dim());
  const auto kk = static_cast<Eigen::Index>(k);
  const double radius = catalog.max_norm();
  const auto& cfg = config.gradient;

  // Start from k distinct random catalog items.
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), 0);
  for (std::size_t r = 0; r < k; ++r) std::swap(pool[r], pool[r + uniform_index(rng, n - r)]);
  Vec params(kk * d);
  for (Eigen::Index r = 0; r < kk; ++r) params.segment(r * d, d) = catalog.embedding(pool[static_cast<std::size_t>(r)]);

  auto objective = [&](const Vec& p) {
    RowMatrix slots = Eigen::Map<const RowMatrix>(p.data(), kk, d);
    return scorer.relaxed_item_f(slots);
  };

  for (std::size_t t = 0; t < cfg.steps; ++t) {
    const double eta = cfg.step_size * (1.0 - static_cast<double>(t) / static_cast<double>(cfg.steps)) + 0.02;
    const Vec grad = numeric_gradient(objective, params, cfg.fd_step);
    const double gn = grad.norm();
    if (gn > 0.0) params += eta * radius * grad / gn;
    for (Eigen::Index r = 0; r < kk; ++r) clamp_norm(params.segment(r * d, d), radius);
  }

  // Project: each slot keeps its top-c items by dot-product score and every
  // distinct combination is scored by the true F (c^k <= 64).
  std::size_t c = 1;
  while (std::pow(static_cast<double>(c + 1), static_cast<double>(k)) <= 64.0 && c + 1 <= n) ++c;
  std::vector<std::vector<std::size_t>> candidates(k);
  for (Eigen::Index r = 0; r < kk; ++r) {
    const Vec slot_scores = catalog.embeddings() * params.segment(r * d, d);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return slot_scores[static_cast<Eigen::Index>(a)] > slot_scores[static_cast<Eigen::Index>(b)];
    });
    candidates[static_cast<std::size_t>(r)].assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(c));
  }
  Slate slate(k);
  std::vector<std::size_t> pos(k, 0);
  while (true) {
    for (std::size_t r = 0; r < k; ++r) slate[r] = candidates[r][pos[r]];
    Slate sorted = slate;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end() && !asked.asked(slate))
      best.offer(scorer.item_f(slate), ItemQuery{slate});
    std::size_t r = 0;
    while (r < k && ++pos[r] == c) pos[r++] = 0;
    if (r == k) break;
  }
}

}  // namespace

QueryChoice select_query(const BeliefState& belief, const ItemCatalog& catalog, const CavSet& cavs,
                         const AgentConfig& config, const BehaviorConfig& behavior) {
  if (!belief.has_samples()) throw InfeasibleError("select_query needs fresh belief samples");
  const RowMatrix& samples = belief.samples();
  QueryScorer scorer(samples, catalog, cavs, behavior);
  const AskedQueries asked = asked_queries(belief);
  Best best;

  auto run_exhaustive = [&] {
    exhaustive_attr(scorer, asked, best);
    exhaustive_item(scorer, config, asked, eu_star(samples, catalog).best_item, best);
  };

  if (config.optimizer == OptimizerMode::kExhaustive) {
    run_exhaustive();
  } else {
    Rng rng(stable_hash({config.gradient.seed, belief.sampler().seed, belief.history().size(), 0x9a7d}));
    for (std::size_t r = 0; r < config.gradient.restarts; ++r) {
      gradient_attr(scorer, catalog, cavs, config.gradient, asked, rng, best);
      gradient_item(scorer, catalog, config, asked, rng, best);
    }
    // Every projection landed on an already-asked query.
    if (!best.query) run_exhaustive();
  }
  if (!best.query) throw InfeasibleError("no feasible query: no attributes and no unasked item slate");
  return QueryChoice{*best.query, best.value};
}

Slate recommend(const BeliefState& belief, const ItemCatalog& catalog, const AgentConfig& config, Rng& rng,
                const std::vector<std::size_t>& excluded) {
  if (!belief.has_samples()) throw InfeasibleError("recommend needs belief samples");
  const std::size_t k = config.rec_slate_size;
  std::vector<bool> skip(catalog.size(), false);
  std::size_t available = catalog.size();
  for (auto i : excluded)
    if (i < catalog.size() && !skip[i]) {
      skip[i] = true;
      --available;
    }
  if (k > available)
    throw InfeasibleError("slate size " + std::to_string(k) + " exceeds the " + std::to_string(available) +
                          " recommendable items");
  const auto& samples = belief.samples();
  const auto j = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(samples.rows())));
  const Vec scores = catalog.embeddings() * samples.row(j).transpose();

  std::vector<std::size_t> candidates;
  candidates.reserve(available);
  for (std::size_t i = 0; i < catalog.size(); ++i)
    if (!skip[i]) candidates.push_back(i);
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k), candidates.end(),
                    [&](std::size_t a, std::size_t b) {
                      const double sa = scores[static_cast<Eigen::Index>(a)], sb = scores[static_cast<Eigen::Index>(b)];
                      return sa > sb || (sa == sb && a < b);
                    });
  return Slate(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k));
}

AgentDecision decide(const BeliefState& belief, const ItemCatalog& catalog, const CavSet& cavs,
                     const AgentConfig& config, const BehaviorConfig& behavior, std::size_t turn_index, Rng& rng,
                     const std::vector<std::size_t>& excluded) {
  if (turn_index >= config.max_turns)
    throw InfeasibleError("turn " + std::to_string(turn_index) + " is past max_turns");
  if (turn_index + 1 < config.max_turns) {
    std::optional<QueryChoice> choice;
    try {
      choice = select_query(belief, catalog, cavs, config, behavior);
    } catch (const InfeasibleError&) {
      // Nothing left to ask; fall through to a recommendation.
    }
    if (choice) {
      const double baseline = f_baseline(belief.samples(), catalog);
      double estimate = choice->f_value - baseline;
      // F equals the baseline exactly for a collapsed belief; drop round-off.
      if (std::abs(estimate) <= 1e-12 * std::max(1.0, baseline)) estimate = 0.0;
      if (estimate > config.evoi_threshold) {
        AgentAction action = std::visit([](const auto& q) -> AgentAction { return q; }, choice->query);
        return AgentDecision{std::move(action), estimate};
      }
      return AgentDecision{Recommend{recommend(belief, catalog, config, rng, excluded)}, estimate};
    }
  }
  return AgentDecision{Recommend{recommend(belief, catalog, config, rng, excluded)}, std::nullopt};
}

}  // namespace crsim
