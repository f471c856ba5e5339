#include "crsim/belief.hpp"
#include "crsim/errors.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace crsim {
namespace {

using testing::make_catalog;
using testing::make_cav;
using testing::vec;

UserPrior prior2(Vec mean, Vec var) {
  UserPrior p;
  p.id = 1;
  p.mean = std::move(mean);
  p.variance = std::move(var);
  return p;
}

double gaussian_log_density(const Vec& x, const Vec& mean, const Vec& var) {
  double s = 0.0;
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    const double z = x[k] - mean[k];
    s += -0.5 * z * z / var[k] - 0.5 * std::log(2.0 * M_PI * var[k]);
  }
  return s;
}

struct Fixture {
  ItemCatalog catalog = make_catalog({{1.0, 0.0}, {0.0, 1.0}, {0.6, 0.6}});
  CavSet cavs{make_cav(1, "first", vec({1, 0}), 1.0), make_cav(2, "second", vec({0, 1}), 0.5)};
  LikelihoodModel model() const { return LikelihoodModel{&catalog, &cavs, BehaviorConfig{}, RejectLikelihood{}}; }
};

TEST(Posterior, EmptyHistoryIsGaussianLogDensity) {
  Fixture f;
  BeliefState b(prior2(vec({0.3, -0.2}), vec({0.5, 2.0})), SamplerConfig{});
  for (const Vec& x : {vec({0, 0}), vec({1.5, -2}), vec({-3, 4})})
    EXPECT_NEAR(log_unnormalized_posterior(x, b, f.model()), gaussian_log_density(x, b.prior().mean, b.prior().variance),
                1e-10);
}

TEST(Posterior, ZeroDifferenceAttributeAddsLogHalf) {
  Fixture f;
  BeliefState b(prior2(vec({0, 0}), vec({1, 1})), SamplerConfig{});
  const Vec phi = vec({2.0, 0.0});  // target (1, 0) equals the anchor item 0
  const double before = log_unnormalized_posterior(phi, b, f.model());
  b.update({AttrQuery{0, 0}, AttrAnswer{1}}, f.cavs.size());
  EXPECT_NEAR(log_unnormalized_posterior(phi, b, f.model()) - before, std::log(0.5), 1e-12);
  b.update({AttrQuery{0, 0}, AttrAnswer{-1}}, f.cavs.size());
  EXPECT_NEAR(log_unnormalized_posterior(phi, b, f.model()) - before, 2 * std::log(0.5), 1e-12);
}

TEST(Posterior, AdditiveOverHistory) {
  Fixture f;
  const auto m = f.model();
  const Observation o1{AttrQuery{2, 1}, AttrAnswer{-1}};
  const Observation o2{ItemQuery{{0, 1}}, ItemChoice{1}};
  BeliefState b0(prior2(vec({0, 0}), vec({1, 1})), SamplerConfig{});
  const auto b1 = update(b0, o1, 2);
  const auto b2 = update(b0, o2, 2);
  const auto b12 = update(b1, o2, 2);
  for (const Vec& x : {vec({0.4, 0.9}), vec({-1, 0.2}), vec({2, -1})}) {
    const double p0 = log_unnormalized_posterior(x, b0, m);
    const double inc1 = log_unnormalized_posterior(x, b1, m) - p0;
    const double inc2 = log_unnormalized_posterior(x, b2, m) - p0;
    EXPECT_NEAR(log_unnormalized_posterior(x, b12, m), p0 + inc1 + inc2, 1e-12);
    EXPECT_NEAR(inc1 + inc2, log_likelihood(o1, x, m) + log_likelihood(o2, x, m), 1e-12);
  }
}

TEST(Posterior, UpdateOrderCommutes) {
  Fixture f;
  const auto m = f.model();
  const Observation o1{Recommend{{0, 2}}, SlateReject{Critique{1, 1}}};
  const Observation o2{AttrQuery{1, 0}, AttrAnswer{1}};
  BeliefState b0(prior2(vec({0, 0}), vec({1, 1})), SamplerConfig{});
  const auto a = update(update(b0, o1, 2), o2, 2);
  const auto b = update(update(b0, o2, 2), o1, 2);
  for (const Vec& x : {vec({0.4, 0.9}), vec({-1, 0.2}), vec({2, -1})})
    EXPECT_NEAR(log_unnormalized_posterior(x, a, m), log_unnormalized_posterior(x, b, m), 1e-12);
}

TEST(Posterior, AcceptanceIsLogitWithNull) {
  Fixture f;
  const auto m = f.model();
  const Vec x = vec({0.7, -0.4});
  const Observation obs{Recommend{{2, 0}}, SlateAccept{1}};
  EXPECT_NEAR(log_likelihood(obs, x, m), logit_log_prob({2, 0}, 1, x, f.catalog, m.behavior, true), 1e-15);
  // Null utility 0 adds exp(0) to the denominator.
  const double u0 = f.catalog.embedding(2).dot(x), u1 = f.catalog.embedding(0).dot(x);
  EXPECT_NEAR(log_likelihood(obs, x, m), u1 - std::log(std::exp(u0) + std::exp(u1) + 1.0), 1e-12);
}

TEST(Posterior, RejectWithCritiqueTerms) {
  Fixture f;
  auto m = f.model();
  const Vec x = vec({0.7, -0.4});
  const Slate slate{0, 2};
  const Observation obs{Recommend{slate}, SlateReject{Critique{1, -1}}};
  const double null_term = logit_log_prob(slate, slate.size(), x, f.catalog, m.behavior, true);
  const Vec target = f.catalog.max_norm() * x.normalized();
  const Vec mean = (f.catalog.embedding(0) + f.catalog.embedding(2)) / 2.0;
  const double crit = std::log(oracle::Phi(-f.cavs[1].direction.dot(target - mean) / f.cavs[1].sigma));
  EXPECT_NEAR(log_likelihood(obs, x, m), null_term + crit, 1e-12);
  m.reject.critique = false;
  EXPECT_NEAR(log_likelihood(obs, x, m), null_term, 1e-12);
  m.reject = {false, true};
  EXPECT_NEAR(log_likelihood(obs, x, m), crit, 1e-12);
}

TEST(Update, AppendsAndInvalidatesCache) {
  Fixture f;
  BeliefState b(prior2(vec({0, 0}), vec({1, 1})), SamplerConfig{10, 10, 1, 0.5, 3});
  refresh_samples(b, f.model());
  ASSERT_TRUE(b.has_samples());
  b.update({AttrQuery{0, 0}, AttrAnswer{1}}, 2);
  EXPECT_EQ(b.history().size(), 1u);
  EXPECT_FALSE(b.has_samples());
}

TEST(Update, IncompatibleObservationThrows) {
  BeliefState b(prior2(vec({0, 0}), vec({1, 1})), SamplerConfig{});
  EXPECT_THROW(b.update({AttrQuery{0, 0}, ItemChoice{0}}, 2), InfeasibleError);
  EXPECT_THROW(b.update({ItemQuery{{0, 1}}, ItemChoice{2}}, 2), InfeasibleError);
  EXPECT_THROW(b.update({Recommend{{0, 1}}, SlateReject{Critique{5, 1}}}, 2), InfeasibleError);
  EXPECT_TRUE(b.history().empty());
}

TEST(Sampler, EmptyHistoryMatchesPrior) {
  Fixture f;
  const Vec mean = vec({0.5, -1.0}), var = vec({1.0, 0.25});
  BeliefState b(prior2(mean, var), SamplerConfig{2000, 500, 10, 1.0, 11});
  const RowMatrix s = mh_sample(b, f.model());
  ASSERT_EQ(s.rows(), 2000);
  const auto [m, v] = oracle::column_moments(s);
  for (Eigen::Index k = 0; k < 2; ++k) {
    const double se = std::sqrt(var[k] / oracle::effective_sample_size(s, k));
    EXPECT_LT(std::abs(m[k] - mean[k]), 3 * se) << k;
    EXPECT_NEAR(v[k] / var[k], 1.0, 0.10) << k;
  }
}

TEST(Sampler, ConjugateGaussianOracle) {
  const auto catalog = make_catalog({{1.0}});
  const CavSet cavs;
  UserPrior p;
  p.mean = vec({0.0});
  p.variance = vec({1.0});
  BeliefState b(p, SamplerConfig{20000, 500, 5, 1.0, 5});
  // Pseudo-observation y = 1.5 with noise variance 0.5: posterior N(1, 1/3).
  b.extra_log_likelihood = [](const Vec& x) { return -(x[0] - 1.5) * (x[0] - 1.5) / (2 * 0.5); };
  const RowMatrix s = mh_sample(b, LikelihoodModel{&catalog, &cavs, {}, {}});
  const auto [m, v] = oracle::column_moments(s);
  EXPECT_NEAR(m[0], 1.0, 0.05);
  EXPECT_NEAR(v[0] / (1.0 / 3.0), 1.0, 0.05);
}

TEST(Sampler, ProbitObservationMatchesGridOracle) {
  Fixture f;
  const Vec mean = vec({0.3, 0.1}), var = vec({1.0, 1.0});
  BeliefState b(prior2(mean, var), SamplerConfig{40000, 1000, 5, 1.0, 21});
  const Observation obs{AttrQuery{2, 1}, AttrAnswer{1}};
  b.update(obs, f.cavs.size());
  const RowMatrix s = mh_sample(b, f.model());

  const Vec anchor = f.catalog.embedding(2);
  const auto grid = oracle::grid_moments_2d(mean, var, [&](const Vec& x) {
    return std::log(oracle::attr_plus(x, anchor, f.cavs[1], f.catalog.max_norm()));
  });
  const auto [m, v] = oracle::column_moments(s);
  for (int k = 0; k < 2; ++k) {
    const double tol = 0.05 * std::max(std::abs(grid.mean[k]), std::sqrt(grid.var[k]));
    EXPECT_NEAR(m[k], grid.mean[k], tol) << k;
    EXPECT_NEAR(v[k] / grid.var[k], 1.0, 0.05) << k;
  }
  // The observation moves the posterior: more of the second attribute.
  EXPECT_GT(grid.mean[1], mean[1] + 0.2);
}

TEST(Sampler, HigherProposalsAlwaysAccepted) {
  Fixture f;
  BeliefState b(prior2(vec({0, 0}), vec({1, 1})), SamplerConfig{200, 100, 2, 0.8, 9});
  b.update({AttrQuery{0, 0}, AttrAnswer{-1}}, 2);
  b.update({ItemQuery{{0, 1}}, ItemChoice{0}}, 2);
  std::vector<MhStep> trace;
  mh_sample(b, f.model(), &trace);
  ASSERT_EQ(trace.size(), 100u + 200u * 2u);
  std::size_t uphill = 0, rejected = 0;
  for (std::size_t t = 0; t < trace.size(); ++t) {
    const auto& st = trace[t];
    if (st.proposed_log_posterior >= st.current_log_posterior) {
      ++uphill;
      EXPECT_TRUE(st.accepted) << t;
    }
    if (!st.accepted) ++rejected;
    if (t + 1 < trace.size()) {
      const double next = st.accepted ? st.proposed_log_posterior : st.current_log_posterior;
      EXPECT_EQ(trace[t + 1].current_log_posterior, next) << t;
    }
  }
  EXPECT_GT(uphill, 0u);
  EXPECT_GT(rejected, 0u);
}

TEST(Sampler, Reproducible) {
  Fixture f;
  BeliefState b(prior2(vec({0, 0}), vec({1, 1})), SamplerConfig{50, 50, 3, 0.5, 77});
  b.update({AttrQuery{1, 1}, AttrAnswer{1}}, 2);
  const RowMatrix a = mh_sample(b, f.model());
  const RowMatrix c = mh_sample(b, f.model());
  EXPECT_TRUE(a == c);
  BeliefState other(b.prior(), SamplerConfig{50, 50, 3, 0.5, 78});
  other.update(b.history().front(), 2);
  EXPECT_FALSE(mh_sample(other, f.model()) == a);
}

TEST(Sampler, ContractsAfterAttributeAnswers) {
  // Items on a ring; three attribute directions in d=3.
  std::vector<std::vector<double>> items;
  for (int i = 0; i < 24; ++i) {
    const double a = 2 * M_PI * i / 24.0;
    items.push_back({std::cos(a), std::sin(a), 0.5 * std::cos(3 * a)});
  }
  const auto catalog = make_catalog(items);
  const CavSet cavs{make_cav(1, "a", vec({1, 0, 0}), 0.3), make_cav(2, "b", vec({0, 1, 0}), 0.3),
                    make_cav(3, "c", vec({0, 0, 1}), 0.3)};
  const LikelihoodModel model{&catalog, &cavs, BehaviorConfig{}, RejectLikelihood{}};
  const GroundTruthUser user{7, vec({0.8, -0.5, 0.3})};
  UserPrior p;
  p.mean = Vec::Zero(3);
  p.variance = Vec::Ones(3);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(stable_hash({seed, 0x77}));
    BeliefState b(p, SamplerConfig{400, 500, 5, 0.25, seed});
    for (int t = 0; t < 20; ++t) {
      const AttrQuery q{uniform_index(rng, catalog.size()), uniform_index(rng, cavs.size())};
      const Response r = respond_to_attr_query(q, user, cavs, catalog, rng);
      b.update({q, r}, cavs.size());
    }
    const auto [m, v] = oracle::column_moments(mh_sample(b, model));
    EXPECT_LT(v.mean(), p.variance.mean()) << "seed " << seed;
  }
}

}  // namespace
}  // namespace crsim
