#pragma once

// Reference implementations written directly from the model formulas. They
// share no code with the library beyond the data types, so agreement between
// the two is evidence of correctness rather than of consistency.

#include "crsim/agent.hpp"
#include "crsim/behavior.hpp"
#include "crsim/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace crsim::oracle {

inline double Phi(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

/// Softmax of utilities / T over the slate (no null item).
inline std::vector<double> choice_probs(const std::vector<std::size_t>& slate, const Vec& phi,
                                        const ItemCatalog& catalog, double temperature) {
  std::vector<double> u;
  for (auto i : slate) u.push_back(catalog.embedding(i).dot(phi) / temperature);
  const double mx = *std::max_element(u.begin(), u.end());
  double z = 0.0;
  for (double& x : u) z += (x = std::exp(x - mx));
  for (double& x : u) x /= z;
  return u;
}

/// P(+1) for an attribute query anchored at `anchor` under embedding phi.
inline double attr_plus(const Vec& phi, const Vec& anchor, const Cav& cav, double max_norm) {
  if (phi.norm() == 0.0) return 0.5;  // direction undefined on a null set
  const Vec target = max_norm * phi / phi.norm();
  return Phi(cav.direction.dot(target - anchor) / cav.sigma);
}

/// Response distribution of a query under one embedding.
inline std::vector<double> response_probs(const Query& q, const Vec& phi, const ItemCatalog& catalog,
                                          const CavSet& cavs, double temperature) {
  if (auto* iq = std::get_if<ItemQuery>(&q)) return choice_probs(iq->slate, phi, catalog, temperature);
  const auto& aq = std::get<AttrQuery>(q);
  const double p = attr_plus(phi, catalog.embedding(aq.item), cavs[aq.attr], catalog.max_norm());
  return {p, 1.0 - p};
}

/// (max_norm / m) * sum_rho || sum_j phi_j P(rho | q, phi_j) ||.
inline double f_direct(const Query& q, const RowMatrix& samples, const ItemCatalog& catalog, const CavSet& cavs,
                       double temperature) {
  const auto m = samples.rows();
  std::vector<Vec> acc;
  for (Eigen::Index j = 0; j < m; ++j) {
    const Vec phi = samples.row(j).transpose();
    const auto p = response_probs(q, phi, catalog, cavs, temperature);
    if (acc.empty()) acc.assign(p.size(), Vec::Zero(phi.size()));
    for (std::size_t r = 0; r < p.size(); ++r) acc[r] += p[r] * phi;
  }
  double total = 0.0;
  for (const auto& a : acc) total += a.norm();
  return catalog.max_norm() / static_cast<double>(m) * total;
}

/// max_i of the mean utility, with its argmax (lowest index on ties).
inline std::pair<double, std::size_t> eu_star_direct(const RowMatrix& samples, const ItemCatalog& catalog) {
  double best = -INFINITY;
  std::size_t arg = 0;
  for (std::size_t i = 0; i < catalog.size(); ++i) {
    double s = 0.0;
    for (Eigen::Index j = 0; j < samples.rows(); ++j) s += samples.row(j).dot(catalog.embedding(i).transpose());
    s /= static_cast<double>(samples.rows());
    if (s > best) {
      best = s;
      arg = i;
    }
  }
  return {best, arg};
}

/// Exact EVOI of a query over a weighted atom set, by explicit Bayes tables.
inline double evoi_direct(const Query& q, const RowMatrix& atoms, const std::vector<double>& w,
                          const ItemCatalog& catalog, const CavSet& cavs, double temperature) {
  const auto n_atoms = static_cast<std::size_t>(atoms.rows());
  std::vector<std::vector<double>> lik(n_atoms);
  for (std::size_t a = 0; a < n_atoms; ++a)
    lik[a] = response_probs(q, atoms.row(static_cast<Eigen::Index>(a)).transpose(), catalog, cavs, temperature);
  auto best_given = [&](const std::vector<double>& weights) {
    double best = -INFINITY;
    for (std::size_t i = 0; i < catalog.size(); ++i) {
      double s = 0.0;
      for (std::size_t a = 0; a < n_atoms; ++a)
        s += weights[a] * atoms.row(static_cast<Eigen::Index>(a)).dot(catalog.embedding(i).transpose());
      best = std::max(best, s);
    }
    return best;
  };
  const double prior_best = best_given(w);
  double peu = 0.0;
  for (std::size_t r = 0; r < lik[0].size(); ++r) {
    double p_r = 0.0;
    for (std::size_t a = 0; a < n_atoms; ++a) p_r += w[a] * lik[a][r];
    if (p_r <= 0.0) continue;
    std::vector<double> post(n_atoms);
    for (std::size_t a = 0; a < n_atoms; ++a) post[a] = w[a] * lik[a][r] / p_r;
    peu += p_r * best_given(post);
  }
  return peu - prior_best;
}

/// Every attribute query and every item pair, in a fixed order.
inline std::vector<Query> all_queries_pairs(std::size_t n_items, std::size_t n_attrs) {
  std::vector<Query> out;
  for (std::size_t i = 0; i < n_items; ++i)
    for (std::size_t g = 0; g < n_attrs; ++g) out.push_back(AttrQuery{i, g});
  for (std::size_t i = 0; i < n_items; ++i)
    for (std::size_t j = i + 1; j < n_items; ++j) out.push_back(ItemQuery{{i, j}});
  return out;
}

inline double max_f_over(const std::vector<Query>& queries, const RowMatrix& samples, const ItemCatalog& catalog,
                         const CavSet& cavs, double temperature) {
  double best = -INFINITY;
  for (const auto& q : queries) best = std::max(best, f_direct(q, samples, catalog, cavs, temperature));
  return best;
}

struct Moments2 {
  double mean[2];
  double var[2];
};

/// Posterior moments of a 2-d density prior * exp(log_lik) on an n x n grid
/// spanning the prior mean +- 5 prior standard deviations.
inline Moments2 grid_moments_2d(const Vec& prior_mean, const Vec& prior_var,
                                const std::function<double(const Vec&)>& log_lik, int n = 201) {
  const double sd0 = std::sqrt(prior_var(0)), sd1 = std::sqrt(prior_var(1));
  std::vector<double> xs(n), ys(n);
  for (int k = 0; k < n; ++k) {
    xs[k] = prior_mean(0) - 5 * sd0 + 10 * sd0 * k / (n - 1);
    ys[k] = prior_mean(1) - 5 * sd1 + 10 * sd1 * k / (n - 1);
  }
  std::vector<double> logw(static_cast<std::size_t>(n) * n);
  double mx = -INFINITY;
  Vec p(2);
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b) {
      p << xs[a], ys[b];
      const double dx = (xs[a] - prior_mean(0)) / sd0, dy = (ys[b] - prior_mean(1)) / sd1;
      const double lw = -0.5 * (dx * dx + dy * dy) + log_lik(p);
      logw[static_cast<std::size_t>(a) * n + b] = lw;
      mx = std::max(mx, lw);
    }
  double z = 0, m0 = 0, m1 = 0, s0 = 0, s1 = 0;
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b) {
      const double w = std::exp(logw[static_cast<std::size_t>(a) * n + b] - mx);
      z += w;
      m0 += w * xs[a];
      m1 += w * ys[b];
      s0 += w * xs[a] * xs[a];
      s1 += w * ys[b] * ys[b];
    }
  Moments2 out;
  out.mean[0] = m0 / z;
  out.mean[1] = m1 / z;
  out.var[0] = s0 / z - out.mean[0] * out.mean[0];
  out.var[1] = s1 / z - out.mean[1] * out.mean[1];
  return out;
}

/// Sample mean and (unbiased) variance per column.
inline std::pair<Vec, Vec> column_moments(const RowMatrix& s) {
  const Vec mean = s.colwise().mean().transpose();
  Vec var(s.cols());
  for (Eigen::Index k = 0; k < s.cols(); ++k)
    var(k) = (s.col(k).array() - mean(k)).square().sum() / static_cast<double>(s.rows() - 1);
  return {mean, var};
}

/// Effective sample size of one column via the initial positive sequence of
/// autocorrelations.
inline double effective_sample_size(const RowMatrix& s, Eigen::Index col) {
  const auto n = s.rows();
  const double mean = s.col(col).mean();
  double c0 = 0.0;
  for (Eigen::Index t = 0; t < n; ++t) c0 += (s(t, col) - mean) * (s(t, col) - mean);
  c0 /= static_cast<double>(n);
  if (c0 <= 0.0) return static_cast<double>(n);
  double tau = 1.0;
  for (Eigen::Index lag = 1; lag < n / 2; ++lag) {
    double c = 0.0;
    for (Eigen::Index t = 0; t + lag < n; ++t) c += (s(t, col) - mean) * (s(t + lag, col) - mean);
    const double rho = c / static_cast<double>(n) / c0;
    if (rho <= 0.0) break;
    tau += 2.0 * rho;
  }
  return static_cast<double>(n) / tau;
}

}  // namespace crsim::oracle
