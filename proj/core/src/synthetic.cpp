#include "crsim/synthetic.hpp"

#include "crsim/errors.hpp"
#include "crsim/rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

namespace crsim {

namespace {

constexpr std::array<const char*, 16> kAttributeNames = {
    "funny",   "romantic", "serious",  "violent", "scary",      "thought-provoking", "cheesy", "dark",
    "uplifting", "quirky", "suspenseful", "realistic", "visually stunning", "slow", "emotional", "campy"};

Vec gaussian_vector(Rng& rng, std::size_t d, double scale) {
  Vec v(static_cast<Eigen::Index>(d));
  for (Eigen::Index k = 0; k < v.size(); ++k) v[k] = scale * standard_normal(rng);
  return v;
}

}  // namespace

SyntheticCorpus make_synthetic_corpus(const SyntheticConfig& config) {
  if (config.items < 1 || config.users < 1 || config.dim < 1)
    throw ConfigError("synthetic corpus needs items, users and dim >= 1");
  if (!(config.item_scale > 0.0) || !(config.prior_variance > 0.0) || !(config.population_variance >= 0.0) ||
      !(config.cav_sigma > 0.0))
    throw ConfigError("synthetic corpus scales must be positive");

  Rng rng(stable_hash({config.seed, 0x5eed}));
  const auto d = config.dim;

  std::vector<ItemInfo> infos;
  RowMatrix emb(static_cast<Eigen::Index>(config.items), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < config.items; ++i) {
    infos.push_back(ItemInfo{static_cast<ItemId>(i + 1), "Synthetic Movie " + std::to_string(i + 1),
                             1950 + static_cast<int>(i % 70)});
    emb.row(static_cast<Eigen::Index>(i)) = gaussian_vector(rng, d, config.item_scale).transpose();
  }

  SyntheticCorpus corpus;
  corpus.catalog = ItemCatalog(std::move(infos), std::move(emb));

  const double pop_sd = std::sqrt(config.population_variance);
  const double prior_sd = std::sqrt(config.prior_variance);
  for (std::size_t u = 0; u < config.users; ++u) {
    const auto id = static_cast<UserId>(u + 1);
    Vec mean = gaussian_vector(rng, d, pop_sd);
    Vec truth = mean + gaussian_vector(rng, d, prior_sd);
    corpus.priors.push_back(UserPrior{id, mean, Vec::Constant(static_cast<Eigen::Index>(d), config.prior_variance)});
    corpus.users.push_back(GroundTruthUser{id, std::move(truth)});
  }

  for (std::size_t g = 0; g < config.attributes; ++g) {
    Vec dir = gaussian_vector(rng, d, 1.0);
    while (dir.norm() < 1e-9) dir = gaussian_vector(rng, d, 1.0);
    std::string name = g < kAttributeNames.size() ? kAttributeNames[g] : "attribute " + std::to_string(g);
    corpus.cavs.push_back(Cav{static_cast<int>(g), std::move(name), dir / dir.norm(), config.cav_sigma});
  }
  return corpus;
}

SyntheticFiles export_synthetic(const SyntheticCorpus& corpus, const SyntheticConfig& config) {
  SyntheticFiles files;
  files.items = corpus.catalog.items();
  const std::size_t n = corpus.catalog.size();
  Rng rng(stable_hash({config.seed, 0xfa7e}));

  std::vector<Rating> records;
  std::vector<std::size_t> order(n);
  for (const auto& user : corpus.users) {
    std::iota(order.begin(), order.end(), 0);
    const std::size_t take = std::min(n, config.ratings_per_user);
    for (std::size_t i = 0; i < take; ++i) std::swap(order[i], order[i + uniform_index(rng, n - i)]);
    for (std::size_t i = 0; i < take; ++i) {
      const double utility = corpus.catalog.embedding(order[i]).dot(user.embedding);
      double stars = std::round(2.0 * (3.0 + utility + 0.25 * standard_normal(rng))) / 2.0;
      stars = std::clamp(stars, 0.5, 5.0);
      records.push_back(Rating{user.id, corpus.catalog.item(order[i]).id, stars});
    }
  }
  files.ratings = RatingsDataset(std::move(records));

  const auto tagged = std::max<std::size_t>(1, static_cast<std::size_t>(config.tag_fraction * static_cast<double>(n)));
  for (const auto& cav : corpus.cavs) {
    Vec scores = corpus.catalog.embeddings() * cav.direction;
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return scores[static_cast<Eigen::Index>(a)] > scores[static_cast<Eigen::Index>(b)]; });
    for (std::size_t i = 0; i < std::min(tagged, n); ++i)
      files.tags.push_back(TagAssertion{corpus.catalog.item(idx[i]).id, cav.name});
  }
  return files;
}

}  // namespace crsim
