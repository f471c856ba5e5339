#pragma once

#include "crsim/corpus.hpp"

#include <cstdint>
#include <vector>

namespace crsim {

struct SyntheticConfig {
  std::size_t items = 500;
  std::size_t users = 1000;
  std::size_t dim = 8;
  std::size_t attributes = 8;
  /// Item embeddings are N(0, item_scale^2 I).
  double item_scale = 0.5;
  /// Prior means are N(0, population_variance I); the true embedding is drawn
  /// from the user's own prior N(mean, prior_variance I).
  double population_variance = 0.5;
  double prior_variance = 0.5;
  double cav_sigma = 1.0;
  /// Ratings emitted per user for the CSV export.
  std::size_t ratings_per_user = 60;
  /// Fraction of items, ranked by CAV score, tagged with each attribute.
  double tag_fraction = 0.1;
  std::uint64_t seed = 0;
};

/// A self-consistent corpus with Gaussian embeddings: users are calibrated
/// draws from their priors, CAVs are random unit directions.
struct SyntheticCorpus {
  ItemCatalog catalog;
  std::vector<GroundTruthUser> users;
  std::vector<UserPrior> priors;
  CavSet cavs;
};

SyntheticCorpus make_synthetic_corpus(const SyntheticConfig& config);

/// CSV-level export of a synthetic corpus: ratings on a 0.5..5 star scale,
/// tags from the top-scoring items per attribute, and catalog metadata.
struct SyntheticFiles {
  RatingsDataset ratings;
  std::vector<TagAssertion> tags;
  std::vector<ItemInfo> items;
};

SyntheticFiles export_synthetic(const SyntheticCorpus& corpus, const SyntheticConfig& config);

}  // namespace crsim
