#pragma once

#include "crsim/numeric.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace crsim {

using ItemId = std::int64_t;
using UserId = std::int64_t;

struct Rating {
  UserId user;
  ItemId item;
  double value;
};

/// Ratings with dense index maps. Records are unique per (user, item).
class RatingsDataset {
 public:
  RatingsDataset() = default;
  explicit RatingsDataset(std::vector<Rating> records);

  const std::vector<Rating>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }

  /// Sorted distinct ids; the position in these vectors is the dense index.
  const std::vector<UserId>& user_ids() const { return user_ids_; }
  const std::vector<ItemId>& item_ids() const { return item_ids_; }
  std::size_t user_index(UserId id) const { return user_index_.at(id); }
  std::size_t item_index(ItemId id) const { return item_index_.at(id); }

  /// Keeps items with >= min_item ratings, then users with >= min_user ratings.
  RatingsDataset filtered(std::size_t min_item_ratings, std::size_t min_user_ratings) const;

 private:
  std::vector<Rating> records_;
  std::vector<UserId> user_ids_;
  std::vector<ItemId> item_ids_;
  std::unordered_map<UserId, std::size_t> user_index_;
  std::unordered_map<ItemId, std::size_t> item_index_;
};

struct ItemInfo {
  ItemId id = 0;
  std::string title;
  int year = 0;  // 0 = unknown

  /// "Title (Year)", or the bare title when the year is unknown.
  std::string display_title() const;
};

/// The recommendable corpus: item metadata plus one embedding row per item.
/// Immutable after construction; the maximum embedding norm is cached.
class ItemCatalog {
 public:
  ItemCatalog() = default;
  ItemCatalog(std::vector<ItemInfo> items, RowMatrix embeddings);

  std::size_t size() const { return items_.size(); }
  std::size_t dim() const { return static_cast<std::size_t>(embeddings_.cols()); }

  const ItemInfo& item(std::size_t index) const { return items_[index]; }
  const std::vector<ItemInfo>& items() const { return items_; }
  auto embedding(std::size_t index) const { return embeddings_.row(static_cast<Eigen::Index>(index)).transpose(); }
  const RowMatrix& embeddings() const { return embeddings_; }

  double max_norm() const { return max_norm_; }

  std::optional<std::size_t> find(ItemId id) const;
  /// Throws DataError on unknown ids.
  std::size_t index_of(ItemId id) const;

 private:
  std::vector<ItemInfo> items_;
  RowMatrix embeddings_;
  std::unordered_map<ItemId, std::size_t> index_;
  double max_norm_ = 0.0;
};

struct GroundTruthUser {
  UserId id = 0;
  Vec embedding;
};

/// Diagonal Gaussian prior over a user's embedding.
struct UserPrior {
  UserId id = 0;
  Vec mean;
  Vec variance;

  void validate(std::size_t dim) const;
};

/// Concept activation vector for a soft attribute: a unit direction in item
/// embedding space plus the probit noise scale used by response models.
struct Cav {
  int id = 0;
  std::string name;
  Vec direction;
  double sigma = 1.0;

  void validate(std::size_t dim) const;
};

using CavSet = std::vector<Cav>;

/// Throws DataError when the id is not in the set.
std::size_t cav_index(const CavSet& cavs, int id);

// ---------------------------------------------------------------------------
// File formats

/// `userId,movieId,rating,timestamp`; the timestamp column is ignored.
RatingsDataset read_ratings_csv(const std::filesystem::path& path);
void write_ratings_csv(const std::filesystem::path& path, const RatingsDataset& data);

/// Reads ratings and applies the popularity filters (items first, then users).
/// Throws ConfigError when nothing survives the filter.
RatingsDataset load_ratings(const std::filesystem::path& path, std::size_t min_item_ratings,
                            std::size_t min_user_ratings);

/// `movieId,title,year`.
std::vector<ItemInfo> read_catalog_csv(const std::filesystem::path& path);
void write_catalog_csv(const std::filesystem::path& path, const std::vector<ItemInfo>& items);

struct TagAssertion {
  ItemId item;
  std::string tag;
};

/// `movieId,tag`.
std::vector<TagAssertion> read_tags_csv(const std::filesystem::path& path);
void write_tags_csv(const std::filesystem::path& path, const std::vector<TagAssertion>& tags);

/// Embedding store: a `# d=<d>` header then `id,v0,...,v{d-1}` per line.
struct EmbeddingTable {
  std::vector<std::int64_t> ids;
  RowMatrix values;
};

EmbeddingTable read_embeddings(const std::filesystem::path& path);
void write_embeddings(const std::filesystem::path& path, const EmbeddingTable& table);

/// Priors use the embedding store layout with 2d columns: mean then variance.
std::vector<UserPrior> read_priors(const std::filesystem::path& path);
void write_priors(const std::filesystem::path& path, const std::vector<UserPrior>& priors);

/// JSON list of `{"id","name","sigma","direction":[...]}`.
CavSet read_cavs(const std::filesystem::path& path);
void write_cavs(const std::filesystem::path& path, const CavSet& cavs);

/// Joins metadata with an embedding table; items without metadata get an
/// empty title. Only ids present in `table` enter the catalog.
ItemCatalog make_catalog(const std::vector<ItemInfo>& metadata, const EmbeddingTable& table);

// ---------------------------------------------------------------------------
// Training

struct MfConfig {
  std::size_t dim = 16;
  double reg = 0.1;
  std::size_t iters = 20;
  std::uint64_t seed = 0;
  /// Prior variance scale s in s / (n_u + reg).
  double prior_scale = 1.0;
};

struct MfModel {
  EmbeddingTable items;
  std::vector<GroundTruthUser> users;
  std::vector<UserPrior> priors;
  /// Regularized squared loss after initialization and after every sweep.
  std::vector<double> loss_history;
};

/// Alternating least squares on the observed ratings with a fixed number of
/// sweeps. Each user's prior is centred on the learned user embedding with
/// isotropic variance prior_scale / (n_u + reg).
MfModel train_mf(const RatingsDataset& data, const MfConfig& config);

/// Regularized squared reconstruction loss of a factorization.
double mf_loss(const RatingsDataset& data, const RowMatrix& user_factors, const RowMatrix& item_factors,
               double reg);

struct LogisticFit {
  Vec weights;
  double bias = 0.0;
};

struct LogisticConfig {
  double reg = 1e-3;
  std::size_t iters = 2000;
};

/// L2-regularized logistic regression (bias unregularized) by full-batch
/// gradient descent with a fixed step of 1/L, L the smoothness constant.
LogisticFit fit_logistic(const RowMatrix& features, const std::vector<int>& labels, const LogisticConfig& config);

/// Learns the attribute direction separating positives (label 1) from
/// negatives (label 0). The bias is fitted and discarded.
Cav learn_cav(const ItemCatalog& catalog, const std::vector<ItemId>& positives, const std::vector<ItemId>& negatives,
              const std::string& attribute_name, double reg, int attribute_id = 0, double sigma = 1.0);

struct CavTrainingSet {
  std::vector<ItemId> positives;
  std::vector<ItemId> negatives;
};

/// Positives are catalog items tagged `tag`; negatives are untagged catalog
/// items subsampled (seeded) to the size of the positive set.
CavTrainingSet cav_training_set(const std::vector<TagAssertion>& tags, const ItemCatalog& catalog,
                                const std::string& tag, std::uint64_t seed);

}  // namespace crsim
