#include "crsim/corpus.hpp"

#include "csv.hpp"
#include "crsim/errors.hpp"
#include "crsim/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_set>

namespace crsim {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// RatingsDataset

RatingsDataset::RatingsDataset(std::vector<Rating> records) : records_(std::move(records)) {
  std::set<std::pair<UserId, ItemId>> seen;
  std::set<UserId> users;
  std::set<ItemId> items;
  for (const auto& r : records_) {
    if (!std::isfinite(r.value) || r.value == 0.0)
      throw DataError("rating for user " + std::to_string(r.user) + ", item " + std::to_string(r.item) +
                      " must be finite and nonzero");
    if (!seen.emplace(r.user, r.item).second)
      throw DataError("duplicate rating for user " + std::to_string(r.user) + ", item " + std::to_string(r.item));
    users.insert(r.user);
    items.insert(r.item);
  }
  user_ids_.assign(users.begin(), users.end());
  item_ids_.assign(items.begin(), items.end());
  for (std::size_t i = 0; i < user_ids_.size(); ++i) user_index_[user_ids_[i]] = i;
  for (std::size_t i = 0; i < item_ids_.size(); ++i) item_index_[item_ids_[i]] = i;
}

RatingsDataset RatingsDataset::filtered(std::size_t min_item_ratings, std::size_t min_user_ratings) const {
  std::unordered_map<ItemId, std::size_t> item_counts;
  for (const auto& r : records_) ++item_counts[r.item];
  std::vector<Rating> kept;
  kept.reserve(records_.size());
  for (const auto& r : records_)
    if (item_counts[r.item] >= min_item_ratings) kept.push_back(r);

  std::unordered_map<UserId, std::size_t> user_counts;
  for (const auto& r : kept) ++user_counts[r.user];
  std::vector<Rating> out;
  out.reserve(kept.size());
  for (const auto& r : kept)
    if (user_counts[r.user] >= min_user_ratings) out.push_back(r);
  return RatingsDataset(std::move(out));
}

// ---------------------------------------------------------------------------
// Catalog

std::string ItemInfo::display_title() const {
  if (year == 0) return title;
  return title + " (" + std::to_string(year) + ")";
}

ItemCatalog::ItemCatalog(std::vector<ItemInfo> items, RowMatrix embeddings)
    : items_(std::move(items)), embeddings_(std::move(embeddings)) {
  if (static_cast<Eigen::Index>(items_.size()) != embeddings_.rows())
    throw DataError("catalog has " + std::to_string(items_.size()) + " items but " +
                    std::to_string(embeddings_.rows()) + " embeddings");
  if (items_.empty()) throw DataError("catalog is empty");
  if (embeddings_.cols() < 1) throw DataError("catalog embedding dimension must be positive");
  if (!embeddings_.allFinite()) throw DataError("catalog embeddings must be finite");
  for (std::size_t i = 0; i < items_.size(); ++i) {
    if (!index_.emplace(items_[i].id, i).second)
      throw DataError("duplicate item id " + std::to_string(items_[i].id) + " in catalog");
  }
  max_norm_ = embeddings_.rowwise().norm().maxCoeff();
  if (!(max_norm_ > 0.0)) throw DataError("catalog needs at least one nonzero embedding");
}

std::optional<std::size_t> ItemCatalog::find(ItemId id) const {
  auto it = index_.find(id);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t ItemCatalog::index_of(ItemId id) const {
  auto idx = find(id);
  if (!idx) throw DataError("unknown item id " + std::to_string(id));
  return *idx;
}

void UserPrior::validate(std::size_t dim) const {
  if (static_cast<std::size_t>(mean.size()) != dim || static_cast<std::size_t>(variance.size()) != dim)
    throw DataError("prior for user " + std::to_string(id) + " has wrong dimension");
  if (!mean.allFinite()) throw DataError("prior mean for user " + std::to_string(id) + " is not finite");
  for (Eigen::Index k = 0; k < variance.size(); ++k)
    if (!(variance[k] > 0.0) || !std::isfinite(variance[k]))
      throw DataError("prior variance for user " + std::to_string(id) + " must be positive");
}

void Cav::validate(std::size_t dim) const {
  if (static_cast<std::size_t>(direction.size()) != dim)
    throw DataError("CAV '" + name + "' has wrong dimension");
  if (std::abs(direction.norm() - 1.0) > 1e-9) throw DataError("CAV '" + name + "' is not unit norm");
  if (!(sigma > 0.0)) throw DataError("CAV '" + name + "' needs sigma > 0");
}

std::size_t cav_index(const CavSet& cavs, int id) {
  for (std::size_t g = 0; g < cavs.size(); ++g)
    if (cavs[g].id == id) return g;
  throw DataError("unknown attribute id " + std::to_string(id));
}

// ---------------------------------------------------------------------------
// File formats

namespace {

std::ifstream open_input(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  return in;
}

std::ofstream open_output(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

void expect_header(std::istream& in, const fs::path& path, const std::vector<std::string>& expected) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path.string(), 1, "missing header");
  std::vector<std::string> fields;
  csv::split(line, fields);
  for (auto& f : fields) f = std::string(csv::trim(f));
  if (fields.size() < expected.size() || !std::equal(expected.begin(), expected.end(), fields.begin()))
    throw ParseError(path.string(), 1, "expected header starting with " + [&] {
      std::string h;
      for (const auto& e : expected) h += (h.empty() ? "" : ",") + e;
      return h;
    }());
}

}  // namespace

RatingsDataset read_ratings_csv(const fs::path& path) {
  auto in = open_input(path);
  expect_header(in, path, {"userId", "movieId", "rating"});
  std::vector<Rating> records;
  std::string line;
  std::vector<std::string> f;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (csv::trim(line).empty()) continue;
    if (!csv::split(line, f) || f.size() < 3) throw ParseError(path.string(), lineno, "expected userId,movieId,rating");
    Rating r{};
    if (!csv::parse_int(f[0], r.user)) throw ParseError(path.string(), lineno, "bad userId '" + f[0] + "'");
    if (!csv::parse_int(f[1], r.item)) throw ParseError(path.string(), lineno, "bad movieId '" + f[1] + "'");
    if (!csv::parse_double(f[2], r.value) || r.value == 0.0)
      throw ParseError(path.string(), lineno, "bad rating '" + f[2] + "'");
    records.push_back(r);
  }
  return RatingsDataset(std::move(records));
}

void write_ratings_csv(const fs::path& path, const RatingsDataset& data) {
  auto out = open_output(path);
  out << "userId,movieId,rating,timestamp\n";
  for (const auto& r : data.records()) out << r.user << ',' << r.item << ',' << csv::format_double(r.value) << ",0\n";
}

RatingsDataset load_ratings(const fs::path& path, std::size_t min_item_ratings, std::size_t min_user_ratings) {
  auto data = read_ratings_csv(path).filtered(min_item_ratings, min_user_ratings);
  if (data.empty())
    throw ConfigError("no ratings left after filtering with min_item_ratings=" + std::to_string(min_item_ratings) +
                      ", min_user_ratings=" + std::to_string(min_user_ratings));
  return data;
}

std::vector<ItemInfo> read_catalog_csv(const fs::path& path) {
  auto in = open_input(path);
  expect_header(in, path, {"movieId", "title", "year"});
  std::vector<ItemInfo> items;
  std::string line;
  std::vector<std::string> f;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (csv::trim(line).empty()) continue;
    if (!csv::split(line, f) || f.size() < 3) throw ParseError(path.string(), lineno, "expected movieId,title,year");
    ItemInfo info;
    std::int64_t year = 0;
    if (!csv::parse_int(f[0], info.id)) throw ParseError(path.string(), lineno, "bad movieId '" + f[0] + "'");
    if (!csv::trim(f[2]).empty() && !csv::parse_int(f[2], year))
      throw ParseError(path.string(), lineno, "bad year '" + f[2] + "'");
    info.title = f[1];
    info.year = static_cast<int>(year);
    items.push_back(std::move(info));
  }
  return items;
}

void write_catalog_csv(const fs::path& path, const std::vector<ItemInfo>& items) {
  auto out = open_output(path);
  out << "movieId,title,year\n";
  for (const auto& it : items) out << it.id << ',' << csv::escape(it.title) << ',' << it.year << '\n';
}

std::vector<TagAssertion> read_tags_csv(const fs::path& path) {
  auto in = open_input(path);
  expect_header(in, path, {"movieId", "tag"});
  std::vector<TagAssertion> tags;
  std::string line;
  std::vector<std::string> f;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (csv::trim(line).empty()) continue;
    if (!csv::split(line, f) || f.size() < 2) throw ParseError(path.string(), lineno, "expected movieId,tag");
    TagAssertion t;
    if (!csv::parse_int(f[0], t.item)) throw ParseError(path.string(), lineno, "bad movieId '" + f[0] + "'");
    t.tag = std::string(csv::trim(f[1]));
    if (t.tag.empty()) throw ParseError(path.string(), lineno, "empty tag");
    tags.push_back(std::move(t));
  }
  return tags;
}

void write_tags_csv(const fs::path& path, const std::vector<TagAssertion>& tags) {
  auto out = open_output(path);
  out << "movieId,tag\n";
  for (const auto& t : tags) out << t.item << ',' << csv::escape(t.tag) << '\n';
}

namespace {

std::size_t parse_dim_header(const std::string& line, const fs::path& path) {
  const std::string key = "# d=";
  if (line.rfind(key, 0) != 0) throw ParseError(path.string(), 1, "expected '# d=<d>' header");
  std::string rest = line.substr(key.size());
  auto end = rest.find_first_of(" \t\r");
  std::int64_t d = 0;
  if (!csv::parse_int(rest.substr(0, end), d) || d < 1) throw ParseError(path.string(), 1, "bad dimension in header");
  return static_cast<std::size_t>(d);
}

EmbeddingTable read_table(const fs::path& path, std::size_t columns_per_dim) {
  auto in = open_input(path);
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path.string(), 1, "missing header");
  const std::size_t d = parse_dim_header(line, path);
  const std::size_t cols = d * columns_per_dim;
  EmbeddingTable table;
  std::vector<std::vector<double>> rows;
  std::vector<std::string> f;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (csv::trim(line).empty()) continue;
    csv::split(line, f);
    if (f.size() != cols + 1)
      throw ParseError(path.string(), lineno, "expected " + std::to_string(cols + 1) + " fields, got " +
                                                  std::to_string(f.size()));
    std::int64_t id = 0;
    if (!csv::parse_int(f[0], id)) throw ParseError(path.string(), lineno, "bad id '" + f[0] + "'");
    std::vector<double> row(cols);
    for (std::size_t k = 0; k < cols; ++k)
      if (!csv::parse_double(f[k + 1], row[k])) throw ParseError(path.string(), lineno, "bad value '" + f[k + 1] + "'");
    table.ids.push_back(id);
    rows.push_back(std::move(row));
  }
  table.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t k = 0; k < cols; ++k) table.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = rows[r][k];
  return table;
}

void write_table(const fs::path& path, const EmbeddingTable& table, std::size_t d, const std::string& tag) {
  auto out = open_output(path);
  out << "# d=" << d << tag << '\n';
  for (std::size_t r = 0; r < table.ids.size(); ++r) {
    out << table.ids[r];
    for (Eigen::Index k = 0; k < table.values.cols(); ++k)
      out << ',' << csv::format_double(table.values(static_cast<Eigen::Index>(r), k));
    out << '\n';
  }
}

}  // namespace

EmbeddingTable read_embeddings(const fs::path& path) { return read_table(path, 1); }

void write_embeddings(const fs::path& path, const EmbeddingTable& table) {
  write_table(path, table, static_cast<std::size_t>(table.values.cols()), "");
}

std::vector<UserPrior> read_priors(const fs::path& path) {
  auto table = read_table(path, 2);
  const auto d = table.values.cols() / 2;
  std::vector<UserPrior> priors;
  priors.reserve(table.ids.size());
  for (std::size_t r = 0; r < table.ids.size(); ++r) {
    UserPrior p;
    p.id = table.ids[r];
    p.mean = table.values.row(static_cast<Eigen::Index>(r)).head(d).transpose();
    p.variance = table.values.row(static_cast<Eigen::Index>(r)).tail(d).transpose();
    p.validate(static_cast<std::size_t>(d));
    priors.push_back(std::move(p));
  }
  return priors;
}

void write_priors(const fs::path& path, const std::vector<UserPrior>& priors) {
  if (priors.empty()) throw DataError("no priors to write");
  const auto d = priors.front().mean.size();
  EmbeddingTable table;
  table.values.resize(static_cast<Eigen::Index>(priors.size()), 2 * d);
  for (std::size_t r = 0; r < priors.size(); ++r) {
    table.ids.push_back(priors[r].id);
    table.values.row(static_cast<Eigen::Index>(r)) << priors[r].mean.transpose(), priors[r].variance.transpose();
  }
  write_table(path, table, static_cast<std::size_t>(d), " prior");
}

CavSet read_cavs(const fs::path& path) {
  auto in = open_input(path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  if (!doc.is_array()) throw SchemaError("$", "expected a list of attributes");
  CavSet cavs;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const auto& e = doc[i];
    const std::string where = "[" + std::to_string(i) + "]";
    try {
      Cav c;
      c.id = e.at("id").get<int>();
      c.name = e.at("name").get<std::string>();
      c.sigma = e.at("sigma").get<double>();
      auto dir = e.at("direction").get<std::vector<double>>();
      c.direction = Eigen::Map<const Vec>(dir.data(), static_cast<Eigen::Index>(dir.size()));
      c.validate(dir.size());
      cavs.push_back(std::move(c));
    } catch (const nlohmann::json::exception& ex) {
      throw SchemaError(where, ex.what());
    }
  }
  return cavs;
}

void write_cavs(const fs::path& path, const CavSet& cavs) {
  nlohmann::json doc = nlohmann::json::array();
  for (const auto& c : cavs) {
    doc.push_back({{"id", c.id},
                   {"name", c.name},
                   {"sigma", c.sigma},
                   {"direction", std::vector<double>(c.direction.data(), c.direction.data() + c.direction.size())}});
  }
  auto out = open_output(path);
  out << doc.dump(1) << '\n';
}

ItemCatalog make_catalog(const std::vector<ItemInfo>& metadata, const EmbeddingTable& table) {
  std::unordered_map<ItemId, const ItemInfo*> by_id;
  for (const auto& m : metadata) by_id[m.id] = &m;
  std::vector<ItemInfo> items;
  items.reserve(table.ids.size());
  for (auto id : table.ids) {
    auto it = by_id.find(id);
    if (it != by_id.end())
      items.push_back(*it->second);
    else
      items.push_back(ItemInfo{id, "", 0});
  }
  return ItemCatalog(std::move(items), table.values);
}

// ---------------------------------------------------------------------------
// Matrix factorization

double mf_loss(const RatingsDataset& data, const RowMatrix& user_factors, const RowMatrix& item_factors, double reg) {
  double loss = 0.0;
  for (const auto& r : data.records()) {
    const auto u = static_cast<Eigen::Index>(data.user_index(r.user));
    const auto i = static_cast<Eigen::Index>(data.item_index(r.item));
    const double e = r.value - user_factors.row(u).dot(item_factors.row(i));
    loss += e * e;
  }
  return loss + reg * (user_factors.squaredNorm() + item_factors.squaredNorm());
}

namespace {

struct Entry {
  std::size_t other;
  double value;
};

// Solves every row of `target` given the fixed factors of the other side.
void als_half_sweep(RowMatrix& target, const RowMatrix& fixed, const std::vector<std::vector<Entry>>& lists,
                    double reg) {
  const auto d = target.cols();
  Eigen::MatrixXd a(d, d);
  Vec b(d);
  for (std::size_t r = 0; r < lists.size(); ++r) {
    a.setIdentity();
    a *= reg;
    b.setZero();
    for (const auto& e : lists[r]) {
      auto v = fixed.row(static_cast<Eigen::Index>(e.other)).transpose();
      a.noalias() += v * v.transpose();
      b.noalias() += e.value * v;
    }
    target.row(static_cast<Eigen::Index>(r)) = a.ldlt().solve(b).transpose();
  }
}

}  // namespace

MfModel train_mf(const RatingsDataset& data, const MfConfig& config) {
  if (data.empty()) throw DataError("cannot factorize an empty ratings dataset");
  if (config.dim < 1) throw ConfigError("mf.dim must be >= 1");
  if (!(config.reg > 0.0)) throw ConfigError("mf.reg must be positive");
  if (!(config.prior_scale > 0.0)) throw ConfigError("mf.prior_scale must be positive");
  const std::size_t nu = data.user_ids().size();
  const std::size_t ni = data.item_ids().size();
  if (config.dim > ni || config.dim > nu)
    throw ConfigError("mf.dim=" + std::to_string(config.dim) + " exceeds the number of users (" + std::to_string(nu) +
                      ") or items (" + std::to_string(ni) + ")");

  std::vector<std::vector<Entry>> by_user(nu), by_item(ni);
  for (const auto& r : data.records()) {
    const auto u = data.user_index(r.user);
    const auto i = data.item_index(r.item);
    by_user[u].push_back({i, r.value});
    by_item[i].push_back({u, r.value});
  }

  const auto d = static_cast<Eigen::Index>(config.dim);
  Rng rng(config.seed);
  RowMatrix users(static_cast<Eigen::Index>(nu), d), items(static_cast<Eigen::Index>(ni), d);
  for (Eigen::Index r = 0; r < users.rows(); ++r)
    for (Eigen::Index k = 0; k < d; ++k) users(r, k) = 0.1 * standard_normal(rng);
  for (Eigen::Index r = 0; r < items.rows(); ++r)
    for (Eigen::Index k = 0; k < d; ++k) items(r, k) = 0.1 * standard_normal(rng);

  MfModel model;
  model.loss_history.push_back(mf_loss(data, users, items, config.reg));
  for (std::size_t it = 0; it < config.iters; ++it) {
    als_half_sweep(users, items, by_user, config.reg);
    als_half_sweep(items, users, by_item, config.reg);
    model.loss_history.push_back(mf_loss(data, users, items, config.reg));
  }

  model.items.ids = data.item_ids();
  model.items.values = std::move(items);
  model.users.reserve(nu);
  model.priors.reserve(nu);
  for (std::size_t u = 0; u < nu; ++u) {
    Vec emb = users.row(static_cast<Eigen::Index>(u)).transpose();
    const double variance = config.prior_scale / (static_cast<double>(by_user[u].size()) + config.reg);
    model.priors.push_back(UserPrior{data.user_ids()[u], emb, Vec::Constant(d, variance)});
    model.users.push_back(GroundTruthUser{data.user_ids()[u], std::move(emb)});
  }
  return model;
}

// ---------------------------------------------------------------------------
// Concept activation vectors

namespace {
double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }
}  // namespace

LogisticFit fit_logistic(const RowMatrix& x, const std::vector<int>& labels, const LogisticConfig& config) {
  const auto n = x.rows();
  if (n == 0 || static_cast<std::size_t>(n) != labels.size()) throw DataError("logistic regression needs one label per row");
  Vec y(n);
  for (Eigen::Index i = 0; i < n; ++i) y[i] = labels[static_cast<std::size_t>(i)] ? 1.0 : 0.0;

  const double max_sq = x.rowwise().squaredNorm().maxCoeff();
  const double lipschitz = 0.25 * (max_sq + 1.0) + config.reg;
  const double step = 1.0 / lipschitz;
  const double inv_n = 1.0 / static_cast<double>(n);

  LogisticFit fit{Vec::Zero(x.cols()), 0.0};
  Vec residual(n);
  for (std::size_t it = 0; it < config.iters; ++it) {
    Vec z = x * fit.weights;
    for (Eigen::Index i = 0; i < n; ++i) residual[i] = sigmoid(z[i] + fit.bias) - y[i];
    Vec grad = inv_n * (x.transpose() * residual) + config.reg * fit.weights;
    const double grad_b = inv_n * residual.sum();
    fit.weights -= step * grad;
    fit.bias -= step * grad_b;
  }
  return fit;
}

Cav learn_cav(const ItemCatalog& catalog, const std::vector<ItemId>& positives, const std::vector<ItemId>& negatives,
              const std::string& attribute_name, double reg, int attribute_id, double sigma) {
  if (positives.empty() || negatives.empty())
    throw DataError("attribute '" + attribute_name + "' needs both positive and negative items");
  if (!(reg > 0.0)) throw ConfigError("CAV regularization must be positive");
  if (!(sigma > 0.0)) throw ConfigError("CAV sigma must be positive");
  std::unordered_set<ItemId> pos(positives.begin(), positives.end());
  for (auto id : negatives)
    if (pos.count(id)) throw DataError("item " + std::to_string(id) + " is both positive and negative for '" +
                                       attribute_name + "'");

  const auto n = static_cast<Eigen::Index>(positives.size() + negatives.size());
  RowMatrix x(n, static_cast<Eigen::Index>(catalog.dim()));
  std::vector<int> labels;
  labels.reserve(static_cast<std::size_t>(n));
  Eigen::Index row = 0;
  for (auto id : positives) {
    x.row(row++) = catalog.embedding(catalog.index_of(id)).transpose();
    labels.push_back(1);
  }
  for (auto id : negatives) {
    x.row(row++) = catalog.embedding(catalog.index_of(id)).transpose();
    labels.push_back(0);
  }
  if ((x.rowwise() - x.row(0)).norm() == 0.0)
    throw DataError("attribute '" + attribute_name + "': all items share one embedding, no separating direction");

  auto fit = fit_logistic(x, labels, LogisticConfig{reg, 2000});
  const double norm = fit.weights.norm();
  if (!(norm > 1e-12)) throw DataError("attribute '" + attribute_name + "': degenerate separation (zero direction)");
  return Cav{attribute_id, attribute_name, fit.weights / norm, sigma};
}

CavTrainingSet cav_training_set(const std::vector<TagAssertion>& tags, const ItemCatalog& catalog,
                                const std::string& tag, std::uint64_t seed) {
  std::vector<bool> tagged(catalog.size(), false);
  for (const auto& t : tags) {
    if (t.tag != tag) continue;
    if (auto idx = catalog.find(t.item)) tagged[*idx] = true;
  }
  CavTrainingSet set;
  std::vector<ItemId> pool;
  for (std::size_t i = 0; i < catalog.size(); ++i) {
    if (tagged[i])
      set.positives.push_back(catalog.item(i).id);
    else
      pool.push_back(catalog.item(i).id);
  }
  Rng rng(stable_hash({seed, fnv1a64(tag)}));
  // Partial Fisher-Yates: the first |positives| entries become the sample.
  const std::size_t take = std::min(pool.size(), set.positives.size());
  for (std::size_t i = 0; i < take; ++i) {
    const std::size_t j = i + uniform_index(rng, pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  set.negatives.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take));
  return set;
}

}  // namespace crsim
