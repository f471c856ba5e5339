#include "crsim/trajectory.hpp"

#include "crsim/errors.hpp"

#include <json.hpp>

#include <atomic>
#include <exception>
#include <fstream>
#include <thread>

namespace crsim {

using nlohmann::json;

std::optional<ItemId> Trajectory::accepted_item() const {
  if (outcome != Outcome::kAccepted || turns.empty()) return std::nullopt;
  const Turn& last = turns.back();
  if (last.user.kind != UserKind::kAccept || !last.user.item_idx || *last.user.item_idx >= last.agent.slate.size())
    return std::nullopt;
  return last.agent.slate[*last.user.item_idx].id;
}

void validate(const Trajectory& t) {
  for (std::size_t n = 0; n < t.turns.size(); ++n) {
    const auto& turn = t.turns[n];
    const std::string where = "turns[" + std::to_string(n) + "]";
    const auto& a = turn.agent;
    const auto& u = turn.user;
    if (a.slate.empty()) throw SchemaError(where + ".agent.slate", "slate is empty");
    bool ok = false;
    switch (a.kind) {
      case AgentKind::kAttrQuery:
        if (!a.attr) throw SchemaError(where + ".agent.attr", "attribute query without attribute");
        if (a.slate.size() != 1) throw SchemaError(where + ".agent.slate", "attribute query slate must hold one item");
        ok = u.kind == UserKind::kAttrResp && u.direction && (*u.direction == 1 || *u.direction == -1);
        break;
      case AgentKind::kItemQuery:
        ok = u.kind == UserKind::kItemChoice && u.item_idx && *u.item_idx < a.slate.size();
        break;
      case AgentKind::kRecommend:
        ok = (u.kind == UserKind::kAccept && u.item_idx && *u.item_idx < a.slate.size()) ||
             u.kind == UserKind::kReject || u.kind == UserKind::kTerminate;
        break;
    }
    if (!ok) throw SchemaError(where + ".user", "response does not answer the agent action");
    const bool ends = u.kind == UserKind::kAccept || u.kind == UserKind::kTerminate;
    if (ends && n + 1 != t.turns.size()) throw SchemaError(where + ".user", "conversation continues after it ended");
  }
  const bool accepted = !t.turns.empty() && t.turns.back().user.kind == UserKind::kAccept;
  const bool terminated = !t.turns.empty() && t.turns.back().user.kind == UserKind::kTerminate;
  if (accepted != (t.outcome == Outcome::kAccepted) || terminated != (t.outcome == Outcome::kTerminated))
    throw SchemaError("outcome", "outcome does not match the final turn");
}

AgentRecord to_record(const AgentAction& action, const ItemCatalog& catalog, const CavSet& cavs) {
  AgentRecord rec;
  auto add = [&](std::size_t i) { rec.slate.push_back(ItemRef{catalog.item(i).id, catalog.item(i).display_title()}); };
  if (auto* q = std::get_if<AttrQuery>(&action)) {
    rec.kind = AgentKind::kAttrQuery;
    add(q->item);
    rec.attr = AttrRef{cavs[q->attr].id, cavs[q->attr].name};
  } else if (auto* q = std::get_if<ItemQuery>(&action)) {
    rec.kind = AgentKind::kItemQuery;
    for (auto i : q->slate) add(i);
  } else {
    rec.kind = AgentKind::kRecommend;
    for (auto i : std::get<Recommend>(action).slate) add(i);
  }
  return rec;
}

UserRecord to_record(const Response& response, const CavSet& cavs) {
  UserRecord rec;
  std::visit(
      [&](const auto& r) {
        using R = std::decay_t<decltype(r)>;
        if constexpr (std::is_same_v<R, ItemChoice>) {
          rec.kind = UserKind::kItemChoice;
          rec.item_idx = r.index;
        } else if constexpr (std::is_same_v<R, SlateAccept>) {
          rec.kind = UserKind::kAccept;
          rec.item_idx = r.index;
        } else if constexpr (std::is_same_v<R, SlateReject>) {
          rec.kind = UserKind::kReject;
          if (r.critique)
            rec.critique = CritiqueRecord{AttrRef{cavs[r.critique->attr].id, cavs[r.critique->attr].name},
                                          r.critique->direction};
        } else if constexpr (std::is_same_v<R, AttrAnswer>) {
          rec.kind = UserKind::kAttrResp;
          rec.direction = r.direction;
        } else {
          rec.kind = UserKind::kTerminate;
        }
      },
      response);
  return rec;
}

// ---------------------------------------------------------------------------
// Simulation

Trajectory simulate(const GroundTruthUser& user, const UserPrior& prior, const ItemCatalog& catalog,
                    const CavSet& cavs, const SimulationConfig& config, std::uint64_t seed,
                    const BeliefObserver& observer) {
  config.agent.validate();
  config.behavior.validate();
  const auto d = catalog.dim();
  if (static_cast<std::size_t>(user.embedding.size()) != d) throw DataError("user embedding dimension mismatch");
  prior.validate(d);
  for (const auto& c : cavs) c.validate(d);

  Rng user_rng(stable_hash({seed, 1}));
  Rng agent_rng(stable_hash({seed, 2}));
  SamplerConfig sampler = config.sampler;
  sampler.seed = stable_hash({config.sampler.seed, seed, 3});
  AgentConfig agent = config.agent;
  agent.gradient.seed = stable_hash({config.agent.gradient.seed, seed, 4});

  BeliefState belief(prior, sampler);
  const LikelihoodModel model{&catalog, &cavs, config.behavior, config.reject};

  Trajectory traj;
  traj.user_id = user.id;
  traj.seed = seed;
  if (config.export_embedding)
    traj.ground_truth_embedding = std::vector<double>(user.embedding.data(), user.embedding.data() + user.embedding.size());
  traj.outcome = Outcome::kMaxTurns;

  std::vector<std::size_t> accepted;
  for (std::size_t n = 0; n < agent.max_turns; ++n) {
    refresh_samples(belief, model);
    if (observer) observer(n, belief);
    AgentAction action = step(belief, catalog, cavs, agent, config.behavior, n, agent_rng);

    Response response;
    if (auto* q = std::get_if<ItemQuery>(&action)) {
      response = respond_to_slate(q->slate, user, cavs, catalog, config.behavior, SlateMode::kItemQuery, user_rng);
    } else if (auto* q = std::get_if<AttrQuery>(&action)) {
      response = respond_to_attr_query(*q, user, cavs, catalog, user_rng);
    } else if (maybe_terminate(n, config.behavior, user_rng)) {
      response = Terminate{};
    } else {
      response = respond_to_slate(std::get<Recommend>(action).slate, user, cavs, catalog, config.behavior,
                                  SlateMode::kRecommendation, user_rng);
    }

    traj.turns.push_back(Turn{to_record(action, catalog, cavs), to_record(response, cavs)});
    if (auto* a = std::get_if<SlateAccept>(&response)) accepted.push_back(slate_of(action)[a->index]);
    const bool accept = std::holds_alternative<SlateAccept>(response);
    const bool terminate = std::holds_alternative<Terminate>(response);
    belief.update(Observation{std::move(action), response}, cavs.size());
    if (accept) {
      traj.outcome = Outcome::kAccepted;
      break;
    }
    if (terminate) {
      traj.outcome = Outcome::kTerminated;
      break;
    }
  }
  if (observer) {
    refresh_samples(belief, model);
    observer(traj.turns.size(), belief);
  }
  return traj;
}

std::uint64_t user_seed(std::uint64_t base_seed, UserId user_id) {
  return stable_hash({base_seed, static_cast<std::uint64_t>(user_id)});
}

BatchResult simulate_batch(const std::vector<GroundTruthUser>& users, const std::vector<UserPrior>& priors,
                           const ItemCatalog& catalog, const CavSet& cavs, const SimulationConfig& config,
                           std::uint64_t base_seed, std::size_t parallelism, FailurePolicy policy) {
  if (users.empty()) throw DataError("simulate_batch needs at least one user");
  if (users.size() != priors.size()) throw DataError("simulate_batch needs one prior per user");
  const std::size_t n = users.size();
  std::vector<std::optional<Trajectory>> results(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};

  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        results[i] = simulate(users[i], priors[i], catalog, cavs, config, user_seed(base_seed, users[i].id));
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(parallelism, n));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  BatchResult out;
  out.trajectories.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (errors[i]) {
      if (policy == FailurePolicy::kAbort) std::rethrow_exception(errors[i]);
      std::string message = "unknown error";
      try {
        std::rethrow_exception(errors[i]);
      } catch (const std::exception& e) {
        message = e.what();
      } catch (...) {
      }
      out.failures.push_back(BatchFailure{i, users[i].id, std::move(message)});
      continue;
    }
    out.trajectories.push_back(std::move(*results[i]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON

namespace {

const char* agent_kind_name(AgentKind k) {
  switch (k) {
    case AgentKind::kAttrQuery: return "attr_query";
    case AgentKind::kItemQuery: return "item_query";
    case AgentKind::kRecommend: return "recommend";
  }
  return "";
}

const char* user_kind_name(UserKind k) {
  switch (k) {
    case UserKind::kAttrResp: return "attr_resp";
    case UserKind::kItemChoice: return "item_choice";
    case UserKind::kAccept: return "accept";
    case UserKind::kReject: return "reject";
    case UserKind::kTerminate: return "terminate";
  }
  return "";
}

const char* outcome_name(Outcome o) {
  switch (o) {
    case Outcome::kAccepted: return "accepted";
    case Outcome::kMaxTurns: return "max_turns";
    case Outcome::kTerminated: return "terminated";
  }
  return "";
}

const json& field(const json& obj, const char* key, const std::string& path) {
  if (!obj.is_object()) throw SchemaError(path.empty() ? "$" : path, "expected an object");
  auto it = obj.find(key);
  const std::string where = path.empty() ? key : path + "." + key;
  if (it == obj.end()) throw SchemaError(where, "missing required field '" + std::string(key) + "'");
  return *it;
}

template <typename T>
T as(const json& v, const std::string& path, const char* expected) {
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw SchemaError(path, std::string("expected ") + expected);
  }
}

std::int64_t as_int(const json& v, const std::string& path) {
  if (!v.is_number_integer()) throw SchemaError(path, "expected an integer");
  return v.get<std::int64_t>();
}

int as_direction(const json& v, const std::string& path) {
  const auto d = as_int(v, path);
  if (d != 1 && d != -1) throw SchemaError(path, "direction must be +1 or -1");
  return static_cast<int>(d);
}

AttrRef parse_attr(const json& v, const std::string& path) {
  return AttrRef{static_cast<int>(as_int(field(v, "id", path), path + ".id")),
                 as<std::string>(field(v, "name", path), path + ".name", "a string")};
}

json attr_json(const AttrRef& a) { return json{{"id", a.id}, {"name", a.name}}; }

}  // namespace

std::string serialize(const Trajectory& t) {
  json user_info = {{"id", t.user_id}};
  if (t.ground_truth_embedding) user_info["embedding"] = *t.ground_truth_embedding;
  json turns = json::array();
  for (const auto& turn : t.turns) {
    json slate = json::array();
    for (const auto& item : turn.agent.slate) slate.push_back({{"id", item.id}, {"name", item.name}});
    json agent = {{"kind", agent_kind_name(turn.agent.kind)}, {"slate", std::move(slate)}};
    if (turn.agent.attr) agent["attr"] = attr_json(*turn.agent.attr);
    json user = {{"kind", user_kind_name(turn.user.kind)}};
    if (turn.user.direction) user["direction"] = *turn.user.direction;
    if (turn.user.item_idx) user["item_idx"] = *turn.user.item_idx;
    if (turn.user.critique) {
      json c = attr_json(turn.user.critique->attr);
      c["direction"] = turn.user.critique->direction;
      user["critique"] = std::move(c);
    }
    turns.push_back({{"agent", std::move(agent)}, {"user", std::move(user)}});
  }
  json doc = {{"user_info", std::move(user_info)},
              {"seed", t.seed},
              {"turns", std::move(turns)},
              {"outcome", outcome_name(t.outcome)}};
  return doc.dump();
}

Trajectory deserialize(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw SchemaError("$", std::string("invalid JSON: ") + e.what());
  }
  Trajectory t;
  const json& info = field(doc, "user_info", "");
  t.user_id = as_int(field(info, "id", "user_info"), "user_info.id");
  if (auto it = info.find("embedding"); it != info.end())
    t.ground_truth_embedding = as<std::vector<double>>(*it, "user_info.embedding", "a list of numbers");
  if (auto it = doc.find("seed"); it != doc.end()) {
    if (!it->is_number_unsigned() && !it->is_number_integer()) throw SchemaError("seed", "expected an integer");
    t.seed = it->get<std::uint64_t>();
  }
  const json& turns = field(doc, "turns", "");
  if (!turns.is_array()) throw SchemaError("turns", "expected a list");
  for (std::size_t n = 0; n < turns.size(); ++n) {
    const std::string tp = "turns[" + std::to_string(n) + "]";
    Turn turn;
    const json& agent = field(turns[n], "agent", tp);
    const std::string ap = tp + ".agent";
    const auto kind = as<std::string>(field(agent, "kind", ap), ap + ".kind", "a string");
    if (kind == "attr_query")
      turn.agent.kind = AgentKind::kAttrQuery;
    else if (kind == "item_query")
      turn.agent.kind = AgentKind::kItemQuery;
    else if (kind == "recommend")
      turn.agent.kind = AgentKind::kRecommend;
    else
      throw SchemaError(ap + ".kind", "unknown agent kind '" + kind + "'");
    const json& slate = field(agent, "slate", ap);
    if (!slate.is_array()) throw SchemaError(ap + ".slate", "expected a list");
    for (std::size_t i = 0; i < slate.size(); ++i) {
      const std::string sp = ap + ".slate[" + std::to_string(i) + "]";
      turn.agent.slate.push_back(ItemRef{as_int(field(slate[i], "id", sp), sp + ".id"),
                                         as<std::string>(field(slate[i], "name", sp), sp + ".name", "a string")});
    }
    if (auto it = agent.find("attr"); it != agent.end()) turn.agent.attr = parse_attr(*it, ap + ".attr");

    const json& user = field(turns[n], "user", tp);
    const std::string up = tp + ".user";
    const auto ukind = as<std::string>(field(user, "kind", up), up + ".kind", "a string");
    if (ukind == "attr_resp")
      turn.user.kind = UserKind::kAttrResp;
    else if (ukind == "item_choice")
      turn.user.kind = UserKind::kItemChoice;
    else if (ukind == "accept")
      turn.user.kind = UserKind::kAccept;
    else if (ukind == "reject")
      turn.user.kind = UserKind::kReject;
    else if (ukind == "terminate")
      turn.user.kind = UserKind::kTerminate;
    else
      throw SchemaError(up + ".kind", "unknown user kind '" + ukind + "'");
    if (auto it = user.find("direction"); it != user.end()) turn.user.direction = as_direction(*it, up + ".direction");
    if (auto it = user.find("item_idx"); it != user.end()) {
      const auto idx = as_int(*it, up + ".item_idx");
      if (idx < 0) throw SchemaError(up + ".item_idx", "must be nonnegative");
      turn.user.item_idx = static_cast<std::size_t>(idx);
    }
    if (auto it = user.find("critique"); it != user.end()) {
      const std::string cp = up + ".critique";
      turn.user.critique = CritiqueRecord{parse_attr(*it, cp), as_direction(field(*it, "direction", cp), cp + ".direction")};
    }
    t.turns.push_back(std::move(turn));
  }
  const auto outcome = as<std::string>(field(doc, "outcome", ""), "outcome", "a string");
  if (outcome == "accepted")
    t.outcome = Outcome::kAccepted;
  else if (outcome == "max_turns")
    t.outcome = Outcome::kMaxTurns;
  else if (outcome == "terminated")
    t.outcome = Outcome::kTerminated;
  else
    throw SchemaError("outcome", "unknown outcome '" + outcome + "'");
  validate(t);
  return t;
}

std::vector<Trajectory> read_trajectories(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::vector<Trajectory> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(deserialize(line));
    } catch (const SchemaError& e) {
      throw SchemaError(path + ":" + std::to_string(lineno) + ":" + e.path(), e.what());
    }
  }
  return out;
}

void write_trajectories(const std::string& path, const std::vector<Trajectory>& trajectories) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  for (const auto& t : trajectories) out << serialize(t) << '\n';
}

}  // namespace crsim
