#include "crsim/dialogue.hpp"

#include "crsim/errors.hpp"

#include <json.hpp>

#include <fstream>

namespace crsim {

using nlohmann::json;

const char* speaker_label(Speaker speaker) { return speaker == Speaker::kAgent ? "Agent" : "User"; }

namespace {

std::string title_of(const ItemRef& ref, const ItemCatalog& catalog) {
  return catalog.item(catalog.index_of(ref.id)).display_title();
}

std::string attr_name(const AttrRef& ref, const CavSet& cavs) { return cavs[cav_index(cavs, ref.id)].name; }

std::string title_list(const std::vector<ItemRef>& slate, const ItemCatalog& catalog) {
  std::string out;
  for (const auto& item : slate) {
    if (!out.empty()) out += ", ";
    out += title_of(item, catalog);
  }
  return out;
}

}  // namespace

Dialogue render_templates(const Trajectory& trajectory, const ItemCatalog& catalog, const CavSet& cavs,
                          std::string trajectory_ref) {
  Dialogue dialogue;
  dialogue.trajectory_ref = std::move(trajectory_ref);
  dialogue.stage = Stage::kTemplatized;
  for (const auto& turn : trajectory.turns) {
    const auto& a = turn.agent;
    if (a.slate.empty()) throw DataError("agent action without items");
    switch (a.kind) {
      case AgentKind::kAttrQuery:
        if (!a.attr) throw DataError("attribute query without attribute");
        dialogue.turns.push_back({Speaker::kAgent, TurnKind::kAttrElicit,
                                  "What do you think about " + title_of(a.slate.front(), catalog) +
                                      "? Do you want something more " + attr_name(*a.attr, cavs) + " than this?"});
        break;
      case AgentKind::kItemQuery:
        dialogue.turns.push_back({Speaker::kAgent, TurnKind::kItemElicit,
                                  "Which of these movies do you prefer? " + title_list(a.slate, catalog)});
        break;
      case AgentKind::kRecommend:
        dialogue.turns.push_back({Speaker::kAgent, TurnKind::kRecommend,
                                  "These are " + std::to_string(a.slate.size()) +
                                      " movies you might like: " + title_list(a.slate, catalog)});
        break;
    }

    const auto& u = turn.user;
    auto slate_title = [&](std::size_t idx) {
      if (idx >= a.slate.size()) throw DataError("response item index out of range");
      return title_of(a.slate[idx], catalog);
    };
    std::string text;
    switch (u.kind) {
      case UserKind::kAttrResp: {
        if (!a.attr || !u.direction) throw DataError("attribute answer without attribute or direction");
        const std::string name = attr_name(*a.attr, cavs);
        text = *u.direction > 0 ? "Yes, I want something more " + name + "."
                                : "No, I want something less " + name + ".";
        break;
      }
      case UserKind::kItemChoice:
        text = "I'd choose " + slate_title(u.item_idx.value_or(a.slate.size())) + ".";
        break;
      case UserKind::kAccept:
        text = slate_title(u.item_idx.value_or(a.slate.size())) + " is what I am looking for! Thanks.";
        break;
      case UserKind::kReject:
        text = "No. I don't like them.";
        if (u.critique)
          text += std::string(" Do you have something ") + (u.critique->direction > 0 ? "more " : "less ") +
                  attr_name(u.critique->attr, cavs) + " than " + title_of(a.slate.front(), catalog) + "?";
        break;
      case UserKind::kTerminate:
        continue;  // the user leaves without replying
    }
    dialogue.turns.push_back({Speaker::kUser, TurnKind::kUser, std::move(text)});
  }
  return dialogue;
}

std::string to_text(std::span<const Utterance> turns) {
  std::string out;
  for (const auto& t : turns) {
    if (!out.empty()) out += '\n';
    out += speaker_label(t.speaker);
    out += ": ";
    out += t.text;
  }
  return out;
}

namespace {

constexpr const char* kPreamble =
    "Above is a conversation between an agent and a user in turns. The agent tries to find the user's preference by "
    "asking questions and then recommends movies the user would like to watch.\n";

constexpr const char* kAgentRequirements =
    "Rephrase the last Agent turn and it should satisfy following requirements.\n"
    "1. Begin with \"Agent:\" without new lines.\n"
    "2. Must include the movie title followed by the released year (e.g., Gravity (2013)).\n"
    "3. Include short comments about movies.\n";

constexpr const char* kItemElicitExtra =
    "4. Do not recommend the movies but ask preference between them.\n"
    "5. Ask a comparison question at the end.\n";

constexpr const char* kAttrElicitExtra = "4. Do not recommend the movies.\n";

constexpr const char* kUserRequirements =
    "Rephrase the last User turn and it should satisfy following requirements.\n"
    "1. Begin with \"User:\" without new lines.\n"
    "2. Must be consistent with what the user said in the earlier turns in the conversation.\n"
    "3. Explain very briefly the rationale of the choice.\n";

}  // namespace

std::string build_prompt(std::span<const Utterance> context, const Utterance& current) {
  std::string prompt = to_text(context);
  if (!prompt.empty()) prompt += '\n';
  prompt += speaker_label(current.speaker);
  prompt += ": ";
  prompt += current.text;
  prompt += "\n\n";
  prompt += kPreamble;
  switch (current.kind) {
    case TurnKind::kRecommend:
      prompt += kAgentRequirements;
      break;
    case TurnKind::kItemElicit:
      prompt += kAgentRequirements;
      prompt += kItemElicitExtra;
      break;
    case TurnKind::kAttrElicit:
      prompt += kAgentRequirements;
      prompt += kAttrElicitExtra;
      break;
    case TurnKind::kUser:
      prompt += kUserRequirements;
      break;
  }
  return prompt;
}

std::optional<std::string> validate_refinement(const std::string& raw, Speaker speaker, std::size_t max_chars) {
  std::string_view text = raw;
  auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; };
  while (!text.empty() && is_space(text.front())) text.remove_prefix(1);
  while (!text.empty() && is_space(text.back())) text.remove_suffix(1);
  const std::string prefix = std::string(speaker_label(speaker)) + ":";
  if (text.substr(0, prefix.size()) != prefix) return std::nullopt;
  text.remove_prefix(prefix.size());
  while (!text.empty() && (text.front() == ' ' || text.front() == '\t')) text.remove_prefix(1);
  if (text.empty() || text.size() > max_chars) return std::nullopt;
  if (text.find_first_of("\n\r") != std::string_view::npos) return std::nullopt;
  return std::string(text);
}

Dialogue inpaint(const Dialogue& templatized, LmClient& lm, const InpaintPolicy& policy) {
  if (templatized.stage != Stage::kTemplatized) throw DataError("inpaint expects a templatized dialogue");
  Dialogue out = templatized;
  out.stage = Stage::kRefined;

  std::vector<std::size_t> order;
  if (policy.mode == PassMode::kTwoPass) {
    for (std::size_t t = 0; t < out.turns.size(); ++t)
      if (out.turns[t].speaker == Speaker::kUser) order.push_back(t);
    for (std::size_t t = 0; t < out.turns.size(); ++t)
      if (out.turns[t].speaker == Speaker::kAgent) order.push_back(t);
  } else {
    for (std::size_t t = 0; t < out.turns.size(); ++t) order.push_back(t);
  }

  for (std::size_t t : order) {
    const Utterance& current = templatized.turns[t];
    const std::span<const Utterance> context(out.turns.data(), t);
    const LmRequest request{build_prompt(context, current), policy.temperature, policy.max_tokens};
    std::optional<std::string> refined;
    for (std::size_t attempt = 0; attempt < policy.max_attempts && !refined; ++attempt) {
      try {
        refined = validate_refinement(lm.generate(request).text, current.speaker, policy.max_chars);
      } catch (const LmTransportError&) {
        // counts as a failed attempt
      }
    }
    if (refined) {
      out.turns[t].text = std::move(*refined);
      out.turns[t].flagged = false;
    } else {
      out.turns[t].flagged = true;
    }
  }
  return out;
}

namespace {

const char* kind_name(TurnKind k) {
  switch (k) {
    case TurnKind::kRecommend: return "recommend";
    case TurnKind::kItemElicit: return "item_elicit";
    case TurnKind::kAttrElicit: return "attr_elicit";
    case TurnKind::kUser: return "user";
  }
  return "";
}

}  // namespace

std::string serialize(const Dialogue& dialogue) {
  json turns = json::array();
  for (const auto& t : dialogue.turns)
    turns.push_back({{"speaker", t.speaker == Speaker::kAgent ? "agent" : "user"},
                     {"text", t.text},
                     {"flagged", t.flagged},
                     {"kind", kind_name(t.kind)}});
  return json{{"trajectory_ref", dialogue.trajectory_ref},
              {"stage", dialogue.stage == Stage::kTemplatized ? "templatized" : "refined"},
              {"turns", std::move(turns)}}
      .dump();
}

Dialogue deserialize_dialogue(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw SchemaError("$", std::string("invalid JSON: ") + e.what());
  }
  auto need = [](const json& obj, const char* key, const std::string& path) -> const json& {
    if (!obj.is_object() || !obj.contains(key)) throw SchemaError(path.empty() ? key : path + "." + key, "missing required field");
    return obj.at(key);
  };
  Dialogue d;
  const json& ref = need(doc, "trajectory_ref", "");
  d.trajectory_ref = ref.is_string() ? ref.get<std::string>() : ref.dump();
  const auto stage = need(doc, "stage", "").get<std::string>();
  if (stage == "templatized")
    d.stage = Stage::kTemplatized;
  else if (stage == "refined")
    d.stage = Stage::kRefined;
  else
    throw SchemaError("stage", "unknown stage '" + stage + "'");
  const json& turns = need(doc, "turns", "");
  if (!turns.is_array()) throw SchemaError("turns", "expected a list");
  for (std::size_t i = 0; i < turns.size(); ++i) {
    const std::string p = "turns[" + std::to_string(i) + "]";
    Utterance u;
    const auto speaker = need(turns[i], "speaker", p).get<std::string>();
    if (speaker != "agent" && speaker != "user") throw SchemaError(p + ".speaker", "unknown speaker '" + speaker + "'");
    u.speaker = speaker == "agent" ? Speaker::kAgent : Speaker::kUser;
    u.text = need(turns[i], "text", p).get<std::string>();
    u.flagged = turns[i].value("flagged", false);
    const std::string kind = turns[i].value("kind", u.speaker == Speaker::kUser ? "user" : "recommend");
    if (kind == "recommend")
      u.kind = TurnKind::kRecommend;
    else if (kind == "item_elicit")
      u.kind = TurnKind::kItemElicit;
    else if (kind == "attr_elicit")
      u.kind = TurnKind::kAttrElicit;
    else if (kind == "user")
      u.kind = TurnKind::kUser;
    else
      throw SchemaError(p + ".kind", "unknown turn kind '" + kind + "'");
    d.turns.push_back(std::move(u));
  }
  return d;
}

std::vector<Dialogue> read_dialogues(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::vector<Dialogue> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(deserialize_dialogue(line));
  return out;
}

void write_dialogues(const std::string& path, const std::vector<Dialogue>& dialogues) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  for (const auto& d : dialogues) out << serialize(d) << '\n';
}

}  // namespace crsim
