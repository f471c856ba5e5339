#include "crsim/dialogue.hpp"
#include "crsim/errors.hpp"
#include "example_fixture.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <map>

namespace crsim {
namespace {

using testing::ReferenceExample;
using testing::fixture;
using testing::read_text;
using testing::vec;

// The templatized line being refined: the last line before the instructions.
std::string current_line(const std::string& prompt) {
  const auto end = prompt.find("\n\nAbove is a conversation");
  const std::string head = prompt.substr(0, end);
  const auto nl = head.rfind('\n');
  return nl == std::string::npos ? head : head.substr(nl + 1);
}

std::string line_of(const Utterance& u) { return std::string(speaker_label(u.speaker)) + ": " + u.text; }

// Mock that echoes the templatized text with a "[R] " marker and records
// which turn each prompt refined.
struct EchoScript {
  std::map<std::string, std::size_t> index;
  std::vector<std::size_t> order;
  std::vector<std::string> prompts;
  std::map<std::size_t, int> calls;
  std::function<std::optional<std::string>(std::size_t turn, const std::string& line)> override_reply;

  explicit EchoScript(const Dialogue& d) {
    for (std::size_t i = 0; i < d.turns.size(); ++i) index[line_of(d.turns[i])] = i;
  }

  FunctionLm client() {
    return FunctionLm([this](const LmRequest& req) {
      const std::string line = current_line(req.prompt);
      const std::size_t turn = index.at(line);
      order.push_back(turn);
      prompts.push_back(req.prompt);
      ++calls[turn];
      if (override_reply)
        if (auto r = override_reply(turn, line)) return LmResponse{*r, "stop"};
      const auto colon = line.find(": ");
      return LmResponse{line.substr(0, colon) + ": [R] " + line.substr(colon + 2), "stop"};
    });
  }
};

TEST(RenderTemplates, ExampleTrajectoryIsByteExact) {
  const ReferenceExample a;
  EXPECT_EQ(to_text(a.dialogue()), read_text(fixture("example_dialogue.txt")));
}

TEST(RenderTemplates, SpeakersAlternateAndKindsFollowActions) {
  const auto d = ReferenceExample().dialogue();
  ASSERT_EQ(d.turns.size(), 8u);
  EXPECT_EQ(d.stage, Stage::kTemplatized);
  EXPECT_EQ(d.trajectory_ref, "example");
  for (std::size_t i = 0; i < d.turns.size(); ++i)
    EXPECT_EQ(d.turns[i].speaker, i % 2 == 0 ? Speaker::kAgent : Speaker::kUser);
  EXPECT_EQ(d.turns[0].kind, TurnKind::kAttrElicit);
  EXPECT_EQ(d.turns[2].kind, TurnKind::kRecommend);
  EXPECT_EQ(d.turns[4].kind, TurnKind::kItemElicit);
  EXPECT_EQ(d.turns[1].kind, TurnKind::kUser);
  EXPECT_EQ(d.turns[1].text, "No, I want something less romantic.");
}

TEST(RenderTemplates, AffirmativeAnswerAndPlainReject) {
  ReferenceExample a;
  a.trajectory.turns[0].user.direction = 1;
  a.trajectory.turns[1].user.critique.reset();
  const auto d = a.dialogue();
  EXPECT_EQ(d.turns[1].text, "Yes, I want something more romantic.");
  EXPECT_EQ(d.turns[3].text, "No. I don't like them.");
}

TEST(RenderTemplates, EmptyTrajectoryGivesEmptyDialogue) {
  const ReferenceExample a;
  EXPECT_TRUE(render_templates(Trajectory{}, a.catalog, a.cavs).turns.empty());
}

TEST(RenderTemplates, UnknownIdsAreErrors) {
  ReferenceExample a;
  a.trajectory.turns[2].agent.slate[0].id = 999;
  EXPECT_THROW(a.dialogue(), DataError);
  ReferenceExample b;
  b.trajectory.turns[0].agent.attr->id = 77;
  EXPECT_THROW(b.dialogue(), DataError);
}

TEST(RenderTemplates, TerminationHasNoUserUtterance) {
  ReferenceExample a;
  a.trajectory.turns[3].user = UserRecord{UserKind::kTerminate, {}, {}, {}};
  a.trajectory.outcome = Outcome::kTerminated;
  const auto d = a.dialogue();
  ASSERT_EQ(d.turns.size(), 7u);
  EXPECT_EQ(d.turns.back().speaker, Speaker::kAgent);
}

TEST(BuildPrompt, ItemElicitationCarriesItsRequirements) {
  const auto d = ReferenceExample().dialogue();
  const auto p = build_prompt(std::span(d.turns).first(4), d.turns[4]);
  EXPECT_NE(p.find("4. Do not recommend the movies but ask preference between them.\n"), std::string::npos);
  EXPECT_NE(p.find("5. Ask a comparison question at the end.\n"), std::string::npos);
  EXPECT_NE(p.find("Rephrase the last Agent turn"), std::string::npos);
}

TEST(BuildPrompt, AttributeElicitationAndUserBlocks) {
  const auto d = ReferenceExample().dialogue();
  const auto attr = build_prompt({}, d.turns[0]);
  EXPECT_NE(attr.find("4. Do not recommend the movies.\n"), std::string::npos);
  EXPECT_EQ(attr.find("5. "), std::string::npos);
  const auto user = build_prompt(std::span(d.turns).first(1), d.turns[1]);
  EXPECT_NE(user.find("Must be consistent with what the user said"), std::string::npos);
  EXPECT_NE(user.find("Explain very briefly the rationale of the choice"), std::string::npos);
  const auto rec = build_prompt(std::span(d.turns).first(2), d.turns[2]);
  EXPECT_EQ(rec.find("4. "), std::string::npos);
}

TEST(BuildPrompt, FirstTurnContextIsOnlyTheCurrentTurn) {
  const auto d = ReferenceExample().dialogue();
  const auto p = build_prompt({}, d.turns[0]);
  EXPECT_EQ(p.substr(0, p.find("\n\nAbove is a conversation")), line_of(d.turns[0]));
}

TEST(ValidateRefinement, Rules) {
  EXPECT_EQ(validate_refinement("Agent: X", Speaker::kAgent, 1000), std::optional<std::string>("X"));
  EXPECT_EQ(validate_refinement("  User:   sure thing \n", Speaker::kUser, 1000), std::optional<std::string>("sure thing"));
  EXPECT_FALSE(validate_refinement("User: X", Speaker::kAgent, 1000));
  EXPECT_FALSE(validate_refinement("X", Speaker::kAgent, 1000));
  EXPECT_FALSE(validate_refinement("Agent:   ", Speaker::kAgent, 1000));
  EXPECT_FALSE(validate_refinement("Agent: a\nUser: b", Speaker::kAgent, 1000));
  EXPECT_FALSE(validate_refinement("Agent: " + std::string(20, 'x'), Speaker::kAgent, 10));
}

TEST(Inpaint, EchoMockPrefixesEveryTurn) {
  const auto d = ReferenceExample().dialogue();
  EchoScript script(d);
  auto lm = script.client();
  const auto r = inpaint(d, lm);
  EXPECT_EQ(r.stage, Stage::kRefined);
  ASSERT_EQ(r.turns.size(), d.turns.size());
  for (std::size_t i = 0; i < d.turns.size(); ++i) {
    EXPECT_EQ(r.turns[i].speaker, d.turns[i].speaker);
    EXPECT_EQ(r.turns[i].kind, d.turns[i].kind);
    EXPECT_EQ(r.turns[i].text, "[R] " + d.turns[i].text);
    EXPECT_FALSE(r.turns[i].flagged);
  }
}

TEST(Inpaint, IdentityMockReproducesTemplates) {
  const auto d = ReferenceExample().dialogue();
  EchoScript script(d);
  script.override_reply = [](std::size_t, const std::string& line) { return std::optional<std::string>(line); };
  auto lm = script.client();
  const auto r = inpaint(d, lm);
  EXPECT_EQ(to_text(r), to_text(d));
}

TEST(Inpaint, StripsSpeakerPrefix) {
  const auto d = ReferenceExample().dialogue();
  EchoScript script(d);
  script.override_reply = [](std::size_t turn, const std::string&) {
    return std::optional<std::string>(std::string(turn % 2 == 0 ? "Agent: X" : "User: Y"));
  };
  auto lm = script.client();
  const auto r = inpaint(d, lm);
  for (std::size_t i = 0; i < r.turns.size(); ++i) EXPECT_EQ(r.turns[i].text, i % 2 == 0 ? "X" : "Y");
}

TEST(Inpaint, ScriptedValidationFailureFlagsOnlyThatTurn) {
  const auto d = ReferenceExample().dialogue();
  EchoScript script(d);
  script.override_reply = [](std::size_t turn, const std::string&) {
    return turn == 2 ? std::optional<std::string>("no prefix here") : std::nullopt;
  };
  auto lm = script.client();
  const auto r = inpaint(d, lm);
  for (std::size_t i = 0; i < r.turns.size(); ++i) {
    EXPECT_EQ(r.turns[i].flagged, i == 2) << i;
    EXPECT_EQ(r.turns[i].text, i == 2 ? d.turns[i].text : "[R] " + d.turns[i].text) << i;
  }
  EXPECT_EQ(script.calls[2], 3);
  EXPECT_EQ(script.calls[3], 1);
}

TEST(Inpaint, TransportFailuresCountAsAttempts) {
  const auto d = ReferenceExample().dialogue();
  EchoScript script(d);
  script.override_reply = [](std::size_t turn, const std::string&) -> std::optional<std::string> {
    if (turn == 5) throw LmTransportError("scripted outage");
    return std::nullopt;
  };
  auto lm = script.client();
  InpaintPolicy policy;
  policy.max_attempts = 2;
  const auto r = inpaint(d, lm, policy);
  for (std::size_t i = 0; i < r.turns.size(); ++i) EXPECT_EQ(r.turns[i].flagged, i == 5) << i;
  EXPECT_EQ(script.calls[5], 2);
}

TEST(Inpaint, NoPromptContainsLaterTurns) {
  for (auto mode : {PassMode::kTwoPass, PassMode::kSinglePass}) {
    const auto d = ReferenceExample().dialogue();
    EchoScript script(d);
    auto lm = script.client();
    InpaintPolicy policy;
    policy.mode = mode;
    inpaint(d, lm, policy);
    ASSERT_EQ(script.prompts.size(), d.turns.size());
    for (std::size_t k = 0; k < script.prompts.size(); ++k) {
      const std::size_t t = script.order[k];
      for (std::size_t later = t + 1; later < d.turns.size(); ++later)
        EXPECT_EQ(script.prompts[k].find(d.turns[later].text), std::string::npos) << t << " sees " << later;
    }
  }
}

TEST(Inpaint, AgentPromptsContainSlateTitles) {
  const ReferenceExample a;
  const auto d = a.dialogue();
  EchoScript script(d);
  auto lm = script.client();
  inpaint(d, lm);
  for (std::size_t k = 0; k < script.prompts.size(); ++k) {
    const std::size_t t = script.order[k];
    if (t % 2 != 0) continue;
    for (const auto& item : a.trajectory.turns[t / 2].agent.slate)
      EXPECT_NE(script.prompts[k].find(item.name), std::string::npos) << item.name;
  }
}

TEST(Inpaint, TwoPassRefinesUsersFirstAgainstRefinedContext) {
  const auto d = ReferenceExample().dialogue();
  EchoScript script(d);
  auto lm = script.client();
  inpaint(d, lm);
  EXPECT_EQ(script.order, (std::vector<std::size_t>{1, 3, 5, 7, 0, 2, 4, 6}));
  // Agent turn 2 sees the refined user turn 1 and the refined agent turn 0.
  const auto& p = script.prompts[5];
  EXPECT_NE(p.find("User: [R] " + d.turns[1].text), std::string::npos);
  EXPECT_NE(p.find("Agent: [R] " + d.turns[0].text), std::string::npos);

  EchoScript single(d);
  auto lm2 = single.client();
  InpaintPolicy policy;
  policy.mode = PassMode::kSinglePass;
  inpaint(d, lm2, policy);
  EXPECT_EQ(single.order, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7}));
}

TEST(Inpaint, RejectsRefinedInput) {
  auto d = ReferenceExample().dialogue();
  d.stage = Stage::kRefined;
  CannedLm lm({}, std::string("Agent: x"));
  EXPECT_THROW(inpaint(d, lm), DataError);
}

TEST(DialogueJson, RoundTrip) {
  const auto d = ReferenceExample().dialogue();
  EchoScript script(d);
  script.override_reply = [](std::size_t turn, const std::string&) {
    return turn == 4 ? std::optional<std::string>("bad") : std::nullopt;
  };
  auto lm = script.client();
  const auto r = inpaint(d, lm);
  EXPECT_EQ(deserialize_dialogue(serialize(d)), d);
  EXPECT_EQ(deserialize_dialogue(serialize(r)), r);
  const std::string path = ::testing::TempDir() + "crsim_dialogues.jsonl";
  write_dialogues(path, {d, r});
  EXPECT_EQ(read_dialogues(path), (std::vector<Dialogue>{d, r}));
}

TEST(DialogueJson, SchemaErrorsNameTheField) {
  try {
    deserialize_dialogue(R"({"trajectory_ref":"x","stage":"refined","turns":[{"speaker":"robot","text":"a"}]})");
    FAIL();
  } catch (const SchemaError& e) {
    EXPECT_EQ(e.path(), "turns[0].speaker");
  }
}

}  // namespace
}  // namespace crsim
