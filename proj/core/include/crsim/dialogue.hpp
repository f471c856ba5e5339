#pragma once

#include "crsim/corpus.hpp"
#include "crsim/lm_client.hpp"
#include "crsim/trajectory.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace crsim {

enum class Speaker { kAgent, kUser };

/// Which instruction block refines an utterance.
enum class TurnKind { kRecommend, kItemElicit, kAttrElicit, kUser };

struct Utterance {
  Speaker speaker = Speaker::kAgent;
  TurnKind kind = TurnKind::kRecommend;
  std::string text;
  /// Set when refinement fell back to the templatized text.
  bool flagged = false;
  bool operator==(const Utterance&) const = default;
};

enum class Stage { kTemplatized, kRefined };

struct Dialogue {
  std::string trajectory_ref;
  Stage stage = Stage::kTemplatized;
  std::vector<Utterance> turns;
  bool operator==(const Dialogue&) const = default;
};

const char* speaker_label(Speaker speaker);

/// Fixed templates per action and response type. Titles are rendered as
/// "Title (Year)" from the catalog; attribute names from the CAV set.
/// Throws DataError on ids missing from either.
Dialogue render_templates(const Trajectory& trajectory, const ItemCatalog& catalog, const CavSet& cavs,
                          std::string trajectory_ref = {});

/// "Agent: ...\nUser: ..." with one utterance per line.
std::string to_text(std::span<const Utterance> turns);
inline std::string to_text(const Dialogue& dialogue) { return to_text(std::span<const Utterance>(dialogue.turns)); }

/// Refinement prompt: the context turns, the current templatized turn, then
/// the instruction block for the current turn's kind.
std::string build_prompt(std::span<const Utterance> context, const Utterance& current);

enum class PassMode {
  /// User turns first (against templatized agent turns), then agent turns
  /// (against refined user turns).
  kTwoPass,
  /// One interleaved pass in dialogue order.
  kSinglePass,
};

struct InpaintPolicy {
  PassMode mode = PassMode::kTwoPass;
  /// Attempts per turn, counting both transport failures and invalid output.
  std::size_t max_attempts = 3;
  std::size_t max_chars = 1000;
  double temperature = 0.7;
  int max_tokens = 128;
};

/// Validates a raw LM reply for `speaker`: the reply must start with the
/// speaker's "Agent:"/"User:" prefix, be a single nonempty line and stay
/// within max_chars. Returns the text with the prefix stripped.
std::optional<std::string> validate_refinement(const std::string& raw, Speaker speaker, std::size_t max_chars);

/// Rewrites every utterance through the LM. Prompts never contain turns that
/// come after the one being refined. Turns whose attempts are exhausted keep
/// their templatized text and are flagged.
Dialogue inpaint(const Dialogue& templatized, LmClient& lm, const InpaintPolicy& policy = {});

std::string serialize(const Dialogue& dialogue);
Dialogue deserialize_dialogue(const std::string& text);

std::vector<Dialogue> read_dialogues(const std::string& path);
void write_dialogues(const std::string& path, const std::vector<Dialogue>& dialogues);

}  // namespace crsim
