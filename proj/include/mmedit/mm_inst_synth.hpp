#pragma once

#include "mmedit/instruction_lm.hpp"
#include "mmedit/unified_space.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mmedit {

class PriorModel;
class Denoiser;
class SceneLatentMap;
struct NoiseSchedule;

enum class EditKind { Add, Remove, Replace, Style, Atmosphere };

std::string_view to_string(EditKind k);
EditKind parse_edit_kind(std::string_view s);

// What an instruction slot refers to. Each role maps onto one argument of an
// EditSpec; Base is the scene being edited.
enum class SlotRole { Base, Add, Remove, ReplaceOld, ReplaceNew, Style, Atmosphere };

std::string_view to_string(SlotRole r);
SlotRole parse_slot_role(std::string_view s);

inline constexpr std::string_view kSlotMarker = "[slot]";

struct InstructionTemplate {
  std::string text;             // words separated by single spaces, "[slot]" markers
  std::vector<SlotRole> roles;  // one per marker, in order
};

// Full templates for an edit kind (>= 4 each). Every one has exactly one Base marker.
const std::vector<InstructionTemplate>& template_bank(EditKind kind);
// Clauses appended for the second kind of a composite ("and then ..."); no Base marker.
const std::vector<InstructionTemplate>& follow_up_bank(EditKind kind);

// Single-word style names for the reference styles -1, -0.5, 0, 0.5, 1.
const std::vector<std::string>& style_words();
inline constexpr double kStyleLevels[] = {-1.0, -0.5, 0.0, 0.5, 1.0};

// Template words, concept names and style words, then the special tokens.
Vocabulary instruction_vocabulary(const ConceptWorld& world);

struct InstructionSlot {
  Index marker = 0;  // word index of the marker in instruction_text
  SlotRole role = SlotRole::Base;
  int step = 0;  // index into edit_kinds of the edit this slot feeds
  Modality modality = Modality::Text;  // how the slot is presented to the model
  MultimodalAsset asset;
  friend bool operator==(const InstructionSlot&, const InstructionSlot&) = default;
};

struct InstructionRecord {
  std::uint64_t id = 0;
  std::vector<EditKind> edit_kinds;
  std::string instruction_text;
  std::vector<InstructionSlot> slots;
  MultimodalAsset base_asset;
  MultimodalAsset oracle_target;
  std::optional<Embedding> pseudo_target_embedding;
  bool pseudo_low_fidelity = false;

  const InstructionSlot& base_slot() const;
  friend bool operator==(const InstructionRecord& a, const InstructionRecord& b);
};

// Throws MalformedRecord when the record breaks its invariants.
void validate_record(const ConceptWorld& world, const InstructionRecord& record);

// The EditSpec sequence the record's slots describe, in application order.
std::vector<EditSpec> record_edits(const InstructionRecord& record);
// oracle_edit folded over record_edits(record) starting at the base asset.
MultimodalAsset derive_oracle_target(const ConceptWorld& world, const InstructionRecord& record);

// Base scenes have 2-3 concepts; references are single-concept assets with a
// uniformly drawn native modality. All slots start as Text except the base.
InstructionRecord synth_record(const ConceptWorld& world, std::span<const EditKind> kinds, Rng& rng,
                               std::uint64_t id = 0);

// Each non-base slot independently becomes Image or Audio (uniform) with
// probability p, otherwise Text. The base slot stays Image.
void assign_slot_modalities(InstructionRecord& record, double p, Rng& rng);

// Caption used when a slot is presented as text.
std::string slot_caption(const ConceptWorld& world, const MultimodalAsset& asset);

// Encoder-space features for every non-Text slot, in marker order. A slot
// whose asset natively has the presented modality is encoded directly; other
// slots are translated from the text embedding with the prior.
std::vector<Embedding> slot_embeddings(const ConceptWorld& world, const InstructionRecord& record,
                                       const PriorModel* prior, double f);

struct RealizedRecord {
  InstructionRecord record;
  std::vector<Embedding> embeddings;
};

RealizedRecord realize_slots(const ConceptWorld& world, const InstructionRecord& record, const PriorModel* prior,
                             double p, Rng& rng, double f = 6.5);

// Prompt the LM sees: text slots replaced by their captions, other slots by
// [image] / [audio].
std::string prompt_text(const ConceptWorld& world, const InstructionRecord& record);

struct PseudoTarget {
  Embedding embedding;
  double cosine_to_oracle = 0.0;
  bool low_fidelity = false;  // cosine_to_oracle < 0.5
};

inline constexpr double kLowFidelityCosine = 0.5;

// Inverts the base latent under the base embedding, samples under the oracle
// target embedding and re-encodes the result.
PseudoTarget synth_pseudo_target(const ConceptWorld& world, const InstructionRecord& record, const Denoiser& diffusion,
                                 const SceneLatentMap& latent_map, const NoiseSchedule& sched, int steps = 50);

// Kind lists with their sampling weights.
struct KindMixEntry {
  std::vector<EditKind> kinds;
  double weight = 0.0;
};

std::vector<KindMixEntry> default_kind_mix();
std::string kind_list_name(std::span<const EditKind> kinds);  // "add+style"
std::vector<EditKind> parse_kind_list(std::string_view name);

struct CorpusManifest {
  std::uint64_t seed = 0;
  std::size_t record_count = 0;
  std::size_t finetune_count = 0;
  std::vector<KindMixEntry> kind_mix;
  double p = 0.5;
  std::uint64_t world_fingerprint = 0;
};

// Deterministic corpus generation; record i uses rng stream mix_seed(seed, i).
std::vector<InstructionRecord> synth_corpus(const ConceptWorld& world, std::size_t count, std::uint64_t seed,
                                            std::span<const KindMixEntry> mix, double p);

// The fine-tune twin of a pretrain record: same id and instruction, reference
// assets re-tagged with the modality they are presented in so their features
// come from the encoder rather than the prior.
InstructionRecord finetune_view(const InstructionRecord& record);

std::string record_to_json(const InstructionRecord& record);
InstructionRecord record_from_json(std::string_view line);  // throws MalformedRecord

void write_corpus(std::span<const InstructionRecord> records, const std::filesystem::path& path);
std::vector<InstructionRecord> load_corpus(const std::filesystem::path& path);

std::string manifest_to_json(const CorpusManifest& manifest);
CorpusManifest manifest_from_json(std::string_view text);

}  // namespace mmedit
