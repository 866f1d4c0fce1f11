#include "mmedit/mm_inst_synth.hpp"

#include "mmedit/diffusion_decoder.hpp"
#include "mmedit/io.hpp"
#include "mmedit/refinement_prior.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_set>

namespace mmedit {

using nlohmann::json;

std::string_view to_string(EditKind k) {
  switch (k) {
    case EditKind::Add: return "add";
    case EditKind::Remove: return "remove";
    case EditKind::Replace: return "replace";
    case EditKind::Style: return "style";
    case EditKind::Atmosphere: return "atmosphere";
  }
  return "?";
}

EditKind parse_edit_kind(std::string_view s) {
  for (EditKind k : {EditKind::Add, EditKind::Remove, EditKind::Replace, EditKind::Style, EditKind::Atmosphere}) {
    if (to_string(k) == s) return k;
  }
  throw Error(ErrorCode::InvalidArgument, "unknown edit kind '" + std::string(s) + "'");
}

std::string_view to_string(SlotRole r) {
  switch (r) {
    case SlotRole::Base: return "base";
    case SlotRole::Add: return "add";
    case SlotRole::Remove: return "remove";
    case SlotRole::ReplaceOld: return "replace_old";
    case SlotRole::ReplaceNew: return "replace_new";
    case SlotRole::Style: return "style";
    case SlotRole::Atmosphere: return "atmosphere";
  }
  return "?";
}

SlotRole parse_slot_role(std::string_view s) {
  for (SlotRole r : {SlotRole::Base, SlotRole::Add, SlotRole::Remove, SlotRole::ReplaceOld, SlotRole::ReplaceNew,
                     SlotRole::Style, SlotRole::Atmosphere}) {
    if (to_string(r) == s) return r;
  }
  throw Error(ErrorCode::InvalidArgument, "unknown slot role '" + std::string(s) + "'");
}

// ---------------------------------------------------------------- templates

namespace {

using R = SlotRole;

const std::vector<InstructionTemplate> kAddBank = {
    {"add [slot] to [slot]", {R::Add, R::Base}},
    {"please incorporate [slot] into [slot]", {R::Add, R::Base}},
    {"put [slot] in [slot]", {R::Add, R::Base}},
    {"insert [slot] into [slot]", {R::Add, R::Base}},
    {"take [slot] and add [slot]", {R::Base, R::Add}},
    {"in [slot] include [slot] as well", {R::Base, R::Add}},
};

const std::vector<InstructionTemplate> kRemoveBank = {
    {"remove [slot] from [slot]", {R::Remove, R::Base}},
    {"take [slot] out of [slot]", {R::Remove, R::Base}},
    {"delete [slot] from [slot]", {R::Remove, R::Base}},
    {"drop [slot] from [slot]", {R::Remove, R::Base}},
    {"in [slot] get rid of [slot]", {R::Base, R::Remove}},
};

const std::vector<InstructionTemplate> kReplaceBank = {
    {"replace [slot] with [slot] in [slot]", {R::ReplaceOld, R::ReplaceNew, R::Base}},
    {"swap [slot] for [slot] in [slot]", {R::ReplaceOld, R::ReplaceNew, R::Base}},
    {"turn [slot] into [slot] within [slot]", {R::ReplaceOld, R::ReplaceNew, R::Base}},
    {"in [slot] change [slot] into [slot]", {R::Base, R::ReplaceOld, R::ReplaceNew}},
    {"use [slot] instead of [slot] in [slot]", {R::ReplaceNew, R::ReplaceOld, R::Base}},
};

const std::vector<InstructionTemplate> kStyleBank = {
    {"change [slot] to the style of [slot]", {R::Base, R::Style}},
    {"render [slot] in the style of [slot]", {R::Base, R::Style}},
    {"apply the style of [slot] to [slot]", {R::Style, R::Base}},
    {"make [slot] look like [slot]", {R::Base, R::Style}},
};

const std::vector<InstructionTemplate> kAtmosphereBank = {
    {"make [slot] fit the atmosphere of [slot]", {R::Base, R::Atmosphere}},
    {"give [slot] the mood of [slot]", {R::Base, R::Atmosphere}},
    {"blend the atmosphere of [slot] into [slot]", {R::Atmosphere, R::Base}},
    {"let [slot] feel like [slot]", {R::Base, R::Atmosphere}},
};

const std::vector<InstructionTemplate> kAddFollow = {
    {"and then add [slot]", {R::Add}},
    {"and also put in [slot]", {R::Add}},
};
const std::vector<InstructionTemplate> kRemoveFollow = {
    {"and then remove [slot]", {R::Remove}},
    {"and also drop [slot]", {R::Remove}},
};
const std::vector<InstructionTemplate> kReplaceFollow = {
    {"and then replace [slot] with [slot]", {R::ReplaceOld, R::ReplaceNew}},
    {"and also swap [slot] for [slot]", {R::ReplaceOld, R::ReplaceNew}},
};
const std::vector<InstructionTemplate> kStyleFollow = {
    {"and then make it look like [slot]", {R::Style}},
    {"and also apply the style of [slot]", {R::Style}},
};
const std::vector<InstructionTemplate> kAtmosphereFollow = {
    {"and then give it the mood of [slot]", {R::Atmosphere}},
    {"and also blend in the atmosphere of [slot]", {R::Atmosphere}},
};

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

Error malformed(const std::string& what) { return Error(ErrorCode::MalformedRecord, what); }

}  // namespace

const std::vector<InstructionTemplate>& template_bank(EditKind kind) {
  switch (kind) {
    case EditKind::Add: return kAddBank;
    case EditKind::Remove: return kRemoveBank;
    case EditKind::Replace: return kReplaceBank;
    case EditKind::Style: return kStyleBank;
    case EditKind::Atmosphere: return kAtmosphereBank;
  }
  throw Error(ErrorCode::InvalidArgument, "edit kind");
}

const std::vector<InstructionTemplate>& follow_up_bank(EditKind kind) {
  switch (kind) {
    case EditKind::Add: return kAddFollow;
    case EditKind::Remove: return kRemoveFollow;
    case EditKind::Replace: return kReplaceFollow;
    case EditKind::Style: return kStyleFollow;
    case EditKind::Atmosphere: return kAtmosphereFollow;
  }
  throw Error(ErrorCode::InvalidArgument, "edit kind");
}

const std::vector<std::string>& style_words() {
  static const std::vector<std::string> words = {"photo", "sketch", "painting", "anime", "rendering"};
  return words;
}

Vocabulary instruction_vocabulary(const ConceptWorld& world) {
  std::vector<std::string> tokens;
  std::unordered_set<std::string> seen;
  auto push = [&](const std::string& w) {
    if (w != kSlotMarker && seen.insert(w).second) tokens.push_back(w);
  };
  for (EditKind k : {EditKind::Add, EditKind::Remove, EditKind::Replace, EditKind::Style, EditKind::Atmosphere}) {
    for (const auto& t : template_bank(k))
      for (const auto& w : split_words(t.text)) push(w);
    for (const auto& t : follow_up_bank(k))
      for (const auto& w : split_words(t.text)) push(w);
  }
  push("and");
  for (int c = 0; c < world.num_concepts(); ++c) push(world.concept_name(static_cast<ConceptId>(c)));
  for (const auto& w : style_words()) push(w);
  return Vocabulary(std::move(tokens));
}

// ---------------------------------------------------------------- records

const InstructionSlot& InstructionRecord::base_slot() const {
  for (const auto& s : slots)
    if (s.role == SlotRole::Base) return s;
  throw malformed("record " + std::to_string(id) + " has no base slot");
}

bool operator==(const InstructionRecord& a, const InstructionRecord& b) {
  if (a.id != b.id || a.edit_kinds != b.edit_kinds || a.instruction_text != b.instruction_text || a.slots != b.slots ||
      a.base_asset != b.base_asset || a.oracle_target != b.oracle_target ||
      a.pseudo_low_fidelity != b.pseudo_low_fidelity) {
    return false;
  }
  if (a.pseudo_target_embedding.has_value() != b.pseudo_target_embedding.has_value()) return false;
  if (!a.pseudo_target_embedding) return true;
  const Embedding& x = *a.pseudo_target_embedding;
  const Embedding& y = *b.pseudo_target_embedding;
  return x.modality == y.modality && x.normalized == y.normalized && x.vec.size() == y.vec.size() &&
         (x.vec.array() == y.vec.array()).all();
}

std::vector<EditSpec> record_edits(const InstructionRecord& record) {
  std::vector<EditSpec> out;
  for (std::size_t i = 0; i < record.edit_kinds.size(); ++i) {
    const MultimodalAsset* by_role[7] = {};
    for (const auto& s : record.slots) {
      if (s.role != SlotRole::Base && s.step == static_cast<int>(i)) {
        if (s.asset.concepts.empty()) throw malformed("reference slot without concepts");
        by_role[static_cast<int>(s.role)] = &s.asset;
      }
    }
    auto need = [&](SlotRole r) -> const MultimodalAsset& {
      const MultimodalAsset* a = by_role[static_cast<int>(r)];
      if (a == nullptr) throw malformed("edit " + std::to_string(i) + " lacks a " + std::string(to_string(r)) + " slot");
      return *a;
    };
    switch (record.edit_kinds[i]) {
      case EditKind::Add: out.emplace_back(AddEdit{need(R::Add).concepts[0].id, 1.0}); break;
      case EditKind::Remove: out.emplace_back(RemoveEdit{need(R::Remove).concepts[0].id}); break;
      case EditKind::Replace:
        out.emplace_back(ReplaceEdit{need(R::ReplaceOld).concepts[0].id, need(R::ReplaceNew).concepts[0].id});
        break;
      case EditKind::Style: out.emplace_back(StyleEdit{need(R::Style).style}); break;
      case EditKind::Atmosphere: out.emplace_back(AtmosphereEdit{need(R::Atmosphere).concepts[0].id, 0.5}); break;
    }
  }
  return out;
}

MultimodalAsset derive_oracle_target(const ConceptWorld& world, const InstructionRecord& record) {
  MultimodalAsset cur = record.base_asset;
  for (const auto& e : record_edits(record)) cur = oracle_edit(world, cur, e);
  return cur;
}

void validate_record(const ConceptWorld& world, const InstructionRecord& record) {
  const std::string where = "record " + std::to_string(record.id) + ": ";
  if (record.edit_kinds.empty()) throw malformed(where + "no edit kinds");
  if (record.base_asset.modality != Modality::Image) throw malformed(where + "base asset is not an image");
  const auto words = split_words(record.instruction_text);
  std::vector<Index> markers;
  for (std::size_t i = 0; i < words.size(); ++i)
    if (words[i] == kSlotMarker) markers.push_back(static_cast<Index>(i));
  if (markers.size() != record.slots.size()) throw malformed(where + "slot count does not match the markers");
  int bases = 0;
  for (std::size_t i = 0; i < markers.size(); ++i) {
    const auto& s = record.slots[i];
    if (s.marker != markers[i]) throw malformed(where + "slot marker positions disagree with the text");
    if (s.step < 0 || s.step >= static_cast<int>(record.edit_kinds.size())) throw malformed(where + "slot step out of range");
    try {
      validate_asset(world, s.asset);
    } catch (const Error& e) {
      throw malformed(where + e.what());
    }
    if (s.role == SlotRole::Base) {
      ++bases;
      if (s.modality != Modality::Image || !(s.asset == record.base_asset)) throw malformed(where + "bad base slot");
    }
  }
  if (bases != 1) throw malformed(where + "expected exactly one base slot");
  try {
    validate_asset(world, record.base_asset);
    validate_asset(world, record.oracle_target);
  } catch (const Error& e) {
    throw malformed(where + e.what());
  }
}

// ---------------------------------------------------------------- synthesis

namespace {

bool contains(const MultimodalAsset& a, ConceptId id) {
  return std::any_of(a.concepts.begin(), a.concepts.end(), [id](const ConceptWeight& c) { return c.id == id; });
}

ConceptId pick_present(const MultimodalAsset& scene, Rng& rng) {
  return scene.concepts[rng.index(scene.concepts.size())].id;
}

ConceptId pick_absent(const ConceptWorld& world, const MultimodalAsset& scene, Rng& rng) {
  std::vector<ConceptId> free;
  for (int c = 0; c < world.num_concepts(); ++c)
    if (!contains(scene, static_cast<ConceptId>(c))) free.push_back(static_cast<ConceptId>(c));
  if (free.empty()) throw Error(ErrorCode::InsufficientConcepts, "no concept left to introduce");
  return free[rng.index(free.size())];
}

MultimodalAsset reference_asset(ConceptId id, double style, Rng& rng) {
  MultimodalAsset a;
  a.concepts = {{id, 1.0}};
  a.modality = kAllModalities[rng.index(3)];
  a.style = style;
  a.quality = a.modality == Modality::Audio ? sample_quality_audio(rng) : sample_quality_high(rng);
  return a;
}

}  // namespace

InstructionRecord synth_record(const ConceptWorld& world, std::span<const EditKind> kinds, Rng& rng, std::uint64_t id) {
  if (kinds.empty()) throw Error(ErrorCode::InvalidArgument, "synth_record needs at least one edit kind");
  if (world.num_concepts() < 2) throw Error(ErrorCode::InsufficientConcepts, "the world needs at least two concepts");
  const int removes = static_cast<int>(std::count(kinds.begin(), kinds.end(), EditKind::Remove));
  const int min_c = std::max(2, removes + 1);
  const int max_c = std::max(3, min_c);
  if (min_c > world.num_concepts()) throw Error(ErrorCode::InsufficientConcepts, "not enough concepts for the removals");

  InstructionRecord rec;
  rec.id = id;
  rec.edit_kinds.assign(kinds.begin(), kinds.end());
  rec.base_asset = sample_scene(world, rng, min_c, std::min(max_c, world.num_concepts()), Modality::Image);

  std::vector<std::string> words;
  MultimodalAsset cur = rec.base_asset;
  for (std::size_t step = 0; step < kinds.size(); ++step) {
    const auto& bank = step == 0 ? template_bank(kinds[step]) : follow_up_bank(kinds[step]);
    const InstructionTemplate& tmpl = bank[rng.index(bank.size())];

    // References for this edit, chosen against the scene as edited so far.
    MultimodalAsset refs[7];
    EditSpec edit;
    switch (kinds[step]) {
      case EditKind::Add: {
        const ConceptId c = pick_absent(world, cur, rng);
        refs[static_cast<int>(R::Add)] = reference_asset(c, 0.0, rng);
        edit = AddEdit{c, 1.0};
        break;
      }
      case EditKind::Remove: {
        if (cur.concepts.size() < 2) throw Error(ErrorCode::InsufficientConcepts, "cannot remove the only concept");
        const ConceptId c = pick_present(cur, rng);
        refs[static_cast<int>(R::Remove)] = reference_asset(c, 0.0, rng);
        edit = RemoveEdit{c};
        break;
      }
      case EditKind::Replace: {
        const ConceptId old_c = pick_present(cur, rng);
        const ConceptId new_c = pick_absent(world, cur, rng);
        refs[static_cast<int>(R::ReplaceOld)] = reference_asset(old_c, 0.0, rng);
        refs[static_cast<int>(R::ReplaceNew)] = reference_asset(new_c, 0.0, rng);
        edit = ReplaceEdit{old_c, new_c};
        break;
      }
      case EditKind::Style: {
        const double s = kStyleLevels[rng.index(std::size(kStyleLevels))];
        const auto c = static_cast<ConceptId>(rng.index(static_cast<std::size_t>(world.num_concepts())));
        refs[static_cast<int>(R::Style)] = reference_asset(c, s, rng);
        edit = StyleEdit{s};
        break;
      }
      case EditKind::Atmosphere: {
        const ConceptId c = pick_absent(world, cur, rng);
        refs[static_cast<int>(R::Atmosphere)] = reference_asset(c, 0.0, rng);
        edit = AtmosphereEdit{c, 0.5};
        break;
      }
    }
    cur = oracle_edit(world, cur, edit);

    std::size_t role_idx = 0;
    for (const auto& w : split_words(tmpl.text)) {
      if (w == kSlotMarker) {
        const SlotRole role = tmpl.roles.at(role_idx++);
        InstructionSlot slot;
        slot.marker = static_cast<Index>(words.size());
        slot.role = role;
        slot.step = static_cast<int>(step);
        if (role == R::Base) {
          slot.modality = Modality::Image;
          slot.asset = rec.base_asset;
        } else {
          slot.modality = Modality::Text;
          slot.asset = refs[static_cast<int>(role)];
        }
        rec.slots.push_back(std::move(slot));
      }
      words.push_back(w);
    }
  }
  rec.instruction_text = join_words(words);
  rec.oracle_target = cur;
  return rec;
}

void assign_slot_modalities(InstructionRecord& record, double p, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw Error(ErrorCode::InvalidArgument, "substitution probability must lie in [0, 1]");
  for (auto& s : record.slots) {
    if (s.role == SlotRole::Base) {
      s.modality = Modality::Image;
      continue;
    }
    const bool substitute = rng.bernoulli(p);
    const bool image = rng.bernoulli(0.5);
    s.modality = substitute ? (image ? Modality::Image : Modality::Audio) : Modality::Text;
  }
}

std::string slot_caption(const ConceptWorld& world, const MultimodalAsset& asset) {
  std::vector<std::string> words;
  for (const auto& c : asset.concepts) {
    if (!words.empty()) words.emplace_back("and");
    words.push_back(world.concept_name(c.id));
  }
  return join_words(words);
}

namespace {

std::string style_caption(double style) {
  for (std::size_t i = 0; i < std::size(kStyleLevels); ++i)
    if (kStyleLevels[i] == style) return style_words()[i];
  // Off-grid styles map to the nearest level.
  std::size_t best = 0;
  for (std::size_t i = 1; i < std::size(kStyleLevels); ++i)
    if (std::abs(kStyleLevels[i] - style) < std::abs(kStyleLevels[best] - style)) best = i;
  return style_words()[best];
}

}  // namespace

std::string prompt_text(const ConceptWorld& world, const InstructionRecord& record) {
  auto words = split_words(record.instruction_text);
  for (const auto& s : record.slots) {
    if (s.marker < 0 || s.marker >= static_cast<Index>(words.size())) throw malformed("slot marker outside the text");
    std::string& w = words[static_cast<std::size_t>(s.marker)];
    switch (s.modality) {
      case Modality::Image: w = std::string(Vocabulary::kImage); break;
      case Modality::Audio: w = std::string(Vocabulary::kAudio); break;
      case Modality::Text: w = s.role == SlotRole::Style ? style_caption(s.asset.style) : slot_caption(world, s.asset); break;
    }
  }
  return join_words(words);
}

std::vector<Embedding> slot_embeddings(const ConceptWorld& world, const InstructionRecord& record,
                                       const PriorModel* prior, double f) {
  std::vector<const InstructionSlot*> ordered;
  for (const auto& s : record.slots) ordered.push_back(&s);
  std::sort(ordered.begin(), ordered.end(), [](const auto* a, const auto* b) { return a->marker < b->marker; });
  std::vector<Embedding> out;
  for (const auto* s : ordered) {
    if (s->modality == Modality::Text) continue;
    if (s->asset.modality == s->modality) {
      out.push_back(encode_asset(world, s->asset));
      continue;
    }
    if (prior == nullptr) {
      throw Error(ErrorCode::InvalidArgument, "slot needs a translated " + std::string(to_string(s->modality)) +
                                                  " feature but no prior was supplied");
    }
    const Embedding text = encode_asset(world, s->asset.as(Modality::Text));
    Embedding t = translate_modality(*prior, text, f, s->modality).normalized_copy();
    t.modality = s->modality;
    out.push_back(std::move(t));
  }
  return out;
}

RealizedRecord realize_slots(const ConceptWorld& world, const InstructionRecord& record, const PriorModel* prior,
                             double p, Rng& rng, double f) {
  RealizedRecord out{record, {}};
  assign_slot_modalities(out.record, p, rng);
  out.embeddings = slot_embeddings(world, out.record, prior, f);
  return out;
}

PseudoTarget synth_pseudo_target(const ConceptWorld& world, const InstructionRecord& record, const Denoiser& diffusion,
                                 const SceneLatentMap& latent_map, const NoiseSchedule& sched, int steps) {
  const InstructionSlot& base = record.base_slot();
  const Embedding e_base = encode_asset(world, base.asset);
  const Embedding e_target = encode_asset(world, record.oracle_target);
  const Vec z0 = latent_map.ground_truth(world, base.asset);
  const Vec z_T = ddim_invert(diffusion, z0, e_base, sched, steps);
  const Vec z_out = ddim_sample(diffusion, z_T, e_target, sched, steps);
  PseudoTarget out{latent_map.reencode(z_out), 0.0, false};
  out.cosine_to_oracle = cosine_similarity(out.embedding, e_target);
  out.low_fidelity = out.cosine_to_oracle < kLowFidelityCosine;
  return out;
}

// ---------------------------------------------------------------- corpus

std::vector<KindMixEntry> default_kind_mix() {
  using K = EditKind;
  return {
      {{K::Add}, 0.22},
      {{K::Remove}, 0.18},
      {{K::Replace}, 0.22},
      {{K::Style}, 0.10},
      {{K::Atmosphere}, 0.10},
      {{K::Add, K::Style}, 0.05},
      {{K::Remove, K::Add}, 0.05},
      {{K::Replace, K::Atmosphere}, 0.04},
      {{K::Add, K::Atmosphere}, 0.04},
  };
}

std::string kind_list_name(std::span<const EditKind> kinds) {
  std::string out;
  for (EditKind k : kinds) {
    if (!out.empty()) out += '+';
    out += to_string(k);
  }
  return out;
}

std::vector<EditKind> parse_kind_list(std::string_view name) {
  std::vector<EditKind> out;
  std::size_t pos = 0;
  while (pos <= name.size()) {
    std::size_t end = name.find('+', pos);
    if (end == std::string_view::npos) end = name.size();
    out.push_back(parse_edit_kind(name.substr(pos, end - pos)));
    pos = end + 1;
  }
  return out;
}

std::vector<InstructionRecord> synth_corpus(const ConceptWorld& world, std::size_t count, std::uint64_t seed,
                                            std::span<const KindMixEntry> mix, double p) {
  if (mix.empty()) throw Error(ErrorCode::InvalidArgument, "kind mix is empty");
  double total = 0.0;
  for (const auto& m : mix) {
    if (m.kinds.empty() || !(m.weight >= 0.0)) throw Error(ErrorCode::InvalidArgument, "bad kind mix entry");
    total += m.weight;
  }
  if (std::abs(total - 1.0) > 1e-9) throw Error(ErrorCode::InvalidArgument, "kind mix proportions must sum to 1");
  std::vector<InstructionRecord> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(mix_seed(seed, i));
    double u = rng.uniform() * total;
    std::size_t pick = mix.size() - 1;
    for (std::size_t j = 0; j < mix.size(); ++j) {
      if (u < mix[j].weight) {
        pick = j;
        break;
      }
      u -= mix[j].weight;
    }
    InstructionRecord rec = synth_record(world, mix[pick].kinds, rng, i);
    assign_slot_modalities(rec, p, rng);
    out.push_back(std::move(rec));
  }
  return out;
}

InstructionRecord finetune_view(const InstructionRecord& record) {
  InstructionRecord out = record;
  for (auto& s : out.slots) {
    if (s.role != SlotRole::Base && s.modality != Modality::Text) s.asset.modality = s.modality;
  }
  return out;
}

// ---------------------------------------------------------------- json

namespace {

json asset_json(const MultimodalAsset& a) {
  json concepts = json::array();
  for (const auto& c : a.concepts) concepts.push_back(json::array({c.id, c.weight}));
  return json{{"concepts", concepts}, {"modality", to_string(a.modality)}, {"style", a.style}, {"quality", a.quality}};
}

MultimodalAsset asset_from(const json& j) {
  MultimodalAsset a;
  for (const auto& c : j.at("concepts")) {
    if (!c.is_array() || c.size() != 2) throw malformed("concept entries are [id, weight] pairs");
    a.concepts.push_back({c.at(0).get<ConceptId>(), c.at(1).get<double>()});
  }
  a.modality = parse_modality(j.at("modality").get<std::string>());
  a.style = j.at("style").get<double>();
  a.quality = j.at("quality").get<double>();
  return a;
}

}  // namespace

std::string record_to_json(const InstructionRecord& r) {
  json kinds = json::array();
  for (EditKind k : r.edit_kinds) kinds.push_back(to_string(k));
  json slots = json::array();
  for (const auto& s : r.slots) {
    slots.push_back(json{{"marker", s.marker},
                         {"role", to_string(s.role)},
                         {"step", s.step},
                         {"modality", to_string(s.modality)},
                         {"asset", asset_json(s.asset)}});
  }
  json pseudo = nullptr;
  if (r.pseudo_target_embedding) {
    pseudo = json::array();
    for (Index i = 0; i < r.pseudo_target_embedding->vec.size(); ++i) pseudo.push_back(r.pseudo_target_embedding->vec(i));
  }
  json j{{"id", r.id},
         {"edit_kinds", kinds},
         {"instruction_text", r.instruction_text},
         {"slots", slots},
         {"base_asset", asset_json(r.base_asset)},
         {"oracle_target", asset_json(r.oracle_target)},
         {"pseudo_target_embedding", pseudo},
         {"pseudo_low_fidelity", r.pseudo_low_fidelity}};
  return j.dump();
}

InstructionRecord record_from_json(std::string_view line) {
  try {
    const json j = json::parse(line);
    InstructionRecord r;
    r.id = j.at("id").get<std::uint64_t>();
    for (const auto& k : j.at("edit_kinds")) r.edit_kinds.push_back(parse_edit_kind(k.get<std::string>()));
    r.instruction_text = j.at("instruction_text").get<std::string>();
    for (const auto& s : j.at("slots")) {
      InstructionSlot slot;
      slot.marker = s.at("marker").get<Index>();
      slot.role = parse_slot_role(s.at("role").get<std::string>());
      slot.step = s.at("step").get<int>();
      slot.modality = parse_modality(s.at("modality").get<std::string>());
      slot.asset = asset_from(s.at("asset"));
      r.slots.push_back(std::move(slot));
    }
    r.base_asset = asset_from(j.at("base_asset"));
    r.oracle_target = asset_from(j.at("oracle_target"));
    const json& pseudo = j.at("pseudo_target_embedding");
    if (!pseudo.is_null()) {
      Vec v(static_cast<Index>(pseudo.size()));
      for (std::size_t i = 0; i < pseudo.size(); ++i) v(static_cast<Index>(i)) = pseudo.at(i).get<double>();
      r.pseudo_target_embedding = Embedding{std::move(v), Modality::Image, true};
    }
    r.pseudo_low_fidelity = j.value("pseudo_low_fidelity", false);
    return r;
  } catch (const json::exception& e) {
    throw malformed(e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::MalformedRecord) throw;
    throw malformed(e.what());
  }
}

void write_corpus(std::span<const InstructionRecord> records, const std::filesystem::path& path) {
  std::string text;
  for (const auto& r : records) {
    text += record_to_json(r);
    text += '\n';
  }
  io::write_text(path, text);
}

std::vector<InstructionRecord> load_corpus(const std::filesystem::path& path) {
  const std::string text = io::read_text(path);
  std::vector<InstructionRecord> out;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    const bool terminated = end != std::string::npos;
    if (!terminated) end = text.size();
    ++line_no;
    const std::string_view line(text.data() + pos, end - pos);
    pos = end + 1;
    if (line.empty()) {
      if (terminated) continue;
      break;
    }
    try {
      out.push_back(record_from_json(line));
    } catch (const Error& e) {
      throw Error(ErrorCode::MalformedRecord, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

std::string manifest_to_json(const CorpusManifest& m) {
  json mix = json::array();
  for (const auto& e : m.kind_mix) mix.push_back(json{{"kinds", kind_list_name(e.kinds)}, {"weight", e.weight}});
  json j{{"seed", m.seed},
         {"record_count", m.record_count},
         {"finetune_count", m.finetune_count},
         {"kind_mix", mix},
         {"p", m.p},
         {"world_fingerprint", m.world_fingerprint}};
  return j.dump(2) + "\n";
}

CorpusManifest manifest_from_json(std::string_view text) {
  try {
    const json j = json::parse(text);
    CorpusManifest m;
    m.seed = j.at("seed").get<std::uint64_t>();
    m.record_count = j.at("record_count").get<std::size_t>();
    m.finetune_count = j.at("finetune_count").get<std::size_t>();
    for (const auto& e : j.at("kind_mix")) {
      m.kind_mix.push_back({parse_kind_list(e.at("kinds").get<std::string>()), e.at("weight").get<double>()});
    }
    m.p = j.at("p").get<double>();
    m.world_fingerprint = j.at("world_fingerprint").get<std::uint64_t>();
    return m;
  } catch (const json::exception& e) {
    throw malformed(std::string("manifest: ") + e.what());
  }
}

}  // namespace mmedit
