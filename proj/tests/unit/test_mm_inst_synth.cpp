#include "mmedit/checkpoint.hpp"
#include "mmedit/io.hpp"
#include "mmedit/mm_inst_synth.hpp"
#include "mmedit/refinement_prior.hpp"
#include "mmedit/training.hpp"

#include "expect_error.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>

#include <unistd.h>

using namespace mmedit;
namespace fs = std::filesystem;

namespace {

const ConceptWorld& world() {
  static const ConceptWorld w = ConceptWorld::generate(0);
  return w;
}

// Fresh scratch directory per test case.
struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() / ("mmedit_synth_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

bool has_concept(const MultimodalAsset& a, ConceptId id) {
  return std::any_of(a.concepts.begin(), a.concepts.end(), [&](const ConceptWeight& c) { return c.id == id; });
}

const InstructionSlot& slot_with(const InstructionRecord& r, SlotRole role) {
  for (const auto& s : r.slots)
    if (s.role == role) return s;
  FAIL("no slot with role " << std::string(to_string(role)));
  throw;
}

int count_markers(const std::string& text) {
  int n = 0;
  for (std::size_t p = text.find(kSlotMarker); p != std::string::npos; p = text.find(kSlotMarker, p + 1)) ++n;
  return n;
}

}  // namespace

TEST_CASE("template banks have at least four variants and one base each") {
  for (EditKind k : {EditKind::Add, EditKind::Remove, EditKind::Replace, EditKind::Style, EditKind::Atmosphere}) {
    CHECK(template_bank(k).size() >= 4);
    for (const auto& t : template_bank(k)) {
      CHECK(std::count(t.roles.begin(), t.roles.end(), SlotRole::Base) == 1);
      CHECK(count_markers(t.text) == static_cast<int>(t.roles.size()));
    }
    for (const auto& t : follow_up_bank(k)) CHECK(std::count(t.roles.begin(), t.roles.end(), SlotRole::Base) == 0);
  }
}

TEST_CASE("replace records have three slots and swap the concept") {
  Rng rng(1);
  const std::vector<EditKind> kinds{EditKind::Replace};
  for (int i = 0; i < 50; ++i) {
    const InstructionRecord r = synth_record(world(), kinds, rng, i);
    CHECK(r.slots.size() == 3);
    CHECK(count_markers(r.instruction_text) == 3);
    const ConceptId old_id = slot_with(r, SlotRole::ReplaceOld).asset.concepts[0].id;
    const ConceptId new_id = slot_with(r, SlotRole::ReplaceNew).asset.concepts[0].id;
    CHECK(has_concept(r.base_asset, old_id));
    CHECK_FALSE(has_concept(r.oracle_target, old_id));
    CHECK(has_concept(r.oracle_target, new_id));
    CHECK(r.base_asset.modality == Modality::Image);
    CHECK(r.base_slot().modality == Modality::Image);
  }
}

TEST_CASE("add then style composite applies in order") {
  Rng rng(2);
  const std::vector<EditKind> kinds{EditKind::Add, EditKind::Style};
  for (int i = 0; i < 50; ++i) {
    const InstructionRecord r = synth_record(world(), kinds, rng, i);
    const auto edits = record_edits(r);
    REQUIRE(edits.size() == 2);
    REQUIRE(std::holds_alternative<AddEdit>(edits[0]));
    REQUIRE(std::holds_alternative<StyleEdit>(edits[1]));
    CHECK(has_concept(r.oracle_target, std::get<AddEdit>(edits[0]).concept_id));
    CHECK(r.oracle_target.style == std::get<StyleEdit>(edits[1]).style);
    CHECK(r.oracle_target.concepts.size() == r.base_asset.concepts.size() + 1);
  }
}

TEST_CASE("oracle targets are re-derivable from the slots") {
  for (const auto& r : synth_corpus(world(), 300, 3, default_kind_mix(), 0.5)) {
    CHECK(derive_oracle_target(world(), r) == r.oracle_target);
    CHECK_NOTHROW(validate_record(world(), r));
  }
}

TEST_CASE("a one-concept world cannot host a replace") {
  WorldConfig c;
  c.num_concepts = 1;
  const ConceptWorld tiny = ConceptWorld::generate(4, c);
  Rng rng(4);
  const std::vector<EditKind> kinds{EditKind::Replace};
  expect_error([&] { synth_record(tiny, kinds, rng); }, ErrorCode::InsufficientConcepts);
}

TEST_CASE("slot realization at p = 0 and p = 1") {
  const PriorModel prior(PriorConfig{}, 5);
  Rng rng(5);
  for (const auto& r : synth_corpus(world(), 100, 5, default_kind_mix(), 0.0)) {
    const RealizedRecord none = realize_slots(world(), r, &prior, 0.0, rng);
    const RealizedRecord all = realize_slots(world(), r, &prior, 1.0, rng);
    for (std::size_t i = 0; i < r.slots.size(); ++i) {
      if (r.slots[i].role == SlotRole::Base) {
        CHECK(none.record.slots[i].modality == Modality::Image);
        CHECK(all.record.slots[i].modality == Modality::Image);
      } else {
        CHECK(none.record.slots[i].modality == Modality::Text);
        CHECK(all.record.slots[i].modality != Modality::Text);
      }
    }
    CHECK(none.embeddings.size() == 1);
    CHECK(all.embeddings.size() == r.slots.size());
    for (const auto& e : all.embeddings) CHECK(std::abs(e.vec.norm() - 1.0) < 1e-9);
  }
}

TEST_CASE("p = 0.5 realizes half the slots") {
  Rng rng(6);
  long slots = 0, realized = 0, image = 0;
  const auto records = synth_corpus(world(), 8000, 6, default_kind_mix(), 0.0);
  for (auto r : records) {
    assign_slot_modalities(r, 0.5, rng);
    for (const auto& s : r.slots) {
      if (s.role == SlotRole::Base) continue;
      ++slots;
      realized += s.modality != Modality::Text ? 1 : 0;
      image += s.modality == Modality::Image ? 1 : 0;
    }
    if (slots >= 10000) break;
  }
  REQUIRE(slots >= 10000);
  const double frac = static_cast<double>(realized) / slots;
  CHECK(std::abs(frac - 0.5) <= 0.02);
  CHECK(std::abs(static_cast<double>(image) / realized - 0.5) <= 0.03);
}

TEST_CASE("kind mix matches the manifest at 10^4 records") {
  const auto mix = default_kind_mix();
  double total = 0.0;
  for (const auto& m : mix) total += m.weight;
  CHECK(std::abs(total - 1.0) < 1e-12);
  const auto records = synth_corpus(world(), 10000, 7, mix, 0.5);
  std::map<std::string, int> counts;
  for (const auto& r : records) ++counts[kind_list_name(r.edit_kinds)];
  for (const auto& m : mix) {
    const double observed = counts[kind_list_name(m.kinds)] / 10000.0;
    CHECK_MESSAGE(std::abs(observed - m.weight) <= 0.02, kind_list_name(m.kinds));
  }
}

TEST_CASE("corpus JSONL round trip keeps every field") {
  TempDir dir;
  auto records = synth_corpus(world(), 1000, 8, default_kind_mix(), 0.5);
  Rng rng(8);
  for (std::size_t i = 0; i < records.size(); i += 3) {
    records[i].pseudo_target_embedding = Embedding{l2_normalize(rng.normal_vec(64)), Modality::Image, true};
    records[i].pseudo_low_fidelity = i % 2 == 0;
  }
  write_corpus(records, dir.path / "c.jsonl");
  const auto back = load_corpus(dir.path / "c.jsonl");
  REQUIRE(back.size() == records.size());
  for (std::size_t i = 0; i < records.size(); ++i) CHECK(back[i] == records[i]);
  CHECK(back[0].pseudo_target_embedding->vec == records[0].pseudo_target_embedding->vec);
}

TEST_CASE("truncated final line reports its line number; empty file is empty") {
  TempDir dir;
  const auto records = synth_corpus(world(), 3, 9, default_kind_mix(), 0.5);
  write_corpus(records, dir.path / "c.jsonl");
  std::string text = io::read_text(dir.path / "c.jsonl");
  text.resize(text.size() - 20);
  io::write_text(dir.path / "cut.jsonl", text);
  try {
    load_corpus(dir.path / "cut.jsonl");
    FAIL("expected MalformedRecord");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MalformedRecord);
    CHECK(std::string(e.what()).find("cut.jsonl:3:") != std::string::npos);
  }
  io::write_text(dir.path / "empty.jsonl", "");
  CHECK(load_corpus(dir.path / "empty.jsonl").empty());
  expect_error([] { record_from_json("{\"id\": 1}"); }, ErrorCode::MalformedRecord);
}

TEST_CASE("same seeds give a byte-identical corpus file") {
  TempDir dir;
  write_corpus(synth_corpus(world(), 200, 10, default_kind_mix(), 0.5), dir.path / "a.jsonl");
  write_corpus(synth_corpus(ConceptWorld::generate(0), 200, 10, default_kind_mix(), 0.5), dir.path / "b.jsonl");
  write_corpus(synth_corpus(world(), 200, 11, default_kind_mix(), 0.5), dir.path / "c.jsonl");
  CHECK(io::read_text(dir.path / "a.jsonl") == io::read_text(dir.path / "b.jsonl"));
  CHECK(io::read_text(dir.path / "a.jsonl") != io::read_text(dir.path / "c.jsonl"));
}

TEST_CASE("fine-tune view shares ids and encodes what is shown") {
  for (const auto& r : synth_corpus(world(), 200, 12, default_kind_mix(), 0.5)) {
    const InstructionRecord f = finetune_view(r);
    CHECK(f.id == r.id);
    CHECK(f.instruction_text == r.instruction_text);
    CHECK(f.oracle_target == r.oracle_target);
    for (std::size_t i = 0; i < f.slots.size(); ++i) {
      CHECK(f.slots[i].modality == r.slots[i].modality);
      if (f.slots[i].modality != Modality::Text) CHECK(f.slots[i].asset.modality == f.slots[i].modality);
    }
    CHECK(prompt_text(world(), f) == prompt_text(world(), r));
  }
}

TEST_CASE("manifest JSON round trip") {
  CorpusManifest m;
  m.seed = 0xfeedbeefcafef00dULL;
  m.record_count = 5000;
  m.finetune_count = 500;
  m.kind_mix = default_kind_mix();
  m.p = 0.5;
  m.world_fingerprint = world().fingerprint();
  const CorpusManifest back = manifest_from_json(manifest_to_json(m));
  CHECK(back.seed == m.seed);
  CHECK(back.record_count == 5000);
  CHECK(back.finetune_count == 500);
  CHECK(back.p == 0.5);
  CHECK(back.world_fingerprint == m.world_fingerprint);
  REQUIRE(back.kind_mix.size() == m.kind_mix.size());
  for (std::size_t i = 0; i < m.kind_mix.size(); ++i) {
    CHECK(back.kind_mix[i].kinds == m.kind_mix[i].kinds);
    CHECK(back.kind_mix[i].weight == m.kind_mix[i].weight);
  }
}

TEST_CASE("pseudo targets: flag rule, missing base, trained fidelity") {
  const SceneLatentMap lmap = make_latent_map(world());
  const NoiseSchedule sched = NoiseSchedule::linear();
  const auto records = synth_corpus(world(), 100, 13, default_kind_mix(), 0.5);

  const Denoiser untrained(DenoiserConfig{}, 13);
  for (std::size_t i = 0; i < 20; ++i) {
    const PseudoTarget pt = synth_pseudo_target(world(), records[i], untrained, lmap, sched);
    CHECK(pt.low_fidelity == (pt.cosine_to_oracle < kLowFidelityCosine));
    CHECK(pt.embedding.vec.size() == 64);
  }

  InstructionRecord no_base = records[0];
  std::erase_if(no_base.slots, [](const InstructionSlot& s) { return s.role == SlotRole::Base; });
  expect_error([&] { synth_pseudo_target(world(), no_base, untrained, lmap, sched); }, ErrorCode::MalformedRecord);

  Denoiser trained(DenoiserConfig{}, mix_seed(0, 2));
  train_diffusion(world(), trained, lmap, sched, standard_config(TrainTarget::Diffusion));
  std::vector<double> cos;
  for (const auto& r : records) cos.push_back(synth_pseudo_target(world(), r, trained, lmap, sched).cosine_to_oracle);
  std::sort(cos.begin(), cos.end());
  const double median = 0.5 * (cos[49] + cos[50]);
  MESSAGE("median pseudo-target cosine " << median);
  CHECK(median >= 0.8);
}
