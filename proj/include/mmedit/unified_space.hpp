#pragma once

#include "mmedit/core.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace mmedit {

enum class Modality { Image, Audio, Text };

inline constexpr Modality kAllModalities[] = {Modality::Image, Modality::Audio, Modality::Text};

std::string_view to_string(Modality m);
Modality parse_modality(std::string_view s);

using ConceptId = std::uint32_t;

struct WorldConfig {
  int concept_dim = 16;
  int embed_dim = 64;
  int num_concepts = 64;
  double gap = 0.1;
};

inline constexpr double kStyleCoefficient = 0.2;

// The synthetic concept world and frozen encoder tables. Immutable once
// generated; all accessors are const.
class ConceptWorld {
 public:
  static ConceptWorld generate(std::uint64_t seed, const WorldConfig& config = {});

  std::uint64_t seed() const { return seed_; }
  double gap() const { return gap_; }
  int num_concepts() const { return static_cast<int>(concepts_.rows()); }
  int concept_dim() const { return static_cast<int>(concepts_.cols()); }
  int embed_dim() const { return static_cast<int>(projection_.rows()); }

  // K x D_c, unit rows.
  const Mat& concept_table() const { return concepts_; }
  // D_enc x D_c, orthonormal columns.
  const Mat& projection() const { return projection_; }
  // 3 x D_enc; rows ordered Image, Audio, Text.
  const Mat& modality_offsets() const { return offsets_; }
  const Vec& style_direction() const { return style_dir_; }
  Vec modality_direction(Modality m) const;

  // Orthonormal D_enc x (D_c + 4) basis whose span contains every encoder
  // output: the projection columns, the style direction, then the three
  // modality directions.
  Mat basis() const;

  const std::string& concept_name(ConceptId id) const;
  std::optional<ConceptId> find_concept(std::string_view name) const;
  bool has_concept(ConceptId id) const { return id < static_cast<ConceptId>(num_concepts()); }

  // Same tables with a different cross-modal gap.
  ConceptWorld with_gap(double gap) const;

  std::vector<std::uint8_t> serialize() const;
  static ConceptWorld deserialize(std::span<const std::uint8_t> bytes);
  // Rebuilds a world from raw tables; throws ShapeMismatch on inconsistent shapes.
  static ConceptWorld from_tables(std::uint64_t seed, double gap, Mat concepts, Mat projection, Mat offsets,
                                  Vec style_direction);
  void save(const std::filesystem::path& path) const;
  static ConceptWorld load(const std::filesystem::path& path);
  std::uint64_t fingerprint() const;

  // Bit-level equality of the serialized tables.
  friend bool operator==(const ConceptWorld& a, const ConceptWorld& b) { return a.serialize() == b.serialize(); }

 private:
  std::uint64_t seed_ = 0;
  double gap_ = 0.1;
  Mat concepts_;
  Mat projection_;
  Mat offsets_;
  Vec style_dir_;
  std::vector<std::string> names_;
};

struct ConceptWeight {
  ConceptId id = 0;
  double weight = 1.0;
  friend bool operator==(const ConceptWeight&, const ConceptWeight&) = default;
};

struct MultimodalAsset {
  std::vector<ConceptWeight> concepts;
  Modality modality = Modality::Image;
  double style = 0.0;
  double quality = 5.5;

  // Copy of this asset re-tagged with another modality (its "twin").
  MultimodalAsset as(Modality m) const;
  friend bool operator==(const MultimodalAsset&, const MultimodalAsset&) = default;
};

// Throws UnknownConcept / InvalidArgument when the asset breaks its invariants.
void validate_asset(const ConceptWorld& world, const MultimodalAsset& asset);

struct Embedding {
  Vec vec;
  std::optional<Modality> modality;  // nullopt for model-produced embeddings
  bool normalized = false;

  static Embedding raw(Vec v) { return Embedding{std::move(v), std::nullopt, false}; }
  // l2-normalized copy; keeps the modality tag.
  Embedding normalized_copy() const;
};

double cosine_similarity(const Embedding& a, const Embedding& b);

// normalize(P * normalize(sum w_i c_i) + 0.2 s d_style + gap d_modality).
Embedding encode_asset(const ConceptWorld& world, const MultimodalAsset& asset);

std::vector<MultimodalAsset> make_paired_assets(const ConceptWorld& world, std::span<const ConceptWeight> concepts,
                                                std::span<const Modality> modalities, double style, double quality);

struct AddEdit {
  ConceptId concept_id;
  double weight = 1.0;
};
struct RemoveEdit {
  ConceptId concept_id;
};
struct ReplaceEdit {
  ConceptId old_concept;
  ConceptId new_concept;
};
struct StyleEdit {
  double style;
};
struct AtmosphereEdit {
  ConceptId reference;
  double blend = 0.5;
};
using EditSpec = std::variant<AddEdit, RemoveEdit, ReplaceEdit, StyleEdit, AtmosphereEdit>;

// Ground-truth outcome of applying `edit` to `base`. The result is always an
// Image asset; style/quality are carried over unless the edit sets them.
MultimodalAsset oracle_edit(const ConceptWorld& world, const MultimodalAsset& base, const EditSpec& edit);

// Synthetic corpus helpers.
double sample_quality_high(Rng& rng);   // uniform in [5, 10]
double sample_quality_audio(Rng& rng);  // N(4.5, 1) clipped to [1, 8], mean 4.5
MultimodalAsset sample_scene(const ConceptWorld& world, Rng& rng, int min_concepts, int max_concepts,
                             Modality modality = Modality::Image);

}  // namespace mmedit
