#include "mmedit/unified_space.hpp"

#include "mmedit/io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>

namespace mmedit {

namespace {

constexpr std::array<const char*, 64> kConceptNames = {
    "dog",     "cat",    "beach",   "forest",  "car",     "train",   "boat",     "bird",    "horse",   "city",
    "mountain", "river", "snow",    "fire",    "flower",  "tree",    "house",    "castle",  "robot",   "piano",
    "guitar",  "drum",   "violin",  "rain",    "thunder", "ocean",   "desert",   "bridge",  "tower",   "lamp",
    "clock",   "book",   "chair",   "table",   "window",  "garden",  "lake",     "moon",    "sun",     "star",
    "cloud",   "wind",   "bell",    "cow",     "sheep",   "lion",    "tiger",    "whale",   "dolphin", "owl",
    "wolf",    "bear",   "fox",     "rabbit",  "frog",    "bee",     "crowd",    "market",  "church",  "airplane",
    "bicycle", "engine", "waterfall", "volcano"};

constexpr char kWorldMagic[] = "IA2W";
constexpr std::uint16_t kWorldVersion = 1;

std::string synthetic_name(int i) {
  if (i < static_cast<int>(kConceptNames.size())) return kConceptNames[static_cast<std::size_t>(i)];
  return "concept" + std::to_string(i);
}

}  // namespace

std::string_view to_string(Modality m) {
  switch (m) {
    case Modality::Image: return "image";
    case Modality::Audio: return "audio";
    case Modality::Text: return "text";
  }
  return "image";
}

Modality parse_modality(std::string_view s) {
  if (s == "image" || s == "Image") return Modality::Image;
  if (s == "audio" || s == "Audio") return Modality::Audio;
  if (s == "text" || s == "Text") return Modality::Text;
  throw Error(ErrorCode::InvalidArgument, "unknown modality '" + std::string(s) + "'");
}

ConceptWorld ConceptWorld::generate(std::uint64_t seed, const WorldConfig& config) {
  if (config.concept_dim < 1 || config.num_concepts < 1) {
    throw Error(ErrorCode::InvalidArgument, "world needs at least one concept and one concept dimension");
  }
  if (config.embed_dim < config.concept_dim + 4) {
    throw Error(ErrorCode::InvalidArgument, "embed_dim must be at least concept_dim + 4");
  }
  if (!(config.gap >= 0.0)) throw Error(ErrorCode::InvalidArgument, "gap must be >= 0");

  Rng rng(seed);
  ConceptWorld w;
  w.seed_ = seed;
  w.gap_ = config.gap;

  w.concepts_.resize(config.num_concepts, config.concept_dim);
  for (int k = 0; k < config.num_concepts; ++k) {
    Vec c = rng.normal_vec(config.concept_dim);
    w.concepts_.row(k) = l2_normalize(c).transpose();
  }

  const int cols = config.concept_dim + 4;
  Mat g(config.embed_dim, cols);
  for (Index c = 0; c < g.cols(); ++c)
    for (Index r = 0; r < g.rows(); ++r) g(r, c) = rng.normal();
  Eigen::HouseholderQR<Mat> qr(g);
  Mat q = qr.householderQ() * Mat::Identity(config.embed_dim, cols);
  // Fix column signs so the basis does not depend on LAPACK-style sign conventions.
  Mat r = qr.matrixQR().topRows(cols).triangularView<Eigen::Upper>();
  for (int c = 0; c < cols; ++c)
    if (r(c, c) < 0) q.col(c) = -q.col(c);

  w.projection_ = q.leftCols(config.concept_dim);
  w.style_dir_ = q.col(config.concept_dim);
  w.offsets_.resize(3, config.embed_dim);
  for (int m = 0; m < 3; ++m) w.offsets_.row(m) = q.col(config.concept_dim + 1 + m).transpose();

  w.names_.reserve(static_cast<std::size_t>(config.num_concepts));
  for (int k = 0; k < config.num_concepts; ++k) w.names_.push_back(synthetic_name(k));
  return w;
}

Vec ConceptWorld::modality_direction(Modality m) const {
  return offsets_.row(static_cast<Index>(m)).transpose();
}

Mat ConceptWorld::basis() const {
  Mat b(embed_dim(), concept_dim() + 4);
  b.leftCols(concept_dim()) = projection_;
  b.col(concept_dim()) = style_dir_;
  b.rightCols(3) = offsets_.transpose();
  return b;
}

const std::string& ConceptWorld::concept_name(ConceptId id) const {
  if (!has_concept(id)) throw Error(ErrorCode::UnknownConcept, "concept id " + std::to_string(id));
  return names_[id];
}

std::optional<ConceptId> ConceptWorld::find_concept(std::string_view name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return static_cast<ConceptId>(i);
  return std::nullopt;
}

ConceptWorld ConceptWorld::with_gap(double gap) const {
  if (!(gap >= 0.0)) throw Error(ErrorCode::InvalidArgument, "gap must be >= 0");
  ConceptWorld w = *this;
  w.gap_ = gap;
  return w;
}

std::vector<std::uint8_t> ConceptWorld::serialize() const {
  io::ByteWriter out;
  out.tag(kWorldMagic);
  out.u16(kWorldVersion);
  out.u64(seed_);
  out.matrix(concepts_);
  out.matrix(projection_);
  out.matrix(offsets_);
  out.matrix(style_dir_.transpose());
  Mat gap(1, 1);
  gap(0, 0) = gap_;
  out.matrix(gap);
  return out.take();
}

ConceptWorld ConceptWorld::deserialize(std::span<const std::uint8_t> bytes) {
  io::ByteReader in(bytes);
  if (bytes.size() < 4 || in.tag() != kWorldMagic) throw Error(ErrorCode::BadMagic, "not a world file");
  const auto version = in.u16();
  if (version != kWorldVersion) {
    throw Error(ErrorCode::VersionUnsupported, "world version " + std::to_string(version));
  }
  const std::uint64_t seed = in.u64();
  Mat concepts = in.matrix();
  Mat projection = in.matrix();
  Mat offsets = in.matrix();
  Mat style = in.matrix();
  Mat gap = in.matrix();
  if (style.rows() != 1 || gap.size() != 1) throw Error(ErrorCode::ShapeMismatch, "inconsistent world tables");
  return from_tables(seed, gap(0, 0), std::move(concepts), std::move(projection), std::move(offsets),
                     style.row(0).transpose());
}

ConceptWorld ConceptWorld::from_tables(std::uint64_t seed, double gap, Mat concepts, Mat projection, Mat offsets,
                                       Vec style_direction) {
  if (offsets.rows() != 3 || projection.cols() != concepts.cols() || offsets.cols() != projection.rows() ||
      style_direction.size() != projection.rows() || concepts.rows() < 1) {
    throw Error(ErrorCode::ShapeMismatch, "inconsistent world tables");
  }
  ConceptWorld w;
  w.seed_ = seed;
  w.gap_ = gap;
  w.concepts_ = std::move(concepts);
  w.projection_ = std::move(projection);
  w.offsets_ = std::move(offsets);
  w.style_dir_ = std::move(style_direction);
  for (int k = 0; k < w.num_concepts(); ++k) w.names_.push_back(synthetic_name(k));
  return w;
}

void ConceptWorld::save(const std::filesystem::path& path) const { io::write_file(path, serialize()); }

ConceptWorld ConceptWorld::load(const std::filesystem::path& path) { return deserialize(io::read_file(path)); }

std::uint64_t ConceptWorld::fingerprint() const { return io::fnv1a(serialize()); }

MultimodalAsset MultimodalAsset::as(Modality m) const {
  MultimodalAsset out = *this;
  out.modality = m;
  return out;
}

void validate_asset(const ConceptWorld& world, const MultimodalAsset& asset) {
  if (asset.concepts.empty()) throw Error(ErrorCode::InvalidArgument, "asset has no concepts");
  for (const auto& cw : asset.concepts) {
    if (!world.has_concept(cw.id)) throw Error(ErrorCode::UnknownConcept, "concept id " + std::to_string(cw.id));
    if (!(cw.weight > 0.0 && cw.weight <= 1.0)) {
      throw Error(ErrorCode::InvalidArgument, "concept weight must lie in (0, 1]");
    }
  }
  if (!(asset.style >= -1.0 && asset.style <= 1.0)) throw Error(ErrorCode::InvalidArgument, "style outside [-1, 1]");
  if (!(asset.quality >= 1.0 && asset.quality <= 10.0)) {
    throw Error(ErrorCode::InvalidArgument, "quality outside [1, 10]");
  }
}

Embedding Embedding::normalized_copy() const { return Embedding{l2_normalize(vec), modality, true}; }

double cosine_similarity(const Embedding& a, const Embedding& b) { return cosine(a.vec, b.vec); }

Embedding encode_asset(const ConceptWorld& world, const MultimodalAsset& asset) {
  validate_asset(world, asset);
  Vec mix = Vec::Zero(world.concept_dim());
  for (const auto& cw : asset.concepts) mix += cw.weight * world.concept_table().row(cw.id).transpose();
  Vec v = world.projection() * l2_normalize(mix);
  v += kStyleCoefficient * asset.style * world.style_direction();
  v += world.gap() * world.modality_direction(asset.modality);
  return Embedding{l2_normalize(v), asset.modality, true};
}

std::vector<MultimodalAsset> make_paired_assets(const ConceptWorld& world, std::span<const ConceptWeight> concepts,
                                                std::span<const Modality> modalities, double style, double quality) {
  if (modalities.empty()) throw Error(ErrorCode::InvalidArgument, "make_paired_assets needs at least one modality");
  MultimodalAsset proto;
  proto.concepts.assign(concepts.begin(), concepts.end());
  proto.style = style;
  proto.quality = quality;
  validate_asset(world, proto);
  std::vector<MultimodalAsset> out;
  out.reserve(modalities.size());
  for (Modality m : modalities) out.push_back(proto.as(m));
  return out;
}

namespace {

auto find_weight(std::vector<ConceptWeight>& cs, ConceptId id) {
  return std::find_if(cs.begin(), cs.end(), [id](const ConceptWeight& cw) { return cw.id == id; });
}

void require_concept(const ConceptWorld& world, ConceptId id) {
  if (!world.has_concept(id)) throw Error(ErrorCode::UnknownConcept, "concept id " + std::to_string(id));
}

struct EditApplier {
  const ConceptWorld& world;
  MultimodalAsset& out;

  void operator()(const AddEdit& e) {
    require_concept(world, e.concept_id);
    if (!(e.weight > 0.0 && e.weight <= 1.0)) throw Error(ErrorCode::InvalidArgument, "Add weight must lie in (0, 1]");
    auto it = find_weight(out.concepts, e.concept_id);
    if (it != out.concepts.end()) {
      it->weight = std::min(1.0, it->weight + e.weight);
    } else {
      out.concepts.push_back({e.concept_id, e.weight});
    }
  }

  void operator()(const RemoveEdit& e) {
    auto it = find_weight(out.concepts, e.concept_id);
    if (it == out.concepts.end()) {
      throw Error(ErrorCode::ConceptNotPresent, "Remove of absent concept " + std::to_string(e.concept_id));
    }
    if (out.concepts.size() == 1) throw Error(ErrorCode::InvalidArgument, "Remove would leave an empty scene");
    out.concepts.erase(it);
  }

  void operator()(const ReplaceEdit& e) {
    require_concept(world, e.new_concept);
    auto it = find_weight(out.concepts, e.old_concept);
    if (it == out.concepts.end()) {
      throw Error(ErrorCode::ConceptNotPresent, "Replace of absent concept " + std::to_string(e.old_concept));
    }
    if (e.old_concept == e.new_concept) return;
    auto existing = find_weight(out.concepts, e.new_concept);
    if (existing != out.concepts.end()) {
      existing->weight = std::min(1.0, existing->weight + it->weight);
      out.concepts.erase(find_weight(out.concepts, e.old_concept));
    } else {
      it->id = e.new_concept;
    }
  }

  void operator()(const StyleEdit& e) {
    if (!(e.style >= -1.0 && e.style <= 1.0)) throw Error(ErrorCode::InvalidArgument, "style outside [-1, 1]");
    out.style = e.style;
  }

  void operator()(const AtmosphereEdit& e) {
    require_concept(world, e.reference);
    if (!(e.blend >= 0.0 && e.blend <= 1.0)) throw Error(ErrorCode::InvalidArgument, "blend outside [0, 1]");
    // Blend every weight toward the one-hot reference set, then drop
    // concepts whose weight vanished.
    for (auto& cw : out.concepts) cw.weight *= (1.0 - e.blend);
    auto it = find_weight(out.concepts, e.reference);
    if (it != out.concepts.end()) {
      it->weight += e.blend;
    } else if (e.blend > 0.0) {
      out.concepts.push_back({e.reference, e.blend});
    }
    std::erase_if(out.concepts, [](const ConceptWeight& cw) { return !(cw.weight > 0.0); });
  }
};

}  // namespace

MultimodalAsset oracle_edit(const ConceptWorld& world, const MultimodalAsset& base, const EditSpec& edit) {
  validate_asset(world, base);
  MultimodalAsset out = base;
  out.modality = Modality::Image;
  std::visit(EditApplier{world, out}, edit);
  return out;
}

double sample_quality_high(Rng& rng) { return rng.uniform(5.0, 10.0); }

double sample_quality_audio(Rng& rng) { return std::clamp(4.5 + 1.0 * rng.normal(), 1.0, 8.0); }

MultimodalAsset sample_scene(const ConceptWorld& world, Rng& rng, int min_concepts, int max_concepts,
                             Modality modality) {
  if (min_concepts < 1 || max_concepts < min_concepts || max_concepts > world.num_concepts()) {
    throw Error(ErrorCode::InsufficientConcepts, "cannot sample a scene with the requested concept count");
  }
  const int n = min_concepts + static_cast<int>(rng.index(static_cast<std::size_t>(max_concepts - min_concepts + 1)));
  MultimodalAsset a;
  a.modality = modality;
  while (static_cast<int>(a.concepts.size()) < n) {
    const auto id = static_cast<ConceptId>(rng.index(static_cast<std::size_t>(world.num_concepts())));
    if (std::none_of(a.concepts.begin(), a.concepts.end(), [id](const ConceptWeight& c) { return c.id == id; })) {
      a.concepts.push_back({id, rng.uniform(0.3, 1.0)});
    }
  }
  a.style = rng.uniform(-1.0, 1.0);
  a.quality = modality == Modality::Audio ? sample_quality_audio(rng) : sample_quality_high(rng);
  return a;
}

}  // namespace mmedit
