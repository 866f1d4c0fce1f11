#include "mmedit/checkpoint.hpp"

#include "mmedit/io.hpp"
#include "mmedit/mm_inst_synth.hpp"

#include <cmath>

namespace mmedit {

namespace {

constexpr std::string_view kMagic = "IA2P";
constexpr std::string_view kSectionOrder[] = {"WORLD", "LM", "PRIOR", "DIFF"};

// Section names are stored as a u8 length plus ASCII bytes.
void write_name(io::ByteWriter& w, std::string_view name) {
  const auto n = static_cast<std::uint8_t>(name.size());
  w.bytes(std::span(&n, 1));
  w.bytes(std::span(reinterpret_cast<const std::uint8_t*>(name.data()), name.size()));
}

std::string read_name(io::ByteReader& r) {
  const std::uint8_t n = r.bytes(1)[0];
  const auto b = r.bytes(n);
  return std::string(b.begin(), b.end());
}

// f64 payload: header values, then every parameter row-major in declared order.
class Payload {
 public:
  void put(double v) { w_.f64(v); }
  void put_u64(std::uint64_t v) {
    put(static_cast<double>(v >> 32));
    put(static_cast<double>(v & 0xffffffffULL));
  }
  void put(const Mat& m) {
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = 0; j < m.cols(); ++j) w_.f64(m(i, j));
  }
  void put(const nn::ParamList& params) {
    for (const auto* p : params) put(p->value);
  }
  std::vector<std::uint8_t> take() { return w_.take(); }

 private:
  io::ByteWriter w_;
};

class PayloadReader {
 public:
  explicit PayloadReader(std::span<const std::uint8_t> data, std::string section) : r_(data), section_(std::move(section)) {
    if (data.size() % 8 != 0) throw Error(ErrorCode::ShapeMismatch, section_ + " payload is not a whole number of f64");
  }
  double get() {
    if (r_.remaining() < 8) throw Error(ErrorCode::ShapeMismatch, section_ + " payload is too short");
    return r_.f64();
  }
  int get_int() {
    const double v = get();
    if (v != std::floor(v) || v < 0 || v > 1e9) throw Error(ErrorCode::ShapeMismatch, section_ + " header is corrupt");
    return static_cast<int>(v);
  }
  std::uint64_t get_u64() {
    const auto hi = static_cast<std::uint64_t>(get_int_wide());
    const auto lo = static_cast<std::uint64_t>(get_int_wide());
    return (hi << 32) | lo;
  }
  void get(Mat& m) {
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = 0; j < m.cols(); ++j) m(i, j) = get();
  }
  Mat get(Index rows, Index cols) {
    Mat m(rows, cols);
    get(m);
    return m;
  }
  void get(const nn::ParamList& params) {
    for (auto* p : params) get(p->value);
  }
  void finish() const {
    if (r_.remaining() != 0) throw Error(ErrorCode::ShapeMismatch, section_ + " payload has trailing values");
  }

 private:
  double get_int_wide() {
    const double v = get();
    if (v != std::floor(v) || v < 0 || v > 4294967295.0) throw Error(ErrorCode::ShapeMismatch, section_ + " header is corrupt");
    return v;
  }
  io::ByteReader r_;
  std::string section_;
};

// Param collection is non-const by design (it hands out mutable pointers);
// serialization only reads through them.
template <typename M>
nn::ParamList params_of(const M& model) {
  return const_cast<M&>(model).params();
}

std::vector<std::uint8_t> world_payload(const ConceptWorld& w) {
  Payload p;
  p.put_u64(w.seed());
  p.put(static_cast<double>(w.num_concepts()));
  p.put(static_cast<double>(w.concept_dim()));
  p.put(static_cast<double>(w.embed_dim()));
  p.put(w.gap());
  p.put(w.concept_table());
  p.put(w.projection());
  p.put(w.modality_offsets());
  p.put(Mat(w.style_direction().transpose()));
  return p.take();
}

ConceptWorld world_from(std::span<const std::uint8_t> data) {
  PayloadReader r(data, "WORLD");
  const std::uint64_t seed = r.get_u64();
  const int k = r.get_int();
  const int dc = r.get_int();
  const int de = r.get_int();
  const double gap = r.get();
  Mat concepts = r.get(k, dc);
  Mat projection = r.get(de, dc);
  Mat offsets = r.get(3, de);
  Mat style = r.get(1, de);
  r.finish();
  return ConceptWorld::from_tables(seed, gap, std::move(concepts), std::move(projection), std::move(offsets),
                                   style.row(0).transpose());
}

std::vector<std::uint8_t> lm_payload(const LmModel& m, int stage) {
  const LmConfig& c = m.config();
  Payload p;
  for (int v : {c.d_enc, c.d_model, c.layers, c.heads, c.max_len, c.proj_hidden}) p.put(static_cast<double>(v));
  p.put(c.init_std);
  p.put(static_cast<double>(m.vocab().size()));
  p.put_u64(m.vocab().fingerprint());
  p.put(static_cast<double>(stage));
  p.put(m.frozen_backbone() ? 1.0 : 0.0);
  p.put(params_of(m));
  return p.take();
}

std::vector<std::uint8_t> prior_payload(const PriorModel& m) {
  const PriorConfig& c = m.config();
  Payload p;
  for (int v : {c.d_enc, c.width, c.layers, c.heads}) p.put(static_cast<double>(v));
  p.put(c.init_std);
  p.put(params_of(m));
  return p.take();
}

std::vector<std::uint8_t> diff_payload(const Denoiser& m) {
  const DenoiserConfig& c = m.config();
  Payload p;
  for (int v : {c.d_z, c.d_enc, c.d_t, c.hidden}) p.put(static_cast<double>(v));
  p.put(params_of(m));
  return p.take();
}

void write_section(io::ByteWriter& w, std::string_view name, const std::vector<std::uint8_t>& payload) {
  write_name(w, name);
  w.u64(payload.size());
  w.bytes(payload);
  w.u32(io::crc32(payload));
}

struct RawSection {
  std::string name;
  std::span<const std::uint8_t> payload;
};

std::vector<RawSection> read_sections(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  if (bytes.size() < 4 || r.tag() != kMagic) throw Error(ErrorCode::BadMagic, "not a checkpoint (magic mismatch)");
  const std::uint16_t version = r.u16();
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::VersionUnsupported, "checkpoint version " + std::to_string(version));
  }
  const std::uint16_t count = r.u16();
  std::vector<RawSection> out;
  std::size_t order = 0;
  for (std::uint16_t i = 0; i < count; ++i) {
    RawSection s;
    s.name = read_name(r);
    while (order < std::size(kSectionOrder) && kSectionOrder[order] != s.name) ++order;
    if (order == std::size(kSectionOrder)) {
      throw Error(ErrorCode::ShapeMismatch, "unknown or out-of-order section '" + s.name + "'");
    }
    ++order;
    const std::uint64_t len = r.u64();
    if (len > r.remaining()) throw Error(ErrorCode::Io, "section " + s.name + " is truncated");
    s.payload = r.bytes(static_cast<std::size_t>(len));
    const std::uint32_t crc = r.u32();
    if (crc != io::crc32(s.payload)) throw Error(ErrorCode::CrcMismatch, "section " + s.name + " failed its CRC check");
    out.push_back(s);
  }
  if (r.remaining() != 0) throw Error(ErrorCode::Io, "trailing bytes after the last section");
  return out;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck) {
  if (ck.lm && !ck.world) throw Error(ErrorCode::MissingCheckpoint, "an LM section needs a WORLD section for its vocabulary");
  io::ByteWriter w;
  w.tag(kMagic);
  w.u16(kCheckpointVersion);
  const auto count = static_cast<std::uint16_t>(ck.world.has_value() + ck.lm.has_value() + ck.prior.has_value() +
                                                ck.diffusion.has_value());
  w.u16(count);
  if (ck.world) write_section(w, "WORLD", world_payload(*ck.world));
  if (ck.lm) write_section(w, "LM", lm_payload(*ck.lm, ck.lm_stage));
  if (ck.prior) write_section(w, "PRIOR", prior_payload(*ck.prior));
  if (ck.diffusion) write_section(w, "DIFF", diff_payload(*ck.diffusion));
  return w.take();
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  Checkpoint ck;
  for (const auto& s : read_sections(bytes)) {
    if (s.name == "WORLD") {
      ck.world = world_from(s.payload);
    } else if (s.name == "LM") {
      if (!ck.world) throw Error(ErrorCode::MissingCheckpoint, "LM section needs a WORLD section for its vocabulary");
      PayloadReader r(s.payload, "LM");
      LmConfig c;
      c.d_enc = r.get_int();
      c.d_model = r.get_int();
      c.layers = r.get_int();
      c.heads = r.get_int();
      c.max_len = r.get_int();
      c.proj_hidden = r.get_int();
      c.init_std = r.get();
      const int vocab_size = r.get_int();
      const std::uint64_t fp = r.get_u64();
      const Vocabulary vocab = instruction_vocabulary(*ck.world);
      if (vocab.size() != vocab_size || vocab.fingerprint() != fp) {
        throw Error(ErrorCode::ShapeMismatch, "LM vocabulary does not match the world's instruction vocabulary");
      }
      ck.lm_stage = r.get_int();
      const bool frozen = r.get() != 0.0;
      ck.lm.emplace(c, vocab, 0);
      r.get(ck.lm->params());
      r.finish();
      ck.lm->set_frozen_backbone(frozen);
    } else if (s.name == "PRIOR") {
      PayloadReader r(s.payload, "PRIOR");
      PriorConfig c;
      c.d_enc = r.get_int();
      c.width = r.get_int();
      c.layers = r.get_int();
      c.heads = r.get_int();
      c.init_std = r.get();
      ck.prior.emplace(c, 0);
      r.get(ck.prior->params());
      r.finish();
    } else if (s.name == "DIFF") {
      PayloadReader r(s.payload, "DIFF");
      DenoiserConfig c;
      c.d_z = r.get_int();
      c.d_enc = r.get_int();
      c.d_t = r.get_int();
      c.hidden = r.get_int();
      ck.diffusion.emplace(c, 0);
      r.get(ck.diffusion->params());
      r.finish();
    }
  }
  return ck;
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  io::write_file(path, serialize_checkpoint(ck));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error(ErrorCode::MissingCheckpoint, "checkpoint " + path.string() + " not found");
  return deserialize_checkpoint(io::read_file(path));
}

std::vector<SectionInfo> inspect_checkpoint(std::span<const std::uint8_t> bytes) {
  std::vector<SectionInfo> out;
  const Checkpoint ck = deserialize_checkpoint(bytes);
  for (const auto& s : read_sections(bytes)) {
    SectionInfo info{s.name, s.payload.size(), 0};
    if (s.name == "WORLD") {
      info.parameters = ck.world->concept_table().size() + ck.world->projection().size() +
                        ck.world->modality_offsets().size() + ck.world->style_direction().size();
    } else if (s.name == "LM") {
      info.parameters = nn::parameter_count(params_of(*ck.lm));
    } else if (s.name == "PRIOR") {
      info.parameters = nn::parameter_count(params_of(*ck.prior));
    } else if (s.name == "DIFF") {
      info.parameters = nn::parameter_count(params_of(*ck.diffusion));
    }
    out.push_back(info);
  }
  return out;
}

SceneLatentMap make_latent_map(const ConceptWorld& world, int d_z) {
  return SceneLatentMap(world, d_z, mix_seed(world.seed(), 0x1a7e47));
}

LatentRenderer make_renderer(const ConceptWorld& world, int d_z) {
  return LatentRenderer(d_z, 8, mix_seed(world.seed(), 0x4e4de4));
}

}  // namespace mmedit
