#pragma once

#include "mmedit/diffusion_decoder.hpp"
#include "mmedit/instruction_lm.hpp"
#include "mmedit/refinement_prior.hpp"
#include "mmedit/unified_space.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mmedit {

inline constexpr std::uint16_t kCheckpointVersion = 1;

// Any subset of the four trained components. Sections are written in the
// fixed order WORLD, LM, PRIOR, DIFF.
struct Checkpoint {
  std::optional<ConceptWorld> world;
  std::optional<LmModel> lm;
  int lm_stage = 0;  // last completed LM training stage
  std::optional<PriorModel> prior;
  std::optional<Denoiser> diffusion;
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck);
// The LM section needs the WORLD section: its vocabulary is derived from the world.
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);  // MissingCheckpoint when absent

struct SectionInfo {
  std::string name;
  std::uint64_t bytes = 0;
  Index parameters = 0;  // f64 values after the section header
};

// Reads the section table and verifies every CRC.
std::vector<SectionInfo> inspect_checkpoint(std::span<const std::uint8_t> bytes);

// Fixed maps derived from the world seed.
SceneLatentMap make_latent_map(const ConceptWorld& world, int d_z = 32);
LatentRenderer make_renderer(const ConceptWorld& world, int d_z = 32);

}  // namespace mmedit
