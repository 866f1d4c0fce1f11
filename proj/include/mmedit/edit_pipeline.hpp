#pragma once

#include "mmedit/diffusion_decoder.hpp"
#include "mmedit/instruction_lm.hpp"
#include "mmedit/refinement_prior.hpp"
#include "mmedit/unified_space.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace mmedit {

struct EditControls {
  double alpha = 0.6;  // latent mixing: 1 keeps the inverted source latent
  double beta = 0.3;   // weight of the source embedding in the condition
  double f = kDefaultAestheticScore;
  int steps = 50;
  std::uint64_t seed = 0;

  void validate() const;  // InvalidArgument / ScoreOutOfRange
};

// The instruction marks inputs with [image], [audio] or [slot] (resolved from
// the input's modality); a Text input is spliced in as its caption.
struct EditRequest {
  std::string instruction;
  std::vector<MultimodalAsset> inputs;
  EditControls controls;
};

// Trained components plus the fixed maps; all referenced, never copied.
struct PipelineModels {
  const ConceptWorld& world;
  const LmModel& lm;
  const PriorModel& prior;
  const Denoiser& diffusion;
  const SceneLatentMap& latent_map;
  const LatentRenderer& renderer;
  const NoiseSchedule& sched;
};

struct EditResult {
  std::vector<int> decoded_ids;
  bool decode_fallback = false;  // the LM did not emit [base]/[gen]; the response template was appended
  int base_index = -1;
  Embedding h_base;
  Embedding h_gen;
  Embedding h_gen_mixed;
  Vec z_source;
  Vec z_inverted;
  Vec z_mixed;
  Vec z_out;
  Embedding output_embedding;  // re-encoding of z_out
  Mat rendered;
};

struct RetrievalCandidate {
  int index = 0;
  Embedding embedding;
  Modality modality = Modality::Image;
};

// Argmax cosine over Image candidates; ties go to the lowest index.
int retrieve_base(const Embedding& h_base, std::span<const RetrievalCandidate> candidates);

// z' = alpha z + (1 - alpha) eps, rescaled to ||z||. alpha = 1 returns z untouched.
Vec mix_latent(const Vec& z, double alpha, Rng& rng);

using PriorFn = std::function<Vec(const Vec& h, double f)>;

// normalize(prior(h_gen, f) + h_gen + beta h_k)
Embedding mix_condition(const Embedding& h_gen, const Embedding& h_k, double beta, const PriorFn& prior, double f);
Embedding mix_condition(const Embedding& h_gen, const Embedding& h_k, double beta, const PriorModel& prior, double f);

struct PreparedPrompt {
  std::vector<int> ids;
  std::vector<SlotRef> slots;
  std::vector<Embedding> embeddings;      // one per slot, in order
  std::vector<MultimodalAsset> assets;    // the asset behind each slot, tagged with its presented modality
  std::vector<int> input_indices;         // request input index of each slot
};

// Resolves markers and encodes the non-text inputs.
PreparedPrompt prepare_prompt(const ConceptWorld& world, const Vocabulary& vocab, std::string_view instruction,
                              std::span<const MultimodalAsset> inputs);

EditResult edit(const EditRequest& request, const PipelineModels& models);

// Everything after tokenization. Retrieval runs over the prompt's slots and
// reports the request input index of the chosen one.
EditResult run_edit(const PreparedPrompt& prompt, const EditControls& controls, const PipelineModels& models);

// Stages after the LM: used by edit() and by evaluation when the base is
// already known. `source` is input k.
void generate_from_source(const MultimodalAsset& source, const EditControls& controls, const PipelineModels& models,
                          EditResult& result);

// One "stage key=value ..." line per stage.
std::string edit_report(const EditResult& result, const EditControls& controls, const Vocabulary& vocab);

}  // namespace mmedit
