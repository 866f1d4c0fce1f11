#pragma once

#include "mmedit/diffusion_decoder.hpp"
#include "mmedit/instruction_lm.hpp"
#include "mmedit/mm_inst_synth.hpp"
#include "mmedit/nn.hpp"
#include "mmedit/refinement_prior.hpp"
#include "mmedit/unified_space.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mmedit {

enum class TrainTarget { Prior, Diffusion, LmStage1, LmStage2 };

std::string_view to_string(TrainTarget t);
TrainTarget parse_train_target(std::string_view s);

struct TrainConfig {
  TrainTarget target = TrainTarget::Prior;
  double lr = 1e-3;
  int batch = 32;
  int steps = 1000;
  std::uint64_t seed = 0;
  std::filesystem::path corpus;
  std::filesystem::path world;
  nn::OptimizerKind optimizer = nn::OptimizerKind::Adam;

  void validate() const;  // InvalidArgument on non-positive lr / batch / steps
};

// Step counts and batch sizes of the baseline recipe.
TrainConfig standard_config(TrainTarget target);

// One loss per step, in order.
struct LossCurve {
  std::vector<double> losses;
  std::string to_text() const;  // "step,loss" lines, step counted from 1
};

// Share of prior samples whose corruption is Gaussian noise; the rest are
// domain shifts from another modality's twin.
inline constexpr double kPriorNoiseFraction = 0.7;
inline constexpr double kPriorSigmaMin = 0.05;
inline constexpr double kPriorSigmaMax = 0.5;
inline constexpr double kPriorImageTargetFraction = 0.75;

// Fresh (corrupted, clean) pairs drawn from random 1-4 concept scenes.
std::vector<PriorSample> sample_prior_batch(const ConceptWorld& world, int batch, Rng& rng);
LossCurve train_prior(const ConceptWorld& world, PriorModel& model, const TrainConfig& config);

// A share of diffusion samples is trained under a noisy copy of its
// condition, sigma ~ U[0, sigma_max].
struct CondAugment {
  double fraction = 0.3;
  double sigma_max = 0.3;
};

std::vector<DiffusionExample> sample_diffusion_batch(const ConceptWorld& world, const SceneLatentMap& latent_map,
                                                     int batch, Rng& rng, const CondAugment& augment = {});
LossCurve train_diffusion(const ConceptWorld& world, Denoiser& model, const SceneLatentMap& latent_map,
                          const NoiseSchedule& sched, const TrainConfig& config, const CondAugment& augment = {});

// Teacher-forced LM sample for a record. Stage 1 supervises [gen] with the
// prior's Image translation of the target caption; stage 2 with the record's
// pseudo target.
LmExample make_lm_example(const ConceptWorld& world, const Vocabulary& vocab, const InstructionRecord& record,
                          const PriorModel& prior, int stage, double f = kDefaultAestheticScore);

// Fills missing pseudo targets; returns how many came out low-fidelity.
std::size_t attach_pseudo_targets(const ConceptWorld& world, std::vector<InstructionRecord>& records,
                                  const Denoiser& diffusion, const SceneLatentMap& latent_map,
                                  const NoiseSchedule& sched, int steps = 50);

// Stage 2 drops low-fidelity pseudo targets unless nothing else is left.
std::vector<LmExample> build_lm_examples(const ConceptWorld& world, const Vocabulary& vocab,
                                         std::span<const InstructionRecord> records, const PriorModel& prior,
                                         int stage);

LossCurve train_lm(LmModel& model, std::span<const LmExample> examples, const TrainConfig& config, int stage);

// With resample_modalities every draw re-presents the record's reference slots
// under a fresh assignment (non-text probability ~ U[0, 1]) before building
// the example. The small fine-tune set otherwise pins each reference to one
// presentation and the LM memorizes it.
//
// replay_fraction of the draws come from `replay` (pretrain records, stage-1
// targets) instead; it keeps stage 2 from overfitting the fine-tune set.
struct LmAugment {
  bool resample_modalities = false;
  std::span<const InstructionRecord> replay;
  double replay_fraction = 0.0;
};

inline constexpr double kStandardReplayFraction = 0.6;

LossCurve train_lm(LmModel& model, const ConceptWorld& world, std::span<const InstructionRecord> records,
                   const PriorModel& prior, const TrainConfig& config, int stage, const LmAugment& augment = {});

}  // namespace mmedit
