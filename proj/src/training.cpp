#include "mmedit/training.hpp"

#include <cmath>
#include <sstream>

namespace mmedit {

std::string_view to_string(TrainTarget t) {
  switch (t) {
    case TrainTarget::Prior: return "prior";
    case TrainTarget::Diffusion: return "diffusion";
    case TrainTarget::LmStage1: return "lm-stage1";
    case TrainTarget::LmStage2: return "lm-stage2";
  }
  return "?";
}

TrainTarget parse_train_target(std::string_view s) {
  for (auto t : {TrainTarget::Prior, TrainTarget::Diffusion, TrainTarget::LmStage1, TrainTarget::LmStage2}) {
    if (to_string(t) == s) return t;
  }
  throw Error(ErrorCode::InvalidArgument, "unknown training target '" + std::string(s) + "'");
}

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw Error(ErrorCode::InvalidArgument, "lr must be positive");
  if (batch < 1) throw Error(ErrorCode::InvalidArgument, "batch must be positive");
  if (steps < 1) throw Error(ErrorCode::InvalidArgument, "steps must be positive");
}

TrainConfig standard_config(TrainTarget target) {
  TrainConfig c;
  c.target = target;
  switch (target) {
    case TrainTarget::Prior: c.steps = 2000; c.batch = 32; break;
    case TrainTarget::Diffusion: c.steps = 3000; c.batch = 32; break;
    case TrainTarget::LmStage1:
    case TrainTarget::LmStage2: c.steps = 1500; c.batch = 16; break;
  }
  return c;
}

std::string LossCurve::to_text() const {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t i = 0; i < losses.size(); ++i) os << i + 1 << ',' << losses[i] << '\n';
  return os.str();
}

namespace {

nn::Optimizer make_optimizer(const TrainConfig& config, const nn::ParamList& params) {
  nn::OptimizerConfig oc;
  oc.kind = config.optimizer;
  oc.lr = config.lr;
  return nn::Optimizer(oc, params);
}

Modality other_modality(Modality target, Rng& rng) {
  Modality pick[2];
  int n = 0;
  for (Modality m : kAllModalities)
    if (m != target) pick[n++] = m;
  return pick[rng.index(2)];
}

}  // namespace

std::vector<PriorSample> sample_prior_batch(const ConceptWorld& world, int batch, Rng& rng) {
  std::vector<PriorSample> out;
  out.reserve(static_cast<std::size_t>(batch));
  for (int i = 0; i < batch; ++i) {
    const bool noise = rng.bernoulli(kPriorNoiseFraction);
    const Modality target = rng.bernoulli(kPriorImageTargetFraction) ? Modality::Image : Modality::Audio;
    const MultimodalAsset scene = sample_scene(world, rng, 1, 4, target);
    const Embedding clean = encode_asset(world, scene);
    PriorSample s;
    s.clean = clean.vec;
    s.f = scene.quality;
    s.target = target;
    if (noise) {
      s.corrupted = corrupt(clean, GaussianNoise{rng.uniform(kPriorSigmaMin, kPriorSigmaMax)}, rng).vec;
    } else {
      s.corrupted = encode_asset(world, scene.as(other_modality(target, rng))).vec;
    }
    out.push_back(std::move(s));
  }
  return out;
}

LossCurve train_prior(const ConceptWorld& world, PriorModel& model, const TrainConfig& config) {
  config.validate();
  Rng rng(mix_seed(config.seed, 0x9a10));
  const nn::ParamList params = model.params();
  nn::Optimizer opt = make_optimizer(config, params);
  LossCurve curve;
  for (int step = 0; step < config.steps; ++step) {
    const auto batch = sample_prior_batch(world, config.batch, rng);
    curve.losses.push_back(prior_train_step(model, batch, opt));
  }
  return curve;
}

std::vector<DiffusionExample> sample_diffusion_batch(const ConceptWorld& world, const SceneLatentMap& latent_map,
                                                     int batch, Rng& rng, const CondAugment& augment) {
  std::vector<DiffusionExample> out;
  out.reserve(static_cast<std::size_t>(batch));
  for (int i = 0; i < batch; ++i) {
    const MultimodalAsset scene = sample_scene(world, rng, 1, 4, Modality::Image);
    Embedding cond = encode_asset(world, scene);
    if (augment.fraction > 0.0 && rng.bernoulli(augment.fraction)) {
      cond = corrupt(cond, GaussianNoise{rng.uniform(0.0, augment.sigma_max)}, rng);
    }
    out.push_back({latent_map.ground_truth(world, scene), std::move(cond)});
  }
  return out;
}

LossCurve train_diffusion(const ConceptWorld& world, Denoiser& model, const SceneLatentMap& latent_map,
                          const NoiseSchedule& sched, const TrainConfig& config, const CondAugment& augment) {
  config.validate();
  Rng rng(mix_seed(config.seed, 0xd1ff));
  const nn::ParamList params = model.params();
  nn::Optimizer opt = make_optimizer(config, params);
  LossCurve curve;
  for (int step = 0; step < config.steps; ++step) {
    const auto batch = sample_diffusion_batch(world, latent_map, config.batch, rng, augment);
    curve.losses.push_back(diffusion_train_step(model, batch, opt, sched, rng));
  }
  return curve;
}

LmExample make_lm_example(const ConceptWorld& world, const Vocabulary& vocab, const InstructionRecord& record,
                          const PriorModel& prior, int stage, double f) {
  if (stage != 1 && stage != 2) throw Error(ErrorCode::InvalidArgument, "LM stage must be 1 or 2");
  TokenizedInstruction tok = tokenize_instruction(prompt_text(world, record), vocab);
  LmExample ex;
  ex.ids = std::move(tok.ids);
  ex.slots = std::move(tok.slots);
  ex.response_start = append_response(ex.ids, vocab);
  ex.inputs = slot_embeddings(world, record, &prior, f);
  ex.target_base = encode_asset(world, record.base_slot().asset);
  if (stage == 1) {
    const Embedding caption = encode_asset(world, record.oracle_target.as(Modality::Text));
    ex.target_gen = translate_modality(prior, caption, f, Modality::Image).normalized_copy();
    ex.target_gen.modality = Modality::Image;
  } else {
    if (!record.pseudo_target_embedding) {
      throw Error(ErrorCode::MalformedRecord, "record " + std::to_string(record.id) + " has no pseudo target");
    }
    ex.target_gen = *record.pseudo_target_embedding;
  }
  return ex;
}

std::size_t attach_pseudo_targets(const ConceptWorld& world, std::vector<InstructionRecord>& records,
                                  const Denoiser& diffusion, const SceneLatentMap& latent_map,
                                  const NoiseSchedule& sched, int steps) {
  std::size_t low = 0;
  for (auto& r : records) {
    if (!r.pseudo_target_embedding) {
      PseudoTarget pt = synth_pseudo_target(world, r, diffusion, latent_map, sched, steps);
      r.pseudo_target_embedding = std::move(pt.embedding);
      r.pseudo_low_fidelity = pt.low_fidelity;
    }
    low += r.pseudo_low_fidelity ? 1 : 0;
  }
  return low;
}

std::vector<LmExample> build_lm_examples(const ConceptWorld& world, const Vocabulary& vocab,
                                         std::span<const InstructionRecord> records, const PriorModel& prior,
                                         int stage) {
  bool any_good = false;
  for (const auto& r : records) any_good = any_good || !r.pseudo_low_fidelity;
  std::vector<LmExample> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    if (stage == 2 && any_good && r.pseudo_low_fidelity) continue;
    out.push_back(make_lm_example(world, vocab, r, prior, stage));
  }
  return out;
}

LossCurve train_lm(LmModel& model, std::span<const LmExample> examples, const TrainConfig& config, int stage) {
  config.validate();
  if (examples.empty()) throw Error(ErrorCode::EmptyCorpus, "no LM training examples");
  model.set_frozen_backbone(stage == 1);
  Rng rng(mix_seed(config.seed, 0x11a0 + static_cast<std::uint64_t>(stage)));
  const nn::ParamList params = model.params();
  nn::Optimizer opt = make_optimizer(config, params);
  LossCurve curve;
  std::vector<LmExample> batch;
  for (int step = 0; step < config.steps; ++step) {
    batch.clear();
    for (int i = 0; i < config.batch; ++i) batch.push_back(examples[rng.index(examples.size())]);
    curve.losses.push_back(llm_train_step(model, batch, opt, stage).total);
  }
  return curve;
}

LossCurve train_lm(LmModel& model, const ConceptWorld& world, std::span<const InstructionRecord> records,
                   const PriorModel& prior, const TrainConfig& config, int stage, const LmAugment& augment) {
  const bool replay = !augment.replay.empty() && augment.replay_fraction > 0.0;
  if (!augment.resample_modalities && !replay) {
    return train_lm(model, build_lm_examples(world, model.vocab(), records, prior, stage), config, stage);
  }
  config.validate();
  if (!(augment.replay_fraction >= 0.0 && augment.replay_fraction <= 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "replay fraction must lie in [0, 1]");
  }
  bool any_good = false;
  for (const auto& r : records) any_good = any_good || !r.pseudo_low_fidelity;
  std::vector<const InstructionRecord*> pool;
  for (const auto& r : records) {
    if (stage == 2 && any_good && r.pseudo_low_fidelity) continue;
    pool.push_back(&r);
  }
  if (pool.empty()) throw Error(ErrorCode::EmptyCorpus, "no LM training examples");
  model.set_frozen_backbone(stage == 1);
  Rng rng(mix_seed(config.seed, 0x11a0 + static_cast<std::uint64_t>(stage)));
  const nn::ParamList params = model.params();
  nn::Optimizer opt = make_optimizer(config, params);
  LossCurve curve;
  std::vector<LmExample> batch;
  for (int step = 0; step < config.steps; ++step) {
    batch.clear();
    for (int i = 0; i < config.batch; ++i) {
      if (replay && rng.bernoulli(augment.replay_fraction)) {
        InstructionRecord r = augment.replay[rng.index(augment.replay.size())];
        if (augment.resample_modalities) assign_slot_modalities(r, rng.uniform(), rng);
        batch.push_back(make_lm_example(world, model.vocab(), r, prior, 1));
        continue;
      }
      InstructionRecord r = *pool[rng.index(pool.size())];
      if (augment.resample_modalities) {
        assign_slot_modalities(r, rng.uniform(), rng);
        r = finetune_view(r);
      }
      batch.push_back(make_lm_example(world, model.vocab(), r, prior, stage));
    }
    curve.losses.push_back(llm_train_step(model, batch, opt, stage).total);
  }
  return curve;
}

}  // namespace mmedit
