#pragma once

#include "mmedit/nn.hpp"
#include "mmedit/unified_space.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <unordered_map>
#include <variant>
#include <vector>

namespace mmedit {

inline constexpr double kDefaultAestheticScore = 6.5;

// Registry of cross-modal twins used by the domain-shift corruption. Lookup
// is by exact bit pattern of the source vector.
class PairedLookup {
 public:
  // Registers a <-> b in both directions.
  void add(const Embedding& a, const Embedding& b);
  std::optional<Embedding> find(const Vec& source, Modality target) const;
  std::size_t size() const { return count_; }

 private:
  std::unordered_map<std::uint64_t, std::vector<std::pair<Vec, Embedding>>> table_;
  std::size_t count_ = 0;
};

struct GaussianNoise {
  double sigma = 0.0;
};

struct DomainShift {
  Modality from = Modality::Image;
  Modality to = Modality::Audio;
  const PairedLookup* pairs = nullptr;
};

using CorruptionSpec = std::variant<GaussianNoise, DomainShift>;

// GaussianNoise: normalize(e + sigma g). DomainShift: the registered twin of e
// in the `to` modality.
Embedding corrupt(const Embedding& e, const CorruptionSpec& spec, Rng& rng);

struct PriorConfig {
  int d_enc = 64;
  int width = 128;
  int layers = 2;
  int heads = 4;
  double init_std = 0.02;
};

// Decoder-only refinement transformer over [score, corrupted embedding,
// query] tokens. The query token is learned per target modality; the output
// is read from the query position.
class PriorModel {
 public:
  PriorModel(const PriorConfig& config, std::uint64_t seed);

  const PriorConfig& config() const { return config_; }
  // Declaration order: score_weight, score_bias, in_proj, queries, backbone, out_proj.
  nn::ParamList params();
  Index parameter_count();

  nn::Param score_weight;  // 1 x W
  nn::Param score_bias;    // 1 x W
  nn::Linear in_proj;      // D_enc -> W
  nn::Param queries;       // 3 x W, rows ordered Image, Audio, Text
  nn::Transformer backbone;
  nn::Linear out_proj;     // W -> D_enc

 private:
  PriorConfig config_;
};

double scaled_score(double f);  // (f - 5.5) / 4.5; throws ScoreOutOfRange outside [1, 10]

Embedding prior_forward(const PriorModel& model, const Embedding& corrupted, double f,
                        Modality target = Modality::Image);

// Batched forward: row i of `inputs` is refined with score f[i] toward target[i].
Mat prior_forward_batch(const PriorModel& model, const Mat& inputs, std::span<const double> f,
                        std::span<const Modality> targets);

// || clean - prior(corrupt(clean), f) ||^2
double prior_loss(const PriorModel& model, const Embedding& clean, const CorruptionSpec& spec, double f, Rng& rng,
                  Modality target = Modality::Image);

struct PriorExample {
  Embedding clean;
  CorruptionSpec spec;
  double f = kDefaultAestheticScore;
  Modality target = Modality::Image;
};

// A corruption already applied; the unit the gradient code works on.
struct PriorSample {
  Vec corrupted;
  Vec clean;
  double f = kDefaultAestheticScore;
  Modality target = Modality::Image;
};

// Forward-only mean loss over pre-corrupted samples.
double prior_batch_loss(const PriorModel& model, std::span<const PriorSample> batch);

// Mean squared-error loss over the batch with gradients in Param::grad.
double prior_loss_and_grad(PriorModel& model, std::span<const PriorSample> batch);

// Corrupts each example with `rng`, then takes one optimizer step on the mean
// loss. Throws EmptyBatch / NonFiniteLoss; parameters are untouched on error.
double prior_train_step(PriorModel& model, std::span<const PriorExample> batch, nn::Optimizer& optimizer, Rng& rng);
double prior_train_step(PriorModel& model, std::span<const PriorSample> batch, nn::Optimizer& optimizer);

// Treats `source` as a domain-shifted embedding and predicts its twin in `target`.
Embedding translate_modality(const PriorModel& model, const Embedding& source, double f,
                             Modality target = Modality::Image);

}  // namespace mmedit
