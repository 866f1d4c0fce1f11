#pragma once

#include "mmedit/nn.hpp"
#include "mmedit/unified_space.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace mmedit {

// Linear beta schedule. Vectors are indexed by t in [0, T]; entry 0 holds the
// boundary (beta 0, alpha_bar 1).
struct NoiseSchedule {
  int T = 0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  static NoiseSchedule linear(int T = 50, double beta_start = 1e-4, double beta_end = 0.02);
  double alpha_bar(int t) const;  // throws StepOutOfRange outside [0, T]
};

// sqrt(abar_t) z0 + sqrt(1 - abar_t) eps. t = 0 is the identity.
Vec forward_noise(const Vec& z0, int t, const Vec& eps, const NoiseSchedule& sched);

// Sinusoidal features of an integer step: [sin(t w_k), cos(t w_k)], w_k = 10000^(-k / (dim/2)).
RowVec time_embedding(int t, int dim);

struct DenoiserConfig {
  int d_z = 32;
  int d_enc = 64;
  int d_t = 16;
  int hidden = 256;
};

struct DenoiserCache {
  Mat x;
  Mat pre1, h1;
  Mat pre2, h2;
};

// eps-prediction perceptron on [z_t, cond, time features].
class Denoiser {
 public:
  Denoiser(const DenoiserConfig& config, std::uint64_t seed);

  const DenoiserConfig& config() const { return config_; }
  // Rows of z and cond are samples; t holds one step per row.
  Mat predict(const Mat& z, std::span<const int> t, const Mat& cond, DenoiserCache* cache = nullptr) const;
  Vec predict(const Vec& z, int t, const Vec& cond) const;
  void backward(const DenoiserCache& cache, const Mat& dout);

  // Declaration order: fc1, fc2, fc3.
  nn::ParamList params();
  Index parameter_count();

  nn::Linear fc1;
  nn::Linear fc2;
  nn::Linear fc3;

 private:
  DenoiserConfig config_;
};

// Any eps-predictor (trained model, test stubs).
using EpsilonFn = std::function<Vec(const Vec& z, int t, const Vec& cond)>;
EpsilonFn epsilon_fn(const Denoiser& model);

// || eps - denoiser(z_t, t, cond) ||^2
double diffusion_loss(const Denoiser& model, const Vec& z0, const Embedding& cond, int t, const Vec& eps,
                      const NoiseSchedule& sched);

struct DiffusionSample {
  Vec z0;
  Vec cond;
  int t = 1;
  Vec eps;
};

// Forward-only mean loss over explicit (t, eps) samples.
double diffusion_batch_loss(const Denoiser& model, std::span<const DiffusionSample> batch, const NoiseSchedule& sched);

// Mean loss over the batch with gradients in Param::grad.
double diffusion_loss_and_grad(Denoiser& model, std::span<const DiffusionSample> batch, const NoiseSchedule& sched);

struct DiffusionExample {
  Vec z0;
  Embedding cond;
};

// Draws t ~ U{1..T} and eps ~ N(0, I) per example from `rng`, then one
// optimizer step. Parameters are untouched when the loss is not finite.
double diffusion_train_step(Denoiser& model, std::span<const DiffusionExample> batch, nn::Optimizer& optimizer,
                            const NoiseSchedule& sched, Rng& rng);
double diffusion_train_step(Denoiser& model, std::span<const DiffusionSample> batch, nn::Optimizer& optimizer,
                            const NoiseSchedule& sched);

// Fixed-point passes per inversion step; 0 gives the plain single-pass inversion.
inline constexpr int kInversionRefineIters = 6;

// Deterministic DDIM (eta = 0) on the stride T / steps.
Vec ddim_sample(const EpsilonFn& eps, const Vec& z_T, const Vec& cond, const NoiseSchedule& sched, int steps);
Vec ddim_invert(const EpsilonFn& eps, const Vec& z0, const Vec& cond, const NoiseSchedule& sched, int steps,
                int refine_iters = kInversionRefineIters);
Vec ddim_sample(const Denoiser& model, const Vec& z_T, const Embedding& cond, const NoiseSchedule& sched, int steps);
Vec ddim_invert(const Denoiser& model, const Vec& z0, const Embedding& cond, const NoiseSchedule& sched, int steps,
                int refine_iters = kInversionRefineIters);

// Fixed linear map between encoder space and latent space. A = M U^T where U
// spans every encoder output and M has orthonormal columns, so the left
// inverse U M^T recovers an embedding from its latent exactly.
class SceneLatentMap {
 public:
  static constexpr double kJitter = 0.05;

  SceneLatentMap(const ConceptWorld& world, int d_z, std::uint64_t seed);

  int latent_dim() const { return static_cast<int>(a_.rows()); }
  const Mat& matrix() const { return a_; }
  const Mat& left_inverse() const { return a_pinv_; }

  Vec to_latent(const Vec& embedding) const;
  // A encode(asset) + jitter(asset).
  Vec ground_truth(const ConceptWorld& world, const MultimodalAsset& asset) const;
  // 0.05 times a unit direction that is a pure function of the asset's contents.
  Vec jitter(const MultimodalAsset& asset) const;
  // normalize(A^+ z), tagged Image.
  Embedding reencode(const Vec& z) const;

 private:
  std::uint64_t seed_ = 0;
  Mat a_;
  Mat a_pinv_;
};

std::uint64_t asset_key(const MultimodalAsset& asset);

// Seeded projection of a latent onto a G x G grayscale grid.
class LatentRenderer {
 public:
  LatentRenderer(int d_z, int grid, std::uint64_t seed);
  int grid() const { return grid_; }
  Mat render(const Vec& z) const;  // grid x grid

 private:
  int grid_ = 8;
  Mat r_;  // (grid * grid) x d_z
};

// Plain ASCII PGM (P2), min-max scaled to 0..255.
std::string to_pgm(const Mat& grid);

}  // namespace mmedit
