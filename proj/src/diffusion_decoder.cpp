#include "mmedit/diffusion_decoder.hpp"

#include "mmedit/io.hpp"

#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

namespace mmedit {

NoiseSchedule NoiseSchedule::linear(int T, double beta_start, double beta_end) {
  if (T < 1) throw Error(ErrorCode::InvalidArgument, "schedule needs T >= 1");
  if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end)) {
    throw Error(ErrorCode::InvalidArgument, "betas must satisfy 0 < start <= end < 1");
  }
  NoiseSchedule s;
  s.T = T;
  s.betas.assign(static_cast<std::size_t>(T) + 1, 0.0);
  s.alphas.assign(static_cast<std::size_t>(T) + 1, 1.0);
  s.alpha_bars.assign(static_cast<std::size_t>(T) + 1, 1.0);
  for (int t = 1; t <= T; ++t) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(T - 1);
    const auto i = static_cast<std::size_t>(t);
    s.betas[i] = beta_start + frac * (beta_end - beta_start);
    s.alphas[i] = 1.0 - s.betas[i];
    s.alpha_bars[i] = s.alpha_bars[i - 1] * s.alphas[i];
  }
  return s;
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t < 0 || t > T) throw Error(ErrorCode::StepOutOfRange, "step " + std::to_string(t) + " outside [0, " + std::to_string(T) + "]");
  return alpha_bars[static_cast<std::size_t>(t)];
}

Vec forward_noise(const Vec& z0, int t, const Vec& eps, const NoiseSchedule& sched) {
  if (z0.size() != eps.size()) throw Error(ErrorCode::ShapeMismatch, "noise and latent differ in size");
  const double ab = sched.alpha_bar(t);
  return std::sqrt(ab) * z0 + std::sqrt(1.0 - ab) * eps;
}

RowVec time_embedding(int t, int dim) {
  if (dim < 2 || dim % 2 != 0) throw Error(ErrorCode::InvalidArgument, "time embedding dimension must be even");
  const int half = dim / 2;
  RowVec out(dim);
  for (int k = 0; k < half; ++k) {
    const double w = std::pow(10000.0, -static_cast<double>(k) / half);
    out(k) = std::sin(t * w);
    out(half + k) = std::cos(t * w);
  }
  return out;
}

Denoiser::Denoiser(const DenoiserConfig& config, std::uint64_t seed) : config_(config) {
  Rng rng(seed);
  const int in = config.d_z + config.d_enc + config.d_t;
  fc1 = nn::Linear("diff.fc1", in, config.hidden, rng, 1.0 / std::sqrt(static_cast<double>(in)));
  fc2 = nn::Linear("diff.fc2", config.hidden, config.hidden, rng, 1.0 / std::sqrt(static_cast<double>(config.hidden)));
  fc3 = nn::Linear("diff.fc3", config.hidden, config.d_z, rng, 1.0 / std::sqrt(static_cast<double>(config.hidden)));
}

nn::ParamList Denoiser::params() {
  nn::ParamList out;
  fc1.collect(out);
  fc2.collect(out);
  fc3.collect(out);
  return out;
}

Index Denoiser::parameter_count() { return nn::parameter_count(params()); }

Mat Denoiser::predict(const Mat& z, std::span<const int> t, const Mat& cond, DenoiserCache* cache) const {
  if (z.cols() != config_.d_z || cond.cols() != config_.d_enc || z.rows() != cond.rows() ||
      static_cast<Index>(t.size()) != z.rows()) {
    throw Error(ErrorCode::ShapeMismatch, "denoiser inputs have inconsistent shapes");
  }
  Mat x(z.rows(), config_.d_z + config_.d_enc + config_.d_t);
  x.leftCols(config_.d_z) = z;
  x.middleCols(config_.d_z, config_.d_enc) = cond;
  for (Index i = 0; i < z.rows(); ++i) {
    x.row(i).tail(config_.d_t) = time_embedding(t[static_cast<std::size_t>(i)], config_.d_t);
  }
  Mat pre1 = fc1.forward(x);
  Mat h1 = nn::activate(nn::Activation::Silu, pre1);
  Mat pre2 = fc2.forward(h1);
  Mat h2 = nn::activate(nn::Activation::Silu, pre2);
  Mat out = fc3.forward(h2);
  if (cache != nullptr) *cache = DenoiserCache{std::move(x), std::move(pre1), std::move(h1), std::move(pre2), std::move(h2)};
  return out;
}

Vec Denoiser::predict(const Vec& z, int t, const Vec& cond) const {
  const int ts[] = {t};
  return predict(Mat(z.transpose()), ts, Mat(cond.transpose()), nullptr).row(0).transpose();
}

void Denoiser::backward(const DenoiserCache& cache, const Mat& dout) {
  const Mat dh2 = fc3.backward(cache.h2, dout);
  const Mat dpre2 = nn::activate_backward(nn::Activation::Silu, cache.pre2, dh2);
  const Mat dh1 = fc2.backward(cache.h1, dpre2);
  const Mat dpre1 = nn::activate_backward(nn::Activation::Silu, cache.pre1, dh1);
  fc1.backward(cache.x, dpre1);
}

EpsilonFn epsilon_fn(const Denoiser& model) {
  return [&model](const Vec& z, int t, const Vec& cond) { return model.predict(z, t, cond); };
}

namespace {

void check_cond(const Vec& cond, int d_enc) {
  if (cond.size() != d_enc) throw Error(ErrorCode::ShapeMismatch, "condition has dimension " + std::to_string(cond.size()));
}

}  // namespace

double diffusion_loss(const Denoiser& model, const Vec& z0, const Embedding& cond, int t, const Vec& eps,
                      const NoiseSchedule& sched) {
  if (t < 1 || t > sched.T) throw Error(ErrorCode::StepOutOfRange, "training step must lie in [1, T]");
  if (z0.size() != model.config().d_z) throw Error(ErrorCode::ShapeMismatch, "latent has dimension " + std::to_string(z0.size()));
  check_cond(cond.vec, model.config().d_enc);
  if (std::abs(cond.vec.norm() - 1.0) > 1e-6) throw Error(ErrorCode::InvalidArgument, "condition must be normalized");
  const Vec zt = forward_noise(z0, t, eps, sched);
  return (eps - model.predict(zt, t, cond.vec)).squaredNorm();
}

double diffusion_batch_loss(const Denoiser& model, std::span<const DiffusionSample> batch, const NoiseSchedule& sched) {
  if (batch.empty()) throw Error(ErrorCode::EmptyBatch, "diffusion batch is empty");
  double total = 0.0;
  for (const auto& s : batch) {
    if (s.t < 1 || s.t > sched.T) throw Error(ErrorCode::StepOutOfRange, "training step must lie in [1, T]");
    check_cond(s.cond, model.config().d_enc);
    const Vec zt = forward_noise(s.z0, s.t, s.eps, sched);
    total += (s.eps - model.predict(zt, s.t, s.cond)).squaredNorm();
  }
  return total / static_cast<double>(batch.size());
}

double diffusion_loss_and_grad(Denoiser& model, std::span<const DiffusionSample> batch, const NoiseSchedule& sched) {
  if (batch.empty()) throw Error(ErrorCode::EmptyBatch, "diffusion batch is empty");
  const auto b = static_cast<Index>(batch.size());
  const auto& cfg = model.config();
  Mat z(b, cfg.d_z);
  Mat cond(b, cfg.d_enc);
  Mat eps(b, cfg.d_z);
  std::vector<int> ts;
  for (Index i = 0; i < b; ++i) {
    const auto& s = batch[static_cast<std::size_t>(i)];
    if (s.t < 1 || s.t > sched.T) throw Error(ErrorCode::StepOutOfRange, "training step must lie in [1, T]");
    if (s.z0.size() != cfg.d_z || s.eps.size() != cfg.d_z) throw Error(ErrorCode::ShapeMismatch, "latent dimension");
    check_cond(s.cond, cfg.d_enc);
    z.row(i) = forward_noise(s.z0, s.t, s.eps, sched).transpose();
    cond.row(i) = s.cond.transpose();
    eps.row(i) = s.eps.transpose();
    ts.push_back(s.t);
  }
  nn::ParamList params = model.params();
  nn::zero_grads(params);
  DenoiserCache cache;
  const Mat pred = model.predict(z, ts, cond, &cache);
  const Mat diff = pred - eps;
  const double loss = diff.squaredNorm() / static_cast<double>(b);
  if (!std::isfinite(loss)) throw Error(ErrorCode::NonFiniteLoss, "diffusion loss is not finite");
  model.backward(cache, diff * (2.0 / static_cast<double>(b)));
  if (!nn::grads_finite(params)) {
    nn::zero_grads(params);
    throw Error(ErrorCode::NonFiniteLoss, "diffusion gradient is not finite");
  }
  return loss;
}

double diffusion_train_step(Denoiser& model, std::span<const DiffusionSample> batch, nn::Optimizer& optimizer,
                            const NoiseSchedule& sched) {
  const double loss = diffusion_loss_and_grad(model, batch, sched);
  optimizer.step(model.params());
  return loss;
}

double diffusion_train_step(Denoiser& model, std::span<const DiffusionExample> batch, nn::Optimizer& optimizer,
                            const NoiseSchedule& sched, Rng& rng) {
  if (batch.empty()) throw Error(ErrorCode::EmptyBatch, "diffusion batch is empty");
  std::vector<DiffusionSample> samples;
  samples.reserve(batch.size());
  for (const auto& ex : batch) {
    const int t = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(sched.T)));
    samples.push_back(DiffusionSample{ex.z0, ex.cond.vec, t, rng.normal_vec(ex.z0.size())});
  }
  return diffusion_train_step(model, std::span<const DiffusionSample>(samples), optimizer, sched);
}

namespace {

int ddim_stride(const NoiseSchedule& sched, int steps) {
  if (steps < 1 || steps > sched.T || sched.T % steps != 0) {
    throw Error(ErrorCode::StepOutOfRange, "steps=" + std::to_string(steps) + " must divide T=" + std::to_string(sched.T));
  }
  return sched.T / steps;
}

}  // namespace

Vec ddim_sample(const EpsilonFn& eps_fn, const Vec& z_T, const Vec& cond, const NoiseSchedule& sched, int steps) {
  const int stride = ddim_stride(sched, steps);
  Vec z = z_T;
  for (int t = sched.T; t > 0; t -= stride) {
    const int s = t - stride;
    const double ab_t = sched.alpha_bar(t);
    const double ab_s = sched.alpha_bar(s);
    const Vec e = eps_fn(z, t, cond);
    const Vec z0_hat = (z - std::sqrt(1.0 - ab_t) * e) / std::sqrt(ab_t);
    z = std::sqrt(ab_s) * z0_hat + std::sqrt(1.0 - ab_s) * e;
  }
  return z;
}

// The reverse recursion first evaluates the predictor at the destination
// step t with the current (less noisy) latent. Each refinement pass then
// re-evaluates it at the candidate z_t, solving z_t = step(z_s, eps(z_t, t)),
// which is what the sampler's t -> s step undoes. A pass that does not shrink
// the fixed-point residual ends the refinement for that step.
Vec ddim_invert(const EpsilonFn& eps_fn, const Vec& z0, const Vec& cond, const NoiseSchedule& sched, int steps,
                int refine_iters) {
  const int stride = ddim_stride(sched, steps);
  if (refine_iters < 0) throw Error(ErrorCode::InvalidArgument, "refine_iters must be >= 0");
  Vec z = z0;
  for (int s = 0; s < sched.T; s += stride) {
    const int t = s + stride;
    const double ab_s = sched.alpha_bar(s);
    const double ab_t = sched.alpha_bar(t);
    const auto step = [&](const Vec& e) -> Vec {
      const Vec z0_hat = (z - std::sqrt(1.0 - ab_s) * e) / std::sqrt(ab_s);
      return std::sqrt(ab_t) * z0_hat + std::sqrt(1.0 - ab_t) * e;
    };
    Vec z_t = step(eps_fn(z, t, cond));
    double residual = std::numeric_limits<double>::infinity();
    for (int i = 0; i < refine_iters; ++i) {
      Vec next = step(eps_fn(z_t, t, cond));
      const double r = (next - z_t).norm();
      if (!(r < residual)) break;
      residual = r;
      z_t = std::move(next);
      if (r == 0.0) break;
    }
    z = std::move(z_t);
  }
  return z;
}

Vec ddim_sample(const Denoiser& model, const Vec& z_T, const Embedding& cond, const NoiseSchedule& sched, int steps) {
  check_cond(cond.vec, model.config().d_enc);
  return ddim_sample(epsilon_fn(model), z_T, cond.vec, sched, steps);
}

Vec ddim_invert(const Denoiser& model, const Vec& z0, const Embedding& cond, const NoiseSchedule& sched, int steps,
                int refine_iters) {
  check_cond(cond.vec, model.config().d_enc);
  return ddim_invert(epsilon_fn(model), z0, cond.vec, sched, steps, refine_iters);
}

std::uint64_t asset_key(const MultimodalAsset& asset) {
  io::ByteWriter w;
  w.u32(static_cast<std::uint32_t>(asset.concepts.size()));
  for (const auto& c : asset.concepts) {
    w.u32(c.id);
    w.f64(c.weight);
  }
  w.u32(static_cast<std::uint32_t>(asset.modality));
  w.f64(asset.style);
  w.f64(asset.quality);
  return io::fnv1a(w.data());
}

SceneLatentMap::SceneLatentMap(const ConceptWorld& world, int d_z, std::uint64_t seed) : seed_(seed) {
  const Mat u = world.basis();
  const Index r = u.cols();
  if (d_z < r) throw Error(ErrorCode::InvalidArgument, "latent dimension must be at least " + std::to_string(r));
  Rng rng(mix_seed(seed, 0x5ce1a7e));
  Mat g(d_z, r);
  for (Index i = 0; i < d_z; ++i)
    for (Index j = 0; j < r; ++j) g(i, j) = rng.normal();
  Eigen::HouseholderQR<Mat> qr(g);
  Mat m = qr.householderQ() * Mat::Identity(d_z, r);
  const Mat rr = qr.matrixQR().topRows(r).triangularView<Eigen::Upper>();
  for (Index j = 0; j < r; ++j)
    if (rr(j, j) < 0) m.col(j) *= -1.0;
  a_ = m * u.transpose();
  a_pinv_ = u * m.transpose();
}

Vec SceneLatentMap::to_latent(const Vec& embedding) const {
  if (embedding.size() != a_.cols()) throw Error(ErrorCode::DimensionMismatch, "embedding dimension for latent map");
  return a_ * embedding;
}

Vec SceneLatentMap::jitter(const MultimodalAsset& asset) const {
  Rng rng(mix_seed(seed_, asset_key(asset)));
  return kJitter * l2_normalize(rng.normal_vec(a_.rows()));
}

Vec SceneLatentMap::ground_truth(const ConceptWorld& world, const MultimodalAsset& asset) const {
  return to_latent(encode_asset(world, asset).vec) + jitter(asset);
}

Embedding SceneLatentMap::reencode(const Vec& z) const {
  if (z.size() != a_.rows()) throw Error(ErrorCode::ShapeMismatch, "latent has dimension " + std::to_string(z.size()));
  return Embedding{l2_normalize(a_pinv_ * z), Modality::Image, true};
}

LatentRenderer::LatentRenderer(int d_z, int grid, std::uint64_t seed) : grid_(grid) {
  if (grid < 1 || d_z < 1) throw Error(ErrorCode::InvalidArgument, "renderer needs positive sizes");
  Rng rng(mix_seed(seed, 0x9e4de7));
  r_.resize(static_cast<Index>(grid) * grid, d_z);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_z));
  for (Index i = 0; i < r_.rows(); ++i)
    for (Index j = 0; j < r_.cols(); ++j) r_(i, j) = scale * rng.normal();
}

Mat LatentRenderer::render(const Vec& z) const {
  if (z.size() != r_.cols()) throw Error(ErrorCode::ShapeMismatch, "latent has dimension " + std::to_string(z.size()));
  const Vec flat = r_ * z;
  Mat out(grid_, grid_);
  for (int i = 0; i < grid_; ++i)
    for (int j = 0; j < grid_; ++j) out(i, j) = flat(static_cast<Index>(i) * grid_ + j);
  return out;
}

std::string to_pgm(const Mat& grid) {
  const double lo = grid.minCoeff();
  const double hi = grid.maxCoeff();
  const double span = hi - lo;
  std::ostringstream os;
  os << "P2\n" << grid.cols() << ' ' << grid.rows() << "\n255\n";
  for (Index i = 0; i < grid.rows(); ++i) {
    for (Index j = 0; j < grid.cols(); ++j) {
      const int v = span > 0.0 ? static_cast<int>(std::lround(255.0 * (grid(i, j) - lo) / span)) : 0;
      os << v << (j + 1 == grid.cols() ? '\n' : ' ');
    }
  }
  return os.str();
}

}  // namespace mmedit
