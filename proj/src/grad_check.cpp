#include "mmedit/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace mmedit {

double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

double GradCheckReport::max_rel_err() const {
  double m = 0.0;
  for (const auto& g : groups) m = std::max(m, g.max_rel_err);
  return m;
}

bool GradCheckReport::passed(double tol) const {
  return std::all_of(groups.begin(), groups.end(),
                     [tol](const GradGroupReport& g) { return g.max_rel_err < tol && g.analytic_zero; });
}

std::string GradCheckReport::to_text() const {
  std::ostringstream os;
  os.precision(3);
  for (const auto& g : groups) {
    os << g.name << " coords=" << g.coordinates << " max_rel_err=" << std::scientific << g.max_rel_err
       << std::defaultfloat;
    if (g.frozen) os << " frozen analytic_zero=" << (g.analytic_zero ? "yes" : "no");
    os << '\n';
  }
  return os.str();
}

GradCheckReport grad_check(const nn::ParamList& params, const std::function<double()>& loss,
                           const std::function<void()>& analytic, const GradCheckOptions& options) {
  for (const auto* p : params) {
    if (!all_finite(p->value)) throw Error(ErrorCode::NonFiniteLoss, "parameter " + p->name + " is not finite");
  }
  analytic();
  std::vector<Mat> grads;
  grads.reserve(params.size());
  for (const auto* p : params) grads.push_back(p->grad);

  Rng rng(options.seed);
  GradCheckReport report;
  for (std::size_t g = 0; g < params.size(); ++g) {
    nn::Param& p = *params[g];
    GradGroupReport group;
    group.name = p.name;
    group.frozen = p.frozen;
    const auto n = static_cast<std::size_t>(p.size());
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), 0);
    const auto want = static_cast<std::size_t>(options.coordinates_per_group);
    if (n > want) {
      // Partial Fisher-Yates: the first `want` entries become a uniform sample.
      for (std::size_t i = 0; i < want; ++i) std::swap(coords[i], coords[i + rng.index(n - i)]);
      coords.resize(want);
    }
    for (std::size_t c : coords) {
      double& v = p.value.data()[c];
      const double a = grads[g].data()[c];
      if (p.frozen || !p.row_trainable(static_cast<Index>(c) % p.value.rows())) {
        // Not trainable: the contract is an exact zero, not a match with the FD slope.
        if (a != 0.0) group.analytic_zero = false;
        ++group.coordinates;
        continue;
      }
      const double saved = v;
      v = saved + options.h;
      const double up = loss();
      v = saved - options.h;
      const double down = loss();
      v = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) throw Error(ErrorCode::NonFiniteLoss, "loss is not finite near " + p.name);
      const double numeric = (up - down) / (2.0 * options.h);
      group.max_rel_err = std::max(group.max_rel_err, relative_error(a, numeric));
      ++group.coordinates;
    }
    report.groups.push_back(std::move(group));
  }
  return report;
}

}  // namespace mmedit

// ---------------------------------------------------------------- suite

#include "mmedit/diffusion_decoder.hpp"
#include "mmedit/instruction_lm.hpp"
#include "mmedit/refinement_prior.hpp"

namespace mmedit {

namespace {

Embedding random_unit(Rng& rng, Index n) { return Embedding{l2_normalize(rng.normal_vec(n)), std::nullopt, true}; }

}  // namespace

GradCheckReport check_llm_gradients(bool frozen_backbone, std::uint64_t seed, const GradCheckOptions& options) {
  const Vocabulary vocab({"add", "to", "remove", "from", "the"});
  LmConfig cfg;
  cfg.d_enc = 8;
  cfg.d_model = 16;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.max_len = 16;
  cfg.proj_hidden = 12;
  cfg.init_std = 0.3;
  LmModel model(cfg, vocab, seed);
  model.set_frozen_backbone(frozen_backbone);

  Rng rng(mix_seed(seed, 1));
  std::vector<LmExample> batch;
  for (const char* text : {"add [image] to [audio]", "remove the [audio] from the [image]"}) {
    TokenizedInstruction tok = tokenize_instruction(text, vocab);
    LmExample ex;
    ex.ids = tok.ids;
    ex.slots = tok.slots;
    ex.response_start = append_response(ex.ids, vocab);
    for (std::size_t i = 0; i < tok.slots.size(); ++i) ex.inputs.push_back(random_unit(rng, cfg.d_enc));
    ex.target_base = random_unit(rng, cfg.d_enc);
    ex.target_gen = random_unit(rng, cfg.d_enc);
    batch.push_back(std::move(ex));
  }
  const nn::ParamList params = model.params();
  return grad_check(
      params, [&] { return llm_batch_loss(model, batch).total; }, [&] { llm_loss_and_grad(model, batch); }, options);
}

GradCheckReport check_prior_gradients(std::uint64_t seed, const GradCheckOptions& options) {
  PriorConfig cfg;
  cfg.d_enc = 8;
  cfg.width = 16;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.init_std = 0.3;
  PriorModel model(cfg, seed);
  Rng rng(mix_seed(seed, 2));
  std::vector<PriorSample> batch;
  const Modality targets[] = {Modality::Image, Modality::Audio, Modality::Text, Modality::Image};
  for (int i = 0; i < 4; ++i) {
    batch.push_back(PriorSample{random_unit(rng, cfg.d_enc).vec, random_unit(rng, cfg.d_enc).vec, rng.uniform(1.0, 10.0),
                                targets[i]});
  }
  const nn::ParamList params = model.params();
  return grad_check(
      params, [&] { return prior_batch_loss(model, batch); }, [&] { prior_loss_and_grad(model, batch); }, options);
}

GradCheckReport check_diffusion_gradients(std::uint64_t seed, const GradCheckOptions& options) {
  DenoiserConfig cfg;
  cfg.d_z = 8;
  cfg.d_enc = 8;
  cfg.d_t = 16;
  cfg.hidden = 32;
  Denoiser model(cfg, seed);
  const NoiseSchedule sched = NoiseSchedule::linear();
  Rng rng(mix_seed(seed, 3));
  std::vector<DiffusionSample> batch;
  for (int i = 0; i < 4; ++i) {
    const int t = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(sched.T)));
    batch.push_back(DiffusionSample{rng.normal_vec(cfg.d_z), random_unit(rng, cfg.d_enc).vec, t, rng.normal_vec(cfg.d_z)});
  }
  const nn::ParamList params = model.params();
  return grad_check(
      params, [&] { return diffusion_batch_loss(model, batch, sched); },
      [&] { diffusion_loss_and_grad(model, batch, sched); }, options);
}

}  // namespace mmedit
