#include "mmedit/checkpoint.hpp"
#include "mmedit/edit_pipeline.hpp"
#include "mmedit/mm_inst_synth.hpp"
#include "mmedit/training.hpp"

#include "expect_error.hpp"

#include <doctest.h>

#include <cmath>

using namespace mmedit;

namespace {

Embedding image_vec(std::initializer_list<double> v) {
  Vec x(static_cast<Index>(v.size()));
  Index i = 0;
  for (double d : v) x(i++) = d;
  return Embedding{x, Modality::Image, true};
}

Embedding random_unit(Rng& rng, int d) { return Embedding{l2_normalize(rng.normal_vec(d)), std::nullopt, true}; }

const PriorFn zero_prior = [](const Vec& h, double) { return Vec::Zero(h.size()).eval(); };

MultimodalAsset scene(std::initializer_list<ConceptId> ids, Modality m = Modality::Image) {
  MultimodalAsset a;
  for (ConceptId id : ids) a.concepts.push_back({id, 1.0});
  a.modality = m;
  a.quality = 6.5;
  return a;
}

// Untrained LM and prior around a standard-recipe denoiser. Enough for the
// stages whose outcome does not hinge on the LM.
struct Fixture {
  ConceptWorld world = ConceptWorld::generate(0);
  SceneLatentMap latent_map = make_latent_map(world);
  LatentRenderer renderer = make_renderer(world);
  NoiseSchedule sched = NoiseSchedule::linear();
  LmModel lm{LmConfig{}, instruction_vocabulary(world), 3};
  PriorModel prior{PriorConfig{}, 1};
  Denoiser diffusion{DenoiserConfig{}, mix_seed(0, 2)};

  Fixture() { train_diffusion(world, diffusion, latent_map, sched, standard_config(TrainTarget::Diffusion)); }
  PipelineModels models() const { return {world, lm, prior, diffusion, latent_map, renderer, sched}; }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

}  // namespace

TEST_CASE("retrieve_base picks the most similar image and breaks ties low") {
  std::vector<RetrievalCandidate> c{{0, image_vec({0, 1}), Modality::Image}, {1, image_vec({1, 0}), Modality::Image}};
  CHECK(retrieve_base(image_vec({1, 0}), c) == 1);

  std::vector<RetrievalCandidate> tie{{0, image_vec({1, 0}), Modality::Image},
                                      {1, image_vec({0, 1}), Modality::Image},
                                      {2, image_vec({1, 0}), Modality::Image}};
  CHECK(retrieve_base(image_vec({1, 0}), tie) == 0);

  std::vector<RetrievalCandidate> audio{{0, image_vec({1, 0}), Modality::Audio}};
  expect_error([&] { retrieve_base(image_vec({1, 0}), audio); }, ErrorCode::NoImageCandidate);
}

TEST_CASE("retrieval never picks a non-image candidate") {
  Rng rng(1);
  for (int trial = 0; trial < 500; ++trial) {
    const int n = 2 + static_cast<int>(rng.index(5));
    std::vector<RetrievalCandidate> c;
    bool any_image = false;
    for (int i = 0; i < n; ++i) {
      const Modality m = kAllModalities[rng.index(3)];
      any_image = any_image || m == Modality::Image;
      c.push_back({i, random_unit(rng, 8), m});
    }
    const Embedding h = random_unit(rng, 8);
    if (!any_image) {
      expect_error([&] { retrieve_base(h, c); }, ErrorCode::NoImageCandidate);
      continue;
    }
    const int k = retrieve_base(h, c);
    CHECK(c[static_cast<std::size_t>(k)].modality == Modality::Image);
    for (const auto& cand : c) {
      if (cand.modality == Modality::Image) CHECK(cosine(h.vec, c[k].embedding.vec) >= cosine(h.vec, cand.embedding.vec));
    }
  }
}

TEST_CASE("mix_latent endpoints") {
  Rng rng(2);
  const Vec z = rng.normal_vec(32);
  Rng a(9);
  CHECK(mix_latent(z, 1.0, a) == z);

  Rng b(9), b_ref(9);
  const Vec out = mix_latent(z, 0.0, b);
  const Vec eps = b_ref.normal_vec(32);
  CHECK((out - eps * (z.norm() / eps.norm())).norm() < 1e-12);
  CHECK(std::abs(out.norm() - z.norm()) < 1e-12);

  Rng c(3);
  CHECK(mix_latent(Vec::Zero(32), 0.4, c).norm() == 0.0);
}

TEST_CASE("mix_latent preserves the norm over random pairs") {
  Rng rng(4);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const Vec z = rng.normal_vec(32) * rng.uniform(0.1, 10.0);
    const Vec out = mix_latent(z, rng.uniform(), rng);
    worst = std::max(worst, std::abs(out.norm() - z.norm()));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("mix_condition analytic cases") {
  Rng rng(5);
  const Embedding h_gen = random_unit(rng, 64);
  const Embedding h_k = random_unit(rng, 64);
  CHECK((mix_condition(h_gen, h_k, 0.0, zero_prior, 6.5).vec - h_gen.vec).norm() < 1e-12);
  CHECK(cosine(mix_condition(h_gen, h_k, 100.0, zero_prior, 6.5).vec, h_k.vec) > 0.99);

  const Embedding neg{-h_gen.vec, std::nullopt, true};
  expect_error([&] { mix_condition(h_gen, neg, 1.0, zero_prior, 6.5); }, ErrorCode::ZeroVector);

  const PriorModel prior(PriorConfig{}, 5);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const Embedding out =
        mix_condition(random_unit(rng, 64), random_unit(rng, 64), rng.uniform(0.0, 5.0), prior, rng.uniform(1.0, 10.0));
    worst = std::max(worst, std::abs(out.vec.norm() - 1.0));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("controls are validated") {
  EditControls c;
  CHECK_NOTHROW(c.validate());
  c.alpha = 1.2;
  expect_error([&] { c.validate(); }, ErrorCode::InvalidArgument);
  c = {};
  c.beta = -0.1;
  expect_error([&] { c.validate(); }, ErrorCode::InvalidArgument);
  c = {};
  c.f = 11.0;
  expect_error([&] { c.validate(); }, ErrorCode::ScoreOutOfRange);
}

TEST_CASE("prepare_prompt resolves markers in order") {
  const Fixture& fx = fixture();
  const std::vector<MultimodalAsset> inputs{scene({4}, Modality::Audio), scene({1, 2})};
  const PreparedPrompt p = prepare_prompt(fx.world, fx.lm.vocab(), "add [audio] to [image]", inputs);
  REQUIRE(p.slots.size() == 2);
  CHECK(p.slots[0].modality == Modality::Audio);
  CHECK(p.slots[1].modality == Modality::Image);
  CHECK(p.input_indices == std::vector<int>{0, 1});
  CHECK(p.embeddings[1].vec == encode_asset(fx.world, inputs[1]).vec);
}

TEST_CASE("edit without image inputs fails at retrieval") {
  const Fixture& fx = fixture();
  EditRequest req;
  req.instruction = "add [audio] to [audio]";
  req.inputs = {scene({4}, Modality::Audio), scene({5}, Modality::Audio)};
  expect_error([&] { edit(req, fx.models()); }, ErrorCode::NoImageCandidate);
}

TEST_CASE("edit is deterministic and keeps its norm contracts") {
  const Fixture& fx = fixture();
  Rng rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    EditRequest req;
    req.instruction = "put [audio] into [image]";
    req.inputs = {scene({static_cast<ConceptId>(rng.index(64))}, Modality::Audio),
                  scene({static_cast<ConceptId>(rng.index(64)), static_cast<ConceptId>(rng.index(64))})};
    req.controls.alpha = rng.uniform();
    req.controls.beta = rng.uniform(0.0, 3.0);
    req.controls.seed = trial;
    const EditResult a = edit(req, fx.models());
    const EditResult b = edit(req, fx.models());
    CHECK(a.z_out == b.z_out);
    CHECK(a.h_gen_mixed.vec == b.h_gen_mixed.vec);
    CHECK(a.rendered == b.rendered);
    CHECK(std::abs(a.h_gen_mixed.vec.norm() - 1.0) < 1e-6);
    CHECK(std::abs(a.z_mixed.norm() - a.z_inverted.norm()) < 1e-6 * std::max(1.0, a.z_inverted.norm()));
    CHECK(a.base_index == 1);
    CHECK(a.rendered.rows() == 8);
  }
}

TEST_CASE("alpha 1 with beta 100 gives back the source") {
  const Fixture& fx = fixture();
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const MultimodalAsset source = sample_scene(fx.world, rng, 1, 3);
    EditResult r;
    EditControls c;
    c.alpha = 1.0;
    c.beta = 100.0;
    c.seed = trial;
    r.h_gen = Embedding{l2_normalize(rng.normal_vec(64)), std::nullopt, true};
    generate_from_source(source, c, fx.models(), r);
    CHECK(cosine(r.output_embedding.vec, encode_asset(fx.world, source).vec) > 0.99);
  }
}

TEST_CASE("edit report has one line per stage") {
  const Fixture& fx = fixture();
  EditRequest req;
  req.instruction = "add [audio] to [image]";
  req.inputs = {scene({4}, Modality::Audio), scene({1, 2})};
  const EditResult r = edit(req, fx.models());
  const std::string rep = edit_report(r, req.controls, fx.lm.vocab());
  for (const char* stage : {"lm ", "retrieve ", "invert ", "mix_latent ", "mix_condition ", "sample "}) {
    CHECK_MESSAGE(rep.find(stage) != std::string::npos, stage);
  }
}
