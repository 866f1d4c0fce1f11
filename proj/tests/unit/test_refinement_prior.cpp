#include "mmedit/refinement_prior.hpp"
#include "mmedit/training.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace mmedit;

namespace {

const ConceptWorld& world() {
  static const ConceptWorld w = ConceptWorld::generate(0);
  return w;
}

Embedding unit(Rng& rng, int d) { return Embedding{l2_normalize(rng.normal_vec(d)), Modality::Image, true}; }

MultimodalAsset single(ConceptId id, Modality m) {
  MultimodalAsset a;
  a.concepts = {{id, 1.0}};
  a.modality = m;
  a.quality = 6.5;
  return a;
}

// Fraction of concepts whose translated text embedding lands nearest to its own image embedding.
double translation_accuracy(const ConceptWorld& w, const PriorModel& prior) {
  int hits = 0;
  for (int c = 0; c < w.num_concepts(); ++c) {
    const Embedding t = translate_modality(prior, encode_asset(w, single(c, Modality::Text)), 6.5, Modality::Image);
    int best = -1;
    double best_cos = -2.0;
    for (int d = 0; d < w.num_concepts(); ++d) {
      const double cs = cosine(t.vec, encode_asset(w, single(d, Modality::Image)).vec);
      if (cs > best_cos) {
        best_cos = cs;
        best = d;
      }
    }
    hits += best == c ? 1 : 0;
  }
  return static_cast<double>(hits) / w.num_concepts();
}

const PriorModel& trained_prior() {
  static const PriorModel model = [] {
    PriorModel m(PriorConfig{}, 1);
    TrainConfig c = standard_config(TrainTarget::Prior);
    c.steps = 500;
    train_prior(world(), m, c);
    return m;
  }();
  return model;
}

}  // namespace

TEST_CASE("gaussian corruption with sigma 0 is the identity") {
  Rng rng(1);
  const Embedding e = unit(rng, 64);
  const Embedding c = corrupt(e, GaussianNoise{0.0}, rng);
  CHECK((c.vec - e.vec).norm() < 1e-12);
}

TEST_CASE("gaussian corruption distance matches an independent Monte-Carlo estimate") {
  Rng rng(2);
  const Embedding e = unit(rng, 64);
  const int n = 10000;
  double sum = 0.0, sum_sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double d = (corrupt(e, GaussianNoise{0.3}, rng).vec - e.vec).squaredNorm();
    sum += d;
    sum_sq += d * d;
  }
  const double mean = sum / n;
  const double se = std::sqrt((sum_sq / n - mean * mean) / n);

  std::mt19937_64 gen(77);
  std::normal_distribution<double> normal;
  double ref = 0.0, ref_sq = 0.0;
  for (int i = 0; i < n; ++i) {
    Vec v = e.vec;
    for (Index k = 0; k < v.size(); ++k) v(k) += 0.3 * normal(gen);
    const double d = (v / v.norm() - e.vec).squaredNorm();
    ref += d;
    ref_sq += d * d;
  }
  const double ref_mean = ref / n;
  const double ref_se = std::sqrt((ref_sq / n - ref_mean * ref_mean) / n);
  CHECK(std::abs(mean - ref_mean) < 3.0 * std::hypot(se, ref_se));
}

TEST_CASE("domain shift returns the registered twin") {
  const ConceptWorld& w = world();
  Rng rng(3);
  const MultimodalAsset img = sample_scene(w, rng, 1, 3, Modality::Image);
  const Embedding ei = encode_asset(w, img);
  const Embedding ea = encode_asset(w, img.as(Modality::Audio));
  PairedLookup pairs;
  pairs.add(ei, ea);
  const Embedding shifted = corrupt(ei, DomainShift{Modality::Image, Modality::Audio, &pairs}, rng);
  CHECK(shifted.vec == ea.vec);
  CHECK(shifted.modality == Modality::Audio);
  const Embedding back = corrupt(ea, DomainShift{Modality::Audio, Modality::Image, &pairs}, rng);
  CHECK(back.vec == ei.vec);

  try {
    corrupt(unit(rng, 64), DomainShift{Modality::Image, Modality::Audio, &pairs}, rng);
    FAIL("expected MissingPair");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MissingPair);
  }
}

TEST_CASE("prior_forward validates the score and is deterministic") {
  PriorModel model(PriorConfig{}, 4);
  Rng rng(4);
  const Embedding e = unit(rng, 64);
  try {
    prior_forward(model, e, 11.0);
    FAIL("expected ScoreOutOfRange");
  } catch (const Error& err) {
    CHECK(err.code() == ErrorCode::ScoreOutOfRange);
  }
  CHECK_THROWS_AS(prior_forward(model, e, 0.5), Error);
  CHECK(prior_forward(model, e, 6.5).vec == prior_forward(model, e, 6.5).vec);
  CHECK(prior_forward(model, e, 6.5).vec.size() == 64);
  CHECK(scaled_score(5.5) == 0.0);
  CHECK(scaled_score(10.0) == 1.0);
}

TEST_CASE("batched forward matches single forwards") {
  PriorModel model(PriorConfig{}, 5);
  Rng rng(5);
  Mat inputs(4, 64);
  std::vector<double> f{1.0, 4.5, 6.5, 10.0};
  std::vector<Modality> t{Modality::Image, Modality::Audio, Modality::Text, Modality::Image};
  for (int i = 0; i < 4; ++i) inputs.row(i) = unit(rng, 64).vec.transpose();
  const Mat out = prior_forward_batch(model, inputs, f, t);
  for (int i = 0; i < 4; ++i) {
    const Vec single_out = prior_forward(model, Embedding::raw(inputs.row(i).transpose()), f[i], t[i]).vec;
    CHECK((out.row(i).transpose() - single_out).norm() < 1e-12);
  }
}

TEST_CASE("prior_loss analytic cases") {
  PriorModel model(PriorConfig{}, 6);
  Rng rng(6);
  const Embedding clean = unit(rng, 64);
  // A zero output weight makes the model emit its bias exactly.
  model.out_proj.weight.value.setZero();
  model.out_proj.bias.value = clean.vec.transpose();
  CHECK(prior_loss(model, clean, GaussianNoise{0.0}, 6.5, rng) == 0.0);
  Vec e1 = Vec::Zero(64);
  e1(0) = 1.0;
  model.out_proj.bias.value = (clean.vec + e1).transpose();
  CHECK(prior_loss(model, clean, GaussianNoise{0.2}, 6.5, rng) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("identical samples give the single-sample loss and empty batches are rejected") {
  PriorModel model(PriorConfig{}, 7);
  Rng rng(7);
  const Embedding clean = unit(rng, 64);
  const Embedding corrupted = corrupt(clean, GaussianNoise{0.3}, rng);
  const PriorSample s{corrupted.vec, clean.vec, 7.0, Modality::Image};
  const std::vector<PriorSample> batch(5, s);
  const double one = (prior_forward(model, corrupted, 7.0).vec - clean.vec).squaredNorm();
  CHECK(prior_batch_loss(model, batch) == doctest::Approx(one).epsilon(1e-12));
  nn::Optimizer opt(nn::OptimizerConfig{}, model.params());
  try {
    prior_train_step(model, std::span<const PriorSample>{}, opt);
    FAIL("expected EmptyBatch");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::EmptyBatch);
  }
}

TEST_CASE("non-finite samples leave the prior unchanged") {
  PriorModel model(PriorConfig{}, 8);
  Rng rng(8);
  PriorSample s{unit(rng, 64).vec, unit(rng, 64).vec, 6.0, Modality::Image};
  s.clean(3) = std::numeric_limits<double>::infinity();
  const std::vector<PriorSample> batch{s};
  nn::Optimizer opt(nn::OptimizerConfig{}, model.params());
  const Mat before = model.out_proj.weight.value;
  CHECK_THROWS_AS(prior_train_step(model, batch, opt), Error);
  CHECK(model.out_proj.weight.value == before);
}

TEST_CASE("untrained prior translates at chance level") {
  const PriorModel model(PriorConfig{}, 9);
  CHECK(translation_accuracy(world(), model) <= 6.0 / 64.0);
}

TEST_CASE("training halves the held-out loss and keeps the score live") {
  const ConceptWorld& w = world();
  const PriorModel untrained(PriorConfig{}, 1);
  Rng rng(10);
  const auto held = sample_prior_batch(w, 256, rng);
  const double before = prior_batch_loss(untrained, held);
  const double after = prior_batch_loss(trained_prior(), held);
  CHECK(after < 0.5 * before);

  const Embedding e = encode_asset(w, single(3, Modality::Text));
  const Vec a = prior_forward(trained_prior(), e, 4.5).vec;
  const Vec b = prior_forward(trained_prior(), e, 5.5).vec;
  const Vec c = prior_forward(trained_prior(), e, 7.5).vec;
  CHECK((a - b).norm() > 1e-6);
  CHECK((b - c).norm() > 1e-6);
  CHECK((a - c).norm() > 1e-6);
}

TEST_CASE("trained outputs are finite over the whole score range") {
  Rng rng(11);
  for (int i = 0; i < 100; ++i) {
    const double f = 1.0 + 9.0 * i / 99.0;
    const Embedding e = unit(rng, 64);
    CHECK(all_finite(prior_forward(trained_prior(), e, f, kAllModalities[i % 3]).vec));
  }
}

TEST_CASE("sigma-zero training learns the identity") {
  PriorModel model(PriorConfig{}, 12);
  nn::Optimizer opt(nn::OptimizerConfig{}, model.params());
  Rng rng(12);
  double loss = 1.0;
  for (int step = 0; step < 2000 && loss >= 1e-3; ++step) {
    std::vector<PriorSample> batch;
    for (int i = 0; i < 16; ++i) {
      const Vec e = encode_asset(world(), sample_scene(world(), rng, 1, 4)).vec;
      batch.push_back({e, e, rng.uniform(1.0, 10.0), Modality::Image});
    }
    loss = prior_train_step(model, batch, opt);
  }
  CHECK(loss < 1e-3);
}

TEST_CASE("zero-gap world: translation is near the identity") {
  const ConceptWorld w0 = world().with_gap(0.0);
  Rng rng(13);
  std::vector<PriorSample> probe;
  for (int i = 0; i < 64; ++i) {
    const MultimodalAsset a = sample_scene(w0, rng, 1, 4, Modality::Image);
    probe.push_back({encode_asset(w0, a.as(Modality::Text)).vec, encode_asset(w0, a).vec, a.quality, Modality::Image});
  }
  // The twins coincide, so the identity map has zero domain-shift loss.
  for (const auto& s : probe) CHECK(s.corrupted == s.clean);

  PriorModel model(PriorConfig{}, 13);
  nn::Optimizer opt(nn::OptimizerConfig{}, model.params());
  for (int step = 0; step < 1000; ++step) {
    std::vector<PriorSample> batch;
    for (int i = 0; i < 32; ++i) {
      const Modality target = rng.bernoulli(0.75) ? Modality::Image : Modality::Audio;
      const MultimodalAsset a = sample_scene(w0, rng, 1, 4, target);
      batch.push_back({encode_asset(w0, a.as(Modality::Text)).vec, encode_asset(w0, a).vec, a.quality, target});
    }
    prior_train_step(model, batch, opt);
  }
  double mean = 0.0;
  for (int k = 0; k < w0.num_concepts(); ++k) {
    const MultimodalAsset t = single(static_cast<ConceptId>(k), Modality::Text);
    const Embedding out = translate_modality(model, encode_asset(w0, t), 6.5, Modality::Image);
    mean += cosine(out.vec, encode_asset(w0, t.as(Modality::Image)).vec) / w0.num_concepts();
  }
  CHECK(mean >= 0.99);
}
