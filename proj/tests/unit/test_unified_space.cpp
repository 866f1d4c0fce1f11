#include "mmedit/unified_space.hpp"

#include <doctest.h>

#include <cmath>

using namespace mmedit;

namespace {

const ConceptWorld& world() {
  static const ConceptWorld w = ConceptWorld::generate(0);
  return w;
}

MultimodalAsset asset(std::initializer_list<ConceptWeight> cs, Modality m = Modality::Image, double style = 0.0) {
  MultimodalAsset a;
  a.concepts = cs;
  a.modality = m;
  a.style = style;
  a.quality = 6.0;
  return a;
}

ConceptId id(std::string_view name) { return *world().find_concept(name); }

// Independent re-statement of the encoder from the world tables.
Vec reference_encoding(const ConceptWorld& w, const MultimodalAsset& a) {
  Vec mix = Vec::Zero(w.concept_dim());
  for (const auto& c : a.concepts) mix += c.weight * w.concept_table().row(c.id).transpose();
  mix /= mix.norm();
  Vec v = w.projection() * mix + 0.2 * a.style * w.style_direction() + w.gap() * w.modality_direction(a.modality);
  return v / v.norm();
}

}  // namespace

TEST_CASE("l2_normalize examples") {
  Vec v(2);
  v << 3, 4;
  const Vec n = l2_normalize(v);
  CHECK(n(0) == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(n(1) == doctest::Approx(0.8).epsilon(1e-15));

  Vec u(3);
  u << 0, 1, 0;
  CHECK((l2_normalize(u) - u).norm() < 1e-12);

  Vec z = Vec::Zero(2);
  try {
    l2_normalize(z);
    FAIL("expected ZeroVector");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ZeroVector);
  }
}

TEST_CASE("cosine_similarity examples") {
  auto emb = [](double a, double b) {
    Vec v(2);
    v << a, b;
    return Embedding::raw(v);
  };
  CHECK(cosine_similarity(emb(1, 0), emb(1, 0)) == 1.0);
  CHECK(cosine_similarity(emb(1, 0), emb(0, 1)) == 0.0);
  CHECK(cosine_similarity(emb(3, 4), emb(6, 8)) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK_THROWS_AS(cosine_similarity(emb(0, 0), emb(1, 0)), Error);
  Vec three = Vec::Ones(3);
  try {
    cosine_similarity(emb(1, 0), Embedding::raw(three));
    FAIL("expected DimensionMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DimensionMismatch);
  }
}

TEST_CASE("cosine is invariant under positive scaling") {
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const Vec a = rng.normal_vec(16);
    const Vec b = rng.normal_vec(16);
    const double s = std::exp(rng.uniform(-5, 5));
    const double t = std::exp(rng.uniform(-5, 5));
    CHECK(std::abs(cosine_similarity(Embedding::raw(a), Embedding::raw(b)) -
                   cosine_similarity(Embedding::raw(s * a), Embedding::raw(t * b))) < 1e-12);
  }
}

TEST_CASE("world is a pure function of its seed") {
  const ConceptWorld a = ConceptWorld::generate(42);
  const ConceptWorld b = ConceptWorld::generate(42);
  CHECK(a.serialize() == b.serialize());
  CHECK(a.fingerprint() == b.fingerprint());
  CHECK(!(ConceptWorld::generate(43) == a));
}

TEST_CASE("world tables satisfy their invariants") {
  const ConceptWorld& w = world();
  CHECK(w.num_concepts() == 64);
  CHECK(w.concept_dim() == 16);
  CHECK(w.embed_dim() == 64);
  for (int k = 0; k < w.num_concepts(); ++k) CHECK(std::abs(w.concept_table().row(k).norm() - 1.0) < 1e-12);
  for (Modality m : kAllModalities) {
    CHECK(std::abs(w.modality_direction(m).norm() - 1.0) < 1e-12);
    for (Modality n : kAllModalities)
      if (m != n) CHECK(std::abs(w.modality_direction(m).dot(w.modality_direction(n))) < 1e-12);
  }
  CHECK(std::abs(w.style_direction().norm() - 1.0) < 1e-12);
  // Random concepts should not collide.
  double worst = 0.0;
  for (int i = 0; i < w.num_concepts(); ++i)
    for (int j = i + 1; j < w.num_concepts(); ++j) {
      MultimodalAsset a = asset({{static_cast<ConceptId>(i), 1.0}});
      MultimodalAsset b = asset({{static_cast<ConceptId>(j), 1.0}});
      worst = std::max(worst, cosine(encode_asset(w, a).vec, encode_asset(w, b).vec));
    }
  CHECK(worst < 0.97);
}

TEST_CASE("world serialization round-trips") {
  const ConceptWorld& w = world();
  const auto bytes = w.serialize();
  CHECK(bytes[0] == 'I');
  CHECK(bytes[3] == 'W');
  const ConceptWorld back = ConceptWorld::deserialize(bytes);
  CHECK(back == w);
  CHECK(back.concept_name(id("dog")) == "dog");
}

TEST_CASE("encode_asset matches the reference construction") {
  const ConceptWorld& w = world();
  Rng rng(11);
  for (int i = 0; i < 200; ++i) {
    const auto m = kAllModalities[rng.index(3)];
    const MultimodalAsset a = sample_scene(w, rng, 1, 4, m);
    const Embedding e = encode_asset(w, a);
    CHECK(e.normalized);
    CHECK(e.modality == m);
    CHECK(std::abs(e.vec.norm() - 1.0) < 1e-6);
    CHECK((e.vec - reference_encoding(w, a)).norm() < 1e-12);
    CHECK(encode_asset(w, a).vec == e.vec);
  }
}

TEST_CASE("image and audio twins align above the analytic bound") {
  const ConceptWorld& w = world();
  const MultimodalAsset img = asset({{id("dog"), 1.0}}, Modality::Image);
  const double measured = cosine(encode_asset(w, img).vec, encode_asset(w, img.as(Modality::Audio)).vec);
  // With v the gap-free part and kappa the gap: cos = (|v|^2 + kappa v.(d_i + d_a)) / (|v + kappa d_i| |v + kappa d_a|).
  const Vec v = w.projection() * w.concept_table().row(id("dog")).transpose();
  const Vec di = w.modality_direction(Modality::Image);
  const Vec da = w.modality_direction(Modality::Audio);
  const double k = w.gap();
  const double analytic = (v.squaredNorm() + k * v.dot(di + da)) / ((v + k * di).norm() * (v + k * da).norm());
  CHECK(measured == doctest::Approx(analytic).epsilon(1e-12));
  CHECK(measured >= 0.97);
}

TEST_CASE("zero gap makes modalities indistinguishable") {
  const ConceptWorld w0 = world().with_gap(0.0);
  const MultimodalAsset a = asset({{id("cat"), 1.0}, {id("beach"), 0.5}}, Modality::Image, 0.3);
  CHECK(encode_asset(w0, a).vec == encode_asset(w0, a.as(Modality::Audio)).vec);
  CHECK(encode_asset(w0, a).vec == encode_asset(w0, a.as(Modality::Text)).vec);
}

TEST_CASE("cross-modal cosine decreases strictly with the gap") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const MultimodalAsset a = sample_scene(world(), rng, 1, 3);
    double last = 2.0;
    for (double gap : {0.0, 0.05, 0.1, 0.2, 0.4, 0.8}) {
      const ConceptWorld w = world().with_gap(gap);
      const double c = cosine(encode_asset(w, a).vec, encode_asset(w, a.as(Modality::Text)).vec);
      if (gap == 0.0) CHECK(c == doctest::Approx(1.0).epsilon(1e-15));
      CHECK(c < last);
      last = c;
    }
  }
}

TEST_CASE("encode_asset rejects unknown concepts") {
  try {
    encode_asset(world(), asset({{999, 1.0}}));
    FAIL("expected UnknownConcept");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::UnknownConcept);
  }
}

TEST_CASE("make_paired_assets") {
  const ConceptWorld& w = world();
  const ConceptWeight dog[] = {{id("dog"), 1.0}};
  const Modality ia[] = {Modality::Image, Modality::Audio};
  const auto pair = make_paired_assets(w, dog, ia, 0.0, 6.0);
  REQUIRE(pair.size() == 2);
  CHECK(pair[0].modality == Modality::Image);
  CHECK(pair[1].modality == Modality::Audio);
  CHECK(pair[0].concepts == pair[1].concepts);
  CHECK(cosine(encode_asset(w, pair[0]).vec, encode_asset(w, pair[1]).vec) >= 0.97);

  CHECK_THROWS_AS(make_paired_assets(w, dog, std::span<const Modality>{}, 0.0, 6.0), Error);

  const ConceptWeight dog_beach[] = {{id("dog"), 1.0}, {id("beach"), 0.5}};
  const Modality text[] = {Modality::Text};
  const auto one = make_paired_assets(w, dog_beach, text, 0.0, 6.0);
  REQUIRE(one.size() == 1);
  CHECK(one[0].modality == Modality::Text);
  CHECK(one[0].concepts.size() == 2);

  const ConceptWeight bad[] = {{500, 1.0}};
  CHECK_THROWS_AS(make_paired_assets(w, bad, text, 0.0, 6.0), Error);
}

TEST_CASE("oracle_edit examples") {
  const ConceptWorld& w = world();
  const MultimodalAsset base = asset({{id("dog"), 1.0}, {id("beach"), 0.5}});

  const auto swapped = oracle_edit(w, base, ReplaceEdit{id("dog"), id("cat")});
  CHECK(swapped.concepts == std::vector<ConceptWeight>{{id("cat"), 1.0}, {id("beach"), 0.5}});
  CHECK(swapped.modality == Modality::Image);

  const auto removed = oracle_edit(w, base, RemoveEdit{id("dog")});
  const auto restored = oracle_edit(w, removed, AddEdit{id("dog"), 1.0});
  auto sorted = [](std::vector<ConceptWeight> v) {
    std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    return v;
  };
  CHECK(sorted(restored.concepts) == sorted(base.concepts));

  try {
    oracle_edit(w, asset({{id("dog"), 1.0}}), RemoveEdit{id("cat")});
    FAIL("expected ConceptNotPresent");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ConceptNotPresent);
  }
  CHECK_THROWS_AS(oracle_edit(w, base, ReplaceEdit{id("cat"), id("owl")}), Error);

  const auto styled = oracle_edit(w, base, StyleEdit{-0.5});
  CHECK(styled.style == -0.5);
  CHECK(styled.concepts == base.concepts);

  const auto atmos = oracle_edit(w, base, AtmosphereEdit{id("rain"), 0.5});
  CHECK(atmos.concepts.size() == 3);
  CHECK(atmos.style == base.style);
  CHECK(atmos.quality == base.quality);
}

TEST_CASE("add then remove restores the encoding") {
  const ConceptWorld& w = world();
  Rng rng(21);
  for (int i = 0; i < 200; ++i) {
    const MultimodalAsset base = sample_scene(w, rng, 1, 3);
    ConceptId extra = 0;
    do {
      extra = static_cast<ConceptId>(rng.index(64));
    } while (std::any_of(base.concepts.begin(), base.concepts.end(), [&](const auto& c) { return c.id == extra; }));
    const auto added = oracle_edit(w, base, AddEdit{extra, rng.uniform(0.3, 1.0)});
    const auto back = oracle_edit(w, added, RemoveEdit{extra});
    CHECK((encode_asset(w, back).vec - encode_asset(w, base).vec).norm() < 1e-9);
    CHECK(back.style == base.style);
    CHECK(back.quality == base.quality);
  }
}

TEST_CASE("quality samplers respect their ranges") {
  Rng rng(8);
  double audio_sum = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double hi = sample_quality_high(rng);
    CHECK(hi >= 5.0);
    CHECK(hi <= 10.0);
    const double au = sample_quality_audio(rng);
    CHECK(au >= 1.0);
    CHECK(au <= 8.0);
    audio_sum += au;
  }
  CHECK(audio_sum / n == doctest::Approx(4.5).epsilon(0.01));
}

TEST_CASE("validate_asset rejects broken assets") {
  CHECK_THROWS_AS(validate_asset(world(), asset({})), Error);
  CHECK_THROWS_AS(validate_asset(world(), asset({{id("dog"), 0.0}})), Error);
  MultimodalAsset q = asset({{id("dog"), 1.0}});
  q.quality = 11.0;
  CHECK_THROWS_AS(validate_asset(world(), q), Error);
  q.quality = 5.0;
  q.style = 1.5;
  CHECK_THROWS_AS(validate_asset(world(), q), Error);
}
