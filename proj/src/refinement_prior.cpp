#include "mmedit/refinement_prior.hpp"

#include "mmedit/io.hpp"

#include <cmath>
#include <cstring>

namespace mmedit {

namespace {

std::uint64_t vec_key(const Vec& v) {
  return io::fnv1a(std::span(reinterpret_cast<const std::uint8_t*>(v.data()), static_cast<std::size_t>(v.size()) * 8));
}

bool same_bits(const Vec& a, const Vec& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), static_cast<std::size_t>(a.size()) * sizeof(double)) == 0;
}

constexpr Index kSeqLen = 3;  // score, corrupted embedding, query

}  // namespace

void PairedLookup::add(const Embedding& a, const Embedding& b) {
  if (!a.modality || !b.modality) throw Error(ErrorCode::InvalidArgument, "paired embeddings need modality tags");
  table_[vec_key(a.vec)].emplace_back(a.vec, b);
  table_[vec_key(b.vec)].emplace_back(b.vec, a);
  ++count_;
}

std::optional<Embedding> PairedLookup::find(const Vec& source, Modality target) const {
  auto it = table_.find(vec_key(source));
  if (it == table_.end()) return std::nullopt;
  for (const auto& [src, twin] : it->second)
    if (same_bits(src, source) && twin.modality == target) return twin;
  return std::nullopt;
}

Embedding corrupt(const Embedding& e, const CorruptionSpec& spec, Rng& rng) {
  if (std::abs(e.vec.norm() - 1.0) > 1e-6) throw Error(ErrorCode::InvalidArgument, "corrupt expects a normalized embedding");
  if (const auto* g = std::get_if<GaussianNoise>(&spec)) {
    if (!std::isfinite(g->sigma) || g->sigma < 0.0) throw Error(ErrorCode::InvalidArgument, "sigma must be finite and >= 0");
    if (g->sigma == 0.0) return e;
    const Vec noisy = e.vec + g->sigma * rng.normal_vec(e.vec.size());
    return Embedding{l2_normalize(noisy), e.modality, true};
  }
  const auto& shift = std::get<DomainShift>(spec);
  if (e.modality && *e.modality != shift.from) {
    throw Error(ErrorCode::InvalidArgument, "domain shift source modality does not match the embedding");
  }
  if (shift.pairs == nullptr) throw Error(ErrorCode::MissingPair, "domain shift without a paired lookup");
  auto twin = shift.pairs->find(e.vec, shift.to);
  if (!twin) throw Error(ErrorCode::MissingPair, "no registered " + std::string(to_string(shift.to)) + " twin");
  return *twin;
}

PriorModel::PriorModel(const PriorConfig& config, std::uint64_t seed) : config_(config) {
  Rng rng(seed);
  auto gaussian = [&rng](Index r, Index c, double std) {
    Mat m(r, c);
    for (Index i = 0; i < r; ++i)
      for (Index j = 0; j < c; ++j) m(i, j) = std * rng.normal();
    return m;
  };
  score_weight = nn::Param("prior.score_weight", gaussian(1, config.width, config.init_std));
  score_bias = nn::Param("prior.score_bias", gaussian(1, config.width, config.init_std));
  in_proj = nn::Linear("prior.in_proj", config.d_enc, config.width, rng, 1.0 / std::sqrt(static_cast<double>(config.d_enc)));
  queries = nn::Param("prior.queries", gaussian(3, config.width, config.init_std));
  backbone = nn::Transformer("prior.backbone",
                             nn::TransformerConfig{config.width, config.layers, config.heads, kSeqLen, config.init_std},
                             rng);
  out_proj = nn::Linear("prior.out_proj", config.width, config.d_enc, rng, config.init_std);
}

nn::ParamList PriorModel::params() {
  nn::ParamList out{&score_weight, &score_bias};
  in_proj.collect(out);
  out.push_back(&queries);
  backbone.collect(out);
  out_proj.collect(out);
  return out;
}

Index PriorModel::parameter_count() { return nn::parameter_count(params()); }

double scaled_score(double f) {
  if (!(f >= 1.0 && f <= 10.0)) throw Error(ErrorCode::ScoreOutOfRange, "aesthetic score " + std::to_string(f) + " outside [1, 10]");
  return (f - 5.5) / 4.5;
}

namespace {

struct PriorForward {
  Mat tokens;  // 3B x W input tokens
  std::vector<nn::Segment> segments;
  nn::TransformerCache cache;
  Mat query_hidden;  // B x W
  Mat output;        // B x D_enc
};

PriorForward run_prior(const PriorModel& model, const Mat& inputs, std::span<const double> f,
                       std::span<const Modality> targets, bool keep_cache) {
  const Index b = inputs.rows();
  if (inputs.cols() != model.config().d_enc) {
    throw Error(ErrorCode::DimensionMismatch, "prior input has dimension " + std::to_string(inputs.cols()));
  }
  PriorForward out;
  const Mat projected = model.in_proj.forward(inputs);
  out.tokens.resize(kSeqLen * b, model.config().width);
  for (Index i = 0; i < b; ++i) {
    const double s = scaled_score(f[static_cast<std::size_t>(i)]);
    out.tokens.row(kSeqLen * i) = s * model.score_weight.value.row(0) + model.score_bias.value.row(0);
    out.tokens.row(kSeqLen * i + 1) = projected.row(i);
    out.tokens.row(kSeqLen * i + 2) = model.queries.value.row(static_cast<Index>(targets[static_cast<std::size_t>(i)]));
    out.segments.push_back({kSeqLen * i, kSeqLen});
  }
  const Mat hidden = model.backbone.forward(out.tokens, out.segments, keep_cache ? &out.cache : nullptr);
  out.query_hidden.resize(b, model.config().width);
  for (Index i = 0; i < b; ++i) out.query_hidden.row(i) = hidden.row(kSeqLen * i + 2);
  out.output = model.out_proj.forward(out.query_hidden);
  return out;
}

}  // namespace

Mat prior_forward_batch(const PriorModel& model, const Mat& inputs, std::span<const double> f,
                        std::span<const Modality> targets) {
  if (static_cast<Index>(f.size()) != inputs.rows() || static_cast<Index>(targets.size()) != inputs.rows()) {
    throw Error(ErrorCode::ShapeMismatch, "prior batch arguments disagree in length");
  }
  return run_prior(model, inputs, f, targets, false).output;
}

Embedding prior_forward(const PriorModel& model, const Embedding& corrupted, double f, Modality target) {
  const Mat in = corrupted.vec.transpose();
  const double fs[] = {f};
  const Modality ts[] = {target};
  const Mat out = run_prior(model, in, fs, ts, false).output;
  return Embedding::raw(out.row(0).transpose());
}

double prior_loss(const PriorModel& model, const Embedding& clean, const CorruptionSpec& spec, double f, Rng& rng,
                  Modality target) {
  const Embedding c = corrupt(clean, spec, rng);
  return (clean.vec - prior_forward(model, c, f, target).vec).squaredNorm();
}

double prior_batch_loss(const PriorModel& model, std::span<const PriorSample> batch) {
  if (batch.empty()) throw Error(ErrorCode::EmptyBatch, "prior batch is empty");
  double total = 0.0;
  for (const auto& s : batch) {
    const Embedding out = prior_forward(model, Embedding::raw(s.corrupted), s.f, s.target);
    total += (out.vec - s.clean).squaredNorm();
  }
  return total / static_cast<double>(batch.size());
}

double prior_loss_and_grad(PriorModel& model, std::span<const PriorSample> batch) {
  if (batch.empty()) throw Error(ErrorCode::EmptyBatch, "prior batch is empty");
  const auto b = static_cast<Index>(batch.size());
  const int d = model.config().d_enc;
  Mat inputs(b, d);
  Mat clean(b, d);
  std::vector<double> f;
  std::vector<Modality> targets;
  for (Index i = 0; i < b; ++i) {
    const auto& s = batch[static_cast<std::size_t>(i)];
    if (s.corrupted.size() != d || s.clean.size() != d) throw Error(ErrorCode::DimensionMismatch, "prior sample dimension");
    inputs.row(i) = s.corrupted.transpose();
    clean.row(i) = s.clean.transpose();
    f.push_back(s.f);
    targets.push_back(s.target);
  }
  nn::ParamList params = model.params();
  nn::zero_grads(params);
  PriorForward fw = run_prior(model, inputs, f, targets, true);
  const Mat diff = fw.output - clean;
  const double loss = diff.squaredNorm() / static_cast<double>(b);
  if (!std::isfinite(loss)) throw Error(ErrorCode::NonFiniteLoss, "prior loss is not finite");

  const Mat dout = diff * (2.0 / static_cast<double>(b));
  const Mat dquery = model.out_proj.backward(fw.query_hidden, dout);
  Mat dhidden = Mat::Zero(fw.tokens.rows(), fw.tokens.cols());
  for (Index i = 0; i < b; ++i) dhidden.row(kSeqLen * i + 2) = dquery.row(i);
  const Mat dtokens = model.backbone.backward(fw.cache, fw.segments, dhidden);

  Mat dproj(b, model.config().width);
  RowVec dsw = RowVec::Zero(model.config().width);
  RowVec dsb = RowVec::Zero(model.config().width);
  Mat dq = Mat::Zero(3, model.config().width);
  for (Index i = 0; i < b; ++i) {
    const double s = scaled_score(f[static_cast<std::size_t>(i)]);
    dsw += s * dtokens.row(kSeqLen * i);
    dsb += dtokens.row(kSeqLen * i);
    dproj.row(i) = dtokens.row(kSeqLen * i + 1);
    dq.row(static_cast<Index>(targets[static_cast<std::size_t>(i)])) += dtokens.row(kSeqLen * i + 2);
  }
  model.score_weight.accumulate(dsw);
  model.score_bias.accumulate(dsb);
  model.queries.accumulate(dq);
  model.in_proj.backward(inputs, dproj);
  if (!nn::grads_finite(params)) {
    nn::zero_grads(params);
    throw Error(ErrorCode::NonFiniteLoss, "prior gradient is not finite");
  }
  return loss;
}

double prior_train_step(PriorModel& model, std::span<const PriorSample> batch, nn::Optimizer& optimizer) {
  const double loss = prior_loss_and_grad(model, batch);
  optimizer.step(model.params());
  return loss;
}

double prior_train_step(PriorModel& model, std::span<const PriorExample> batch, nn::Optimizer& optimizer, Rng& rng) {
  if (batch.empty()) throw Error(ErrorCode::EmptyBatch, "prior batch is empty");
  std::vector<PriorSample> samples;
  samples.reserve(batch.size());
  for (const auto& ex : batch) {
    samples.push_back(PriorSample{corrupt(ex.clean, ex.spec, rng).vec, ex.clean.vec, ex.f, ex.target});
  }
  return prior_train_step(model, std::span<const PriorSample>(samples), optimizer);
}

Embedding translate_modality(const PriorModel& model, const Embedding& source, double f, Modality target) {
  return prior_forward(model, source, f, target);
}

}  // namespace mmedit
