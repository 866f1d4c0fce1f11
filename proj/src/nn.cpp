#include "mmedit/nn.hpp"

#include <cmath>
#include <limits>
#include <numbers>

namespace mmedit::nn {

Param::Param(std::string n, Mat v) : name(std::move(n)), value(std::move(v)) {
  grad = Mat::Zero(value.rows(), value.cols());
}

bool Param::row_trainable(Index r) const {
  if (frozen) return false;
  if (trainable_rows.empty()) return true;
  return trainable_rows[static_cast<std::size_t>(r)] != 0;
}

void Param::accumulate(const Mat& g) {
  if (frozen) return;
  if (trainable_rows.empty()) {
    grad += g;
    return;
  }
  for (Index r = 0; r < g.rows(); ++r)
    if (trainable_rows[static_cast<std::size_t>(r)]) grad.row(r) += g.row(r);
}

void Param::accumulate_row(Index r, const RowVec& g) {
  if (row_trainable(r)) grad.row(r) += g;
}

Index parameter_count(const ParamList& params) {
  Index n = 0;
  for (const Param* p : params) n += p->size();
  return n;
}

void zero_grads(const ParamList& params) {
  for (Param* p : params) p->zero_grad();
}

bool grads_finite(const ParamList& params) {
  for (const Param* p : params)
    if (!p->grad.allFinite()) return false;
  return true;
}

namespace {

Mat gaussian(Index rows, Index cols, Rng& rng, double std) {
  Mat m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = std * rng.normal();
  return m;
}

}  // namespace

// ---------------------------------------------------------------- Linear

Linear::Linear(const std::string& name, Index in, Index out, Rng& rng, double init_std, bool with_bias)
    : weight(name + ".weight", gaussian(in, out, rng, init_std)) {
  if (with_bias) bias = Param(name + ".bias", Mat::Zero(1, out));
}

Mat Linear::forward(const Mat& x) const {
  Mat y(x.rows(), weight.value.cols());
  y.noalias() = x * weight.value;
  if (bias.value.size() > 0) y.rowwise() += bias.value.row(0);
  return y;
}

Mat Linear::backward(const Mat& x, const Mat& dy) {
  if (!weight.frozen) {
    Mat gw(weight.value.rows(), weight.value.cols());
    gw.noalias() = x.transpose() * dy;
    weight.accumulate(gw);
  }
  if (bias.value.size() > 0 && !bias.frozen) bias.accumulate(dy.colwise().sum());
  Mat dx(dy.rows(), weight.value.rows());
  dx.noalias() = dy * weight.value.transpose();
  return dx;
}

void Linear::collect(ParamList& out) {
  out.push_back(&weight);
  if (bias.value.size() > 0) out.push_back(&bias);
}

// ---------------------------------------------------------------- LayerNorm

LayerNorm::LayerNorm(const std::string& name, Index width)
    : gain(name + ".gain", Mat::Ones(1, width)), shift(name + ".shift", Mat::Zero(1, width)) {}

Mat LayerNorm::forward(const Mat& x) const {
  Mat y(x.rows(), x.cols());
  const double n = static_cast<double>(x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).sum() / n;
    const double var = (x.row(r).array() - mu).square().sum() / n;
    const double rstd = 1.0 / std::sqrt(var + kEps);
    y.row(r) = ((x.row(r).array() - mu) * rstd) * gain.value.row(0).array() + shift.value.row(0).array();
  }
  return y;
}

Mat LayerNorm::backward(const Mat& x, const Mat& dy) {
  Mat dx(x.rows(), x.cols());
  RowVec dgain = RowVec::Zero(x.cols());
  const double n = static_cast<double>(x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).sum() / n;
    const double var = (x.row(r).array() - mu).square().sum() / n;
    const double rstd = 1.0 / std::sqrt(var + kEps);
    const RowVec xhat = ((x.row(r).array() - mu) * rstd).matrix();
    dgain.array() += dy.row(r).array() * xhat.array();
    const RowVec dxhat = (dy.row(r).array() * gain.value.row(0).array()).matrix();
    const double mean_d = dxhat.sum() / n;
    const double mean_dx = dxhat.dot(xhat) / n;
    dx.row(r) = rstd * (dxhat.array() - mean_d - xhat.array() * mean_dx).matrix();
  }
  gain.accumulate(dgain);
  shift.accumulate(dy.colwise().sum());
  return dx;
}

void LayerNorm::collect(ParamList& out) {
  out.push_back(&gain);
  out.push_back(&shift);
}

// ---------------------------------------------------------------- activations

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Mat activate(Activation a, const Mat& x) {
  if (a == Activation::Gelu) {
    return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v))); });
  }
  return x.unaryExpr([](double v) { return v / (1.0 + std::exp(-v)); });
}

Mat activate_backward(Activation a, const Mat& x, const Mat& dy) {
  if (a == Activation::Gelu) {
    return dy.binaryExpr(x, [](double g, double v) {
      const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      return g * d;
    });
  }
  return dy.binaryExpr(x, [](double g, double v) {
    const double s = 1.0 / (1.0 + std::exp(-v));
    return g * s * (1.0 + v * (1.0 - s));
  });
}

// ---------------------------------------------------------------- Mlp2

Mlp2::Mlp2(const std::string& name, Index in, Index hidden, Index out, Activation a, Rng& rng, double std1,
           double std2)
    : fc1(name + ".fc1", in, hidden, rng, std1), fc2(name + ".fc2", hidden, out, rng, std2), act(a) {}

Mat Mlp2::forward(const Mat& x, MlpCache* cache) const {
  Mat pre = fc1.forward(x);
  Mat hidden = activate(act, pre);
  Mat y = fc2.forward(hidden);
  if (cache) {
    cache->x = x;
    cache->pre = std::move(pre);
    cache->hidden = std::move(hidden);
  }
  return y;
}

Mat Mlp2::backward(const MlpCache& cache, const Mat& dy) {
  Mat dh = fc2.backward(cache.hidden, dy);
  Mat dpre = activate_backward(act, cache.pre, dh);
  return fc1.backward(cache.x, dpre);
}

void Mlp2::collect(ParamList& out) {
  fc1.collect(out);
  fc2.collect(out);
}

// ---------------------------------------------------------------- attention

CausalSelfAttention::CausalSelfAttention(const std::string& name, Index width, int n_heads, Rng& rng,
                                         double init_std, double out_std)
    : heads(n_heads),
      query(name + ".query", width, width, rng, init_std),
      key(name + ".key", width, width, rng, init_std, false),
      value(name + ".value", width, width, rng, init_std),
      output(name + ".output", width, width, rng, out_std) {
  if (n_heads < 1 || width % n_heads != 0) {
    throw Error(ErrorCode::InvalidArgument, "attention width must be divisible by the head count");
  }
}

Mat CausalSelfAttention::forward(const Mat& x, std::span<const Segment> segments, AttentionCache* cache) const {
  const Index width = query.out_dim();
  const Index dh = width / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Mat q = query.forward(x);
  Mat k = key.forward(x);
  Mat v = value.forward(x);
  Mat ctx = Mat::Zero(x.rows(), width);
  if (cache) cache->probs.clear();

  for (const Segment& seg : segments) {
    const Index len = seg.length;
    for (int h = 0; h < heads; ++h) {
      const auto qh = q.block(seg.start, h * dh, len, dh);
      const auto kh = k.block(seg.start, h * dh, len, dh);
      const auto vh = v.block(seg.start, h * dh, len, dh);
      Mat p(len, len);
      p.noalias() = (qh * kh.transpose()) * scale;
      for (Index i = 0; i < len; ++i) {
        const double mx = p.row(i).head(i + 1).maxCoeff();
        double total = 0.0;
        for (Index j = 0; j <= i; ++j) {
          p(i, j) = std::exp(p(i, j) - mx);
          total += p(i, j);
        }
        for (Index j = 0; j <= i; ++j) p(i, j) /= total;
        for (Index j = i + 1; j < len; ++j) p(i, j) = 0.0;
      }
      ctx.block(seg.start, h * dh, len, dh).noalias() = p * vh;
      if (cache) cache->probs.push_back(std::move(p));
    }
  }
  Mat y = output.forward(ctx);
  if (cache) {
    cache->x = x;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->ctx = std::move(ctx);
  }
  return y;
}

Mat CausalSelfAttention::backward(const AttentionCache& cache, std::span<const Segment> segments, const Mat& dy) {
  const Index width = query.out_dim();
  const Index dh = width / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Mat dctx = output.backward(cache.ctx, dy);
  Mat dq = Mat::Zero(dy.rows(), width);
  Mat dk = Mat::Zero(dy.rows(), width);
  Mat dv = Mat::Zero(dy.rows(), width);

  std::size_t idx = 0;
  for (const Segment& seg : segments) {
    const Index len = seg.length;
    for (int h = 0; h < heads; ++h) {
      const Mat& p = cache.probs[idx++];
      const auto qh = cache.q.block(seg.start, h * dh, len, dh);
      const auto kh = cache.k.block(seg.start, h * dh, len, dh);
      const auto vh = cache.v.block(seg.start, h * dh, len, dh);
      const auto dout = dctx.block(seg.start, h * dh, len, dh);
      dv.block(seg.start, h * dh, len, dh).noalias() = p.transpose() * dout;
      Mat dp(len, len);
      dp.noalias() = dout * vh.transpose();
      const Vec row_dot = (dp.array() * p.array()).rowwise().sum();
      Mat ds = (p.array() * (dp.colwise() - row_dot).array()).matrix() * scale;
      dq.block(seg.start, h * dh, len, dh).noalias() = ds * kh;
      dk.block(seg.start, h * dh, len, dh).noalias() = ds.transpose() * qh;
    }
  }
  Mat dx = query.backward(cache.x, dq);
  dx += key.backward(cache.x, dk);
  dx += value.backward(cache.x, dv);
  return dx;
}

void CausalSelfAttention::collect(ParamList& out) {
  query.collect(out);
  key.collect(out);
  value.collect(out);
  output.collect(out);
}

// ---------------------------------------------------------------- block

TransformerBlock::TransformerBlock(const std::string& name, Index width, int heads, Rng& rng, double init_std,
                                   double residual_std)
    : ln1(name + ".ln1", width),
      attn(name + ".attn", width, heads, rng, init_std, residual_std),
      ln2(name + ".ln2", width),
      mlp(name + ".mlp", width, 4 * width, width, Activation::Gelu, rng, init_std, residual_std) {}

Mat TransformerBlock::forward(const Mat& x, std::span<const Segment> segments, BlockCache* cache) const {
  Mat h1 = ln1.forward(x);
  Mat x1 = x + attn.forward(h1, segments, cache ? &cache->attn : nullptr);
  Mat h2 = ln2.forward(x1);
  Mat y = x1 + mlp.forward(h2, cache ? &cache->mlp : nullptr);
  if (cache) {
    cache->x = x;
    cache->h1 = std::move(h1);
    cache->x1 = std::move(x1);
    cache->h2 = std::move(h2);
  }
  return y;
}

Mat TransformerBlock::backward(const BlockCache& cache, std::span<const Segment> segments, const Mat& dy) {
  Mat dx1 = dy + ln2.backward(cache.x1, mlp.backward(cache.mlp, dy));
  return dx1 + ln1.backward(cache.x, attn.backward(cache.attn, segments, dx1));
}

void TransformerBlock::collect(ParamList& out) {
  ln1.collect(out);
  attn.collect(out);
  ln2.collect(out);
  mlp.collect(out);
}

// ---------------------------------------------------------------- stack

Transformer::Transformer(const std::string& name, const TransformerConfig& cfg, Rng& rng)
    : config(cfg), positions(name + ".positions", gaussian(cfg.max_len, cfg.width, rng, cfg.init_std)),
      final_norm(name + ".final_norm", cfg.width) {
  const double residual_std = cfg.init_std / std::sqrt(2.0 * cfg.layers);
  for (int l = 0; l < cfg.layers; ++l) {
    blocks.emplace_back(name + ".block" + std::to_string(l), cfg.width, cfg.heads, rng, cfg.init_std, residual_std);
  }
}

Mat Transformer::forward(const Mat& x, std::span<const Segment> segments, TransformerCache* cache) const {
  Mat h = x;
  for (const Segment& seg : segments) {
    if (seg.length > config.max_len) {
      throw Error(ErrorCode::ShapeMismatch, "sequence of length " + std::to_string(seg.length) +
                                                " exceeds max_len " + std::to_string(config.max_len));
    }
    h.middleRows(seg.start, seg.length) += positions.value.topRows(seg.length);
  }
  if (cache) cache->blocks.resize(blocks.size());
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    h = blocks[l].forward(h, segments, cache ? &cache->blocks[l] : nullptr);
  }
  if (cache) cache->final_in = h;
  return final_norm.forward(h);
}

Mat Transformer::backward(const TransformerCache& cache, std::span<const Segment> segments, const Mat& dy) {
  Mat d = final_norm.backward(cache.final_in, dy);
  for (std::size_t l = blocks.size(); l-- > 0;) d = blocks[l].backward(cache.blocks[l], segments, d);
  if (!positions.frozen) {
    Mat gpos = Mat::Zero(positions.value.rows(), positions.value.cols());
    for (const Segment& seg : segments) gpos.topRows(seg.length) += d.middleRows(seg.start, seg.length);
    positions.accumulate(gpos);
  }
  return d;
}

void Transformer::collect(ParamList& out) {
  out.push_back(&positions);
  for (auto& b : blocks) b.collect(out);
  final_norm.collect(out);
}

void Transformer::set_frozen(bool frozen) {
  ParamList ps;
  collect(ps);
  for (Param* p : ps) p->frozen = frozen;
}

// ---------------------------------------------------------------- optimizer

Optimizer::Optimizer(const OptimizerConfig& config, const ParamList& params) : config_(config) {
  if (!(config.lr > 0.0)) throw Error(ErrorCode::InvalidArgument, "learning rate must be positive");
  for (const Param* p : params) {
    m_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
  }
}

void Optimizer::step(const ParamList& params) {
  if (params.size() != m_.size()) throw Error(ErrorCode::ShapeMismatch, "optimizer bound to a different model");
  double scale = 1.0;
  if (config_.clip_norm > 0.0) {
    double sq = 0.0;
    for (const Param* p : params) sq += p->grad.squaredNorm();
    const double norm = std::sqrt(sq);
    if (norm > config_.clip_norm) scale = config_.clip_norm / norm;
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param& p = *params[i];
    if (p.frozen) continue;
    const Mat g = p.grad * scale;
    if (config_.kind == OptimizerKind::Sgd) {
      p.value -= config_.lr * g;
      continue;
    }
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g.cwiseProduct(g);
    const double lr = config_.lr;
    const double eps = config_.eps;
    // Rows without gradient signal (masked embedding rows) keep zero moments
    // and therefore receive a zero update.
    p.value.array() -= lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + eps);
  }
}

std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adam"; }

OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "sgd") return OptimizerKind::Sgd;
  if (s == "adam") return OptimizerKind::Adam;
  throw Error(ErrorCode::InvalidArgument, "unknown optimizer '" + std::string(s) + "'");
}

}  // namespace mmedit::nn
