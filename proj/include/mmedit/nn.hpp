#pragma once

#include "mmedit/core.hpp"

#include <span>
#include <string>
#include <vector>

// Minimal dense layers with hand-written backward passes. Activations are
// row-major batches: one row per token / sample. Forward passes are const
// and keep their intermediates in caller-owned cache structs, so a trained
// model can be evaluated from several threads; backward passes accumulate
// into Param::grad and are single-writer.
namespace mmedit::nn {

struct Param {
  std::string name;
  Mat value;
  Mat grad;
  bool frozen = false;
  // Optional per-row trainability (embedding tables). Empty means every row
  // follows `frozen`.
  std::vector<char> trainable_rows;

  Param() = default;
  Param(std::string n, Mat v);

  Index size() const { return value.size(); }
  bool row_trainable(Index r) const;
  void zero_grad() { grad.setZero(); }
  void accumulate(const Mat& g);
  void accumulate_row(Index r, const RowVec& g);
};

using ParamList = std::vector<Param*>;

Index parameter_count(const ParamList& params);
void zero_grads(const ParamList& params);
bool grads_finite(const ParamList& params);

class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, Index in, Index out, Rng& rng, double init_std, bool bias = true);

  Mat forward(const Mat& x) const;
  // Accumulates parameter gradients and returns dL/dx.
  Mat backward(const Mat& x, const Mat& dy);
  void collect(ParamList& out);

  Index in_dim() const { return weight.value.rows(); }
  Index out_dim() const { return weight.value.cols(); }

  Param weight;  // in x out
  Param bias;    // 1 x out (empty when disabled)
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(const std::string& name, Index width);

  Mat forward(const Mat& x) const;
  Mat backward(const Mat& x, const Mat& dy);
  void collect(ParamList& out);

  Param gain;
  Param shift;
  static constexpr double kEps = 1e-5;
};

enum class Activation { Gelu, Silu };

Mat activate(Activation a, const Mat& x);
Mat activate_backward(Activation a, const Mat& x, const Mat& dy);

struct MlpCache {
  Mat x;
  Mat pre;
  Mat hidden;
};

// Two-layer perceptron: fc2(act(fc1(x))).
class Mlp2 {
 public:
  Mlp2() = default;
  Mlp2(const std::string& name, Index in, Index hidden, Index out, Activation act, Rng& rng, double std1,
       double std2);

  Mat forward(const Mat& x, MlpCache* cache = nullptr) const;
  Mat backward(const MlpCache& cache, const Mat& dy);
  void collect(ParamList& out);

  Linear fc1;
  Linear fc2;
  Activation act = Activation::Gelu;
};

// A contiguous run of rows forming one sequence inside a packed batch.
struct Segment {
  Index start = 0;
  Index length = 0;
};

struct AttentionCache {
  Mat x;
  Mat q, k, v;
  Mat ctx;
  std::vector<Mat> probs;  // one per (segment, head)
};

class CausalSelfAttention {
 public:
  CausalSelfAttention() = default;
  CausalSelfAttention(const std::string& name, Index width, int heads, Rng& rng, double init_std, double out_std);

  Mat forward(const Mat& x, std::span<const Segment> segments, AttentionCache* cache = nullptr) const;
  Mat backward(const AttentionCache& cache, std::span<const Segment> segments, const Mat& dy);
  void collect(ParamList& out);

  int heads = 1;
  Linear query;
  Linear key;  // no bias: a key bias only shifts each score row and cannot change the softmax
  Linear value;
  Linear output;
};

struct BlockCache {
  Mat x;
  Mat h1;
  AttentionCache attn;
  Mat x1;
  Mat h2;
  MlpCache mlp;
};

// Pre-norm decoder block: x + attn(ln1(x)), then + mlp(ln2(.)).
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(const std::string& name, Index width, int heads, Rng& rng, double init_std, double residual_std);

  Mat forward(const Mat& x, std::span<const Segment> segments, BlockCache* cache = nullptr) const;
  Mat backward(const BlockCache& cache, std::span<const Segment> segments, const Mat& dy);
  void collect(ParamList& out);

  LayerNorm ln1;
  CausalSelfAttention attn;
  LayerNorm ln2;
  Mlp2 mlp;
};

struct TransformerConfig {
  Index width = 128;
  int layers = 2;
  int heads = 4;
  Index max_len = 64;
  double init_std = 0.02;
};

struct TransformerCache {
  std::vector<BlockCache> blocks;
  Mat final_in;
};

// Decoder-only stack with learned positional embeddings and a final norm.
// Positions restart at zero for every segment.
class Transformer {
 public:
  Transformer() = default;
  Transformer(const std::string& name, const TransformerConfig& config, Rng& rng);

  Mat forward(const Mat& x, std::span<const Segment> segments, TransformerCache* cache = nullptr) const;
  // Returns dL/dx for the inputs (before positional embeddings were added).
  Mat backward(const TransformerCache& cache, std::span<const Segment> segments, const Mat& dy);
  void collect(ParamList& out);
  void set_frozen(bool frozen);

  TransformerConfig config;
  Param positions;  // max_len x width
  std::vector<TransformerBlock> blocks;
  LayerNorm final_norm;
};

enum class OptimizerKind { Sgd, Adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0.0;  // 0 disables global-norm clipping
};

// Holds per-parameter moments; bound to one ParamList for its lifetime.
class Optimizer {
 public:
  Optimizer(const OptimizerConfig& config, const ParamList& params);
  void step(const ParamList& params);
  const OptimizerConfig& config() const { return config_; }
  long steps_taken() const { return t_; }

 private:
  OptimizerConfig config_;
  std::vector<Mat> m_;
  std::vector<Mat> v_;
  long t_ = 0;
};

std::string_view to_string(OptimizerKind k);
OptimizerKind parse_optimizer(std::string_view s);

}  // namespace mmedit::nn
