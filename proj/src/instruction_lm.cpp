#include "mmedit/instruction_lm.hpp"

#include "mmedit/io.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mmedit {

// ---------------------------------------------------------------- vocabulary

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (std::string_view special : {kImage, kAudio, kBase, kGen, kEos, kAnswer, kColon}) {
    if (std::find(tokens_.begin(), tokens_.end(), special) == tokens_.end()) tokens_.emplace_back(special);
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    const std::string& t = tokens_[i];
    if (t.empty() || t.find_first_of(" \t\r\n") != std::string::npos) {
      throw Error(ErrorCode::InvalidArgument, "vocabulary token '" + t + "' is empty or contains whitespace");
    }
    if (!index_.emplace(t, static_cast<int>(i)).second) {
      throw Error(ErrorCode::InvalidArgument, "duplicate vocabulary token '" + t + "'");
    }
  }
  image_ = id(kImage);
  audio_ = id(kAudio);
  base_ = id(kBase);
  gen_ = id(kGen);
  eos_ = id(kEos);
}

std::optional<int> Vocabulary::find(std::string_view word) const {
  auto it = index_.find(std::string(word));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

int Vocabulary::id(std::string_view word) const {
  if (auto found = find(word)) return *found;
  throw Error(ErrorCode::UnknownToken, "'" + std::string(word) + "' is not in the vocabulary");
}

std::string Vocabulary::serialize() const {
  std::string out;
  for (const auto& t : tokens_) {
    out += t;
    out += '\n';
  }
  return out;
}

Vocabulary Vocabulary::parse(std::string_view text) {
  std::vector<std::string> tokens;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!line.empty()) tokens.emplace_back(line);
    pos = end + 1;
  }
  return Vocabulary(std::move(tokens));
}

std::uint64_t Vocabulary::fingerprint() const {
  const std::string s = serialize();
  return io::fnv1a(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

// ---------------------------------------------------------------- tokenizer

TokenizedInstruction tokenize_instruction(std::string_view text, const Vocabulary& vocab) {
  TokenizedInstruction out;
  std::istringstream in{std::string(text)};
  std::string word;
  while (in >> word) {
    const int id = vocab.id(word);
    if (id == vocab.image_id()) out.slots.push_back({static_cast<Index>(out.ids.size()), Modality::Image});
    if (id == vocab.audio_id()) out.slots.push_back({static_cast<Index>(out.ids.size()), Modality::Audio});
    out.ids.push_back(id);
  }
  return out;
}

std::string detokenize(std::span<const int> ids, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += vocab.token(ids[i]);
  }
  return out;
}

Index append_response(std::vector<int>& ids, const Vocabulary& vocab) {
  const auto start = static_cast<Index>(ids.size());
  ids.push_back(vocab.id(Vocabulary::kAnswer));
  ids.push_back(vocab.id(Vocabulary::kColon));
  ids.push_back(vocab.base_id());
  ids.push_back(vocab.gen_id());
  ids.push_back(vocab.eos_id());
  return start;
}

// ---------------------------------------------------------------- model

namespace {

Mat gaussian(Index rows, Index cols, Rng& rng, double std) {
  Mat m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = std * rng.normal();
  return m;
}

nn::TransformerConfig backbone_config(const LmConfig& c) {
  return nn::TransformerConfig{c.d_model, c.layers, c.heads, c.max_len, c.init_std};
}

}  // namespace

LmModel::LmModel(const LmConfig& config, const Vocabulary& vocab, std::uint64_t seed)
    : config_(config), vocab_(vocab) {
  Rng rng(seed);
  token_embedding = nn::Param("lm.token_embedding", gaussian(vocab.size(), config.d_model, rng, config.init_std));
  backbone = nn::Transformer("lm.backbone", backbone_config(config), rng);
  p_enc = nn::Mlp2("lm.p_enc", config.d_enc, config.proj_hidden, config.d_model, nn::Activation::Gelu, rng,
                   1.0 / std::sqrt(static_cast<double>(config.d_enc)), config.init_std);
  p_out = nn::Mlp2("lm.p_out", config.d_model, config.proj_hidden, config.d_enc, nn::Activation::Gelu, rng,
                   1.0 / std::sqrt(static_cast<double>(config.d_model)), config.init_std);
  lm_head = nn::Linear("lm.lm_head", config.d_model, vocab.size(), rng, config.init_std);
}

void LmModel::set_frozen_backbone(bool frozen) {
  frozen_ = frozen;
  backbone.set_frozen(frozen);
  token_embedding.frozen = false;
  token_embedding.trainable_rows.clear();
  if (frozen) {
    token_embedding.trainable_rows.assign(static_cast<std::size_t>(vocab_.size()), 0);
    for (int id : vocab_.new_token_ids()) token_embedding.trainable_rows[static_cast<std::size_t>(id)] = 1;
  }
}

nn::ParamList LmModel::params() {
  nn::ParamList out{&token_embedding};
  backbone.collect(out);
  p_enc.collect(out);
  p_out.collect(out);
  lm_head.collect(out);
  return out;
}

nn::ParamList LmModel::backbone_params() {
  nn::ParamList out;
  backbone.collect(out);
  return out;
}

Index LmModel::parameter_count() { return nn::parameter_count(params()); }

// ---------------------------------------------------------------- forward

namespace {

void check_input(const Embedding& e, int d_enc) {
  if (e.vec.size() != d_enc) {
    throw Error(ErrorCode::DimensionMismatch, "input embedding has dimension " + std::to_string(e.vec.size()) +
                                                  ", expected " + std::to_string(d_enc));
  }
  if (std::abs(e.vec.norm() - 1.0) > 1e-6) throw Error(ErrorCode::InvalidArgument, "input embedding is not normalized");
}

struct Substitution {
  EmbeddedSequence seq;
  nn::MlpCache p_enc_cache;
};

Substitution substitute(std::span<const int> ids, std::span<const SlotRef> slots, std::span<const Embedding> inputs,
                        const LmModel& model, bool keep_cache) {
  if (slots.size() != inputs.size()) {
    throw Error(ErrorCode::SlotArityMismatch, std::to_string(slots.size()) + " slots but " +
                                                  std::to_string(inputs.size()) + " multi-modal inputs");
  }
  const auto& cfg = model.config();
  const auto len = static_cast<Index>(ids.size());
  Substitution out;
  EmbeddedSequence& seq = out.seq;
  seq.ids.assign(ids.begin(), ids.end());
  seq.rows.resize(len, cfg.d_model);
  for (Index i = 0; i < len; ++i) {
    const int id = ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= model.vocab().size()) throw Error(ErrorCode::UnknownToken, "token id " + std::to_string(id));
    seq.rows.row(i) = model.token_embedding.value.row(id);
    if (id == model.vocab().base_id() && !seq.base_position) seq.base_position = i;
    if (id == model.vocab().gen_id() && !seq.gen_position) seq.gen_position = i;
  }
  if (!slots.empty()) {
    Mat in(static_cast<Index>(inputs.size()), cfg.d_enc);
    for (std::size_t j = 0; j < inputs.size(); ++j) {
      check_input(inputs[j], cfg.d_enc);
      in.row(static_cast<Index>(j)) = inputs[j].vec.transpose();
    }
    Mat projected = model.p_enc.forward(in, keep_cache ? &out.p_enc_cache : nullptr);
    Index prev = -1;
    for (std::size_t j = 0; j < slots.size(); ++j) {
      const Index pos = slots[j].position;
      if (pos <= prev || pos >= len) throw Error(ErrorCode::ShapeMismatch, "slot positions must increase within the sequence");
      prev = pos;
      seq.rows.row(pos) = projected.row(static_cast<Index>(j));
      seq.slot_positions.push_back({pos, static_cast<Index>(j)});
    }
  }
  return out;
}

RowVec log_softmax_row(const RowVec& logits) {
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log((logits.array() - mx).exp().sum());
  return (logits.array() - lse).matrix();
}

void check_target(const Embedding& t, Index d_enc, const char* what) {
  if (t.vec.size() != d_enc) throw Error(ErrorCode::ShapeMismatch, std::string(what) + " has the wrong dimension");
}

}  // namespace

EmbeddedSequence embed_and_substitute(std::span<const int> ids, std::span<const SlotRef> slots,
                                      std::span<const Embedding> inputs, const LmModel& model) {
  return substitute(ids, slots, inputs, model, false).seq;
}

LmOutput lm_forward_extract(const EmbeddedSequence& seq, const LmModel& model) {
  if (!seq.base_position) throw Error(ErrorCode::MissingSpecialToken, "sequence has no [base] token");
  if (!seq.gen_position) throw Error(ErrorCode::MissingSpecialToken, "sequence has no [gen] token");
  const nn::Segment seg{0, seq.rows.rows()};
  const Mat hidden = model.backbone.forward(seq.rows, std::span(&seg, 1));
  Mat picked(2, hidden.cols());
  picked.row(0) = hidden.row(*seq.base_position);
  picked.row(1) = hidden.row(*seq.gen_position);
  const Mat projected = model.p_out.forward(picked);
  LmOutput out;
  out.h_base = Embedding::raw(projected.row(0).transpose());
  out.h_gen = Embedding::raw(projected.row(1).transpose());
  out.token_logits = model.lm_head.forward(hidden);
  return out;
}

LossBreakdown llm_loss(const LmOutput& output, std::span<const int> ids, Index response_start,
                       const Embedding& target_base, const Embedding& target_gen) {
  const auto len = static_cast<Index>(ids.size());
  if (output.token_logits.rows() != len) throw Error(ErrorCode::ShapeMismatch, "logits rows != sequence length");
  if (response_start < 1 || response_start >= len) throw Error(ErrorCode::ShapeMismatch, "response start out of range");
  check_target(target_base, output.h_base.vec.size(), "target_base");
  check_target(target_gen, output.h_gen.vec.size(), "target_gen");
  LossBreakdown loss;
  // Logit row i predicts token i + 1; only response tokens are scored.
  for (Index i = response_start - 1; i + 1 < len; ++i) {
    const int target = ids[static_cast<std::size_t>(i + 1)];
    if (target < 0 || target >= output.token_logits.cols()) throw Error(ErrorCode::ShapeMismatch, "target id out of range");
    loss.ce -= log_softmax_row(output.token_logits.row(i))(target);
  }
  loss.ce /= static_cast<double>(len - response_start);
  loss.base_mse = (output.h_base.vec - target_base.vec).squaredNorm();
  loss.gen_mse = (output.h_gen.vec - target_gen.vec).squaredNorm();
  loss.total = loss.ce + loss.base_mse + loss.gen_mse;
  return loss;
}

// ---------------------------------------------------------------- training

LossBreakdown llm_batch_loss(const LmModel& model, std::span<const LmExample> batch) {
  if (batch.empty()) throw Error(ErrorCode::EmptyBatch, "llm batch is empty");
  LossBreakdown mean;
  for (const auto& ex : batch) {
    const EmbeddedSequence seq = embed_and_substitute(ex.ids, ex.slots, ex.inputs, model);
    const LossBreakdown l = llm_loss(lm_forward_extract(seq, model), ex.ids, ex.response_start, ex.target_base, ex.target_gen);
    mean.ce += l.ce;
    mean.base_mse += l.base_mse;
    mean.gen_mse += l.gen_mse;
    mean.total += l.total;
  }
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  mean.ce *= inv_b;
  mean.base_mse *= inv_b;
  mean.gen_mse *= inv_b;
  mean.total *= inv_b;
  return mean;
}

LossBreakdown llm_loss_and_grad(LmModel& model, std::span<const LmExample> batch) {
  if (batch.empty()) throw Error(ErrorCode::EmptyBatch, "llm batch is empty");
  const auto& cfg = model.config();
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  nn::ParamList params = model.params();
  nn::zero_grads(params);

  // Pack the batch into one row block; each example is its own causal segment.
  std::vector<nn::Segment> segments;
  std::vector<Substitution> subs;
  subs.reserve(batch.size());
  Index total = 0;
  for (const auto& ex : batch) {
    subs.push_back(substitute(ex.ids, ex.slots, ex.inputs, model, true));
    const auto& seq = subs.back().seq;
    if (!seq.base_position || !seq.gen_position) {
      throw Error(ErrorCode::MissingSpecialToken, "training sequence lacks [base] or [gen]");
    }
    check_target(ex.target_base, cfg.d_enc, "target_base");
    check_target(ex.target_gen, cfg.d_enc, "target_gen");
    segments.push_back({total, seq.rows.rows()});
    total += seq.rows.rows();
  }
  Mat x(total, cfg.d_model);
  for (std::size_t b = 0; b < batch.size(); ++b) x.middleRows(segments[b].start, segments[b].length) = subs[b].seq.rows;

  nn::TransformerCache tcache;
  const Mat hidden = model.backbone.forward(x, segments, &tcache);

  // Rows scored by the cross-entropy term and their targets.
  std::vector<Index> ce_rows;
  std::vector<int> ce_targets;
  std::vector<double> ce_weights;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& ex = batch[b];
    const auto len = static_cast<Index>(ex.ids.size());
    if (ex.response_start < 1 || ex.response_start >= len) throw Error(ErrorCode::ShapeMismatch, "response start out of range");
    const double w = inv_b / static_cast<double>(len - ex.response_start);
    for (Index i = ex.response_start - 1; i + 1 < len; ++i) {
      ce_rows.push_back(segments[b].start + i);
      ce_targets.push_back(ex.ids[static_cast<std::size_t>(i + 1)]);
      ce_weights.push_back(w);
    }
  }
  Mat ce_in(static_cast<Index>(ce_rows.size()), cfg.d_model);
  for (std::size_t r = 0; r < ce_rows.size(); ++r) ce_in.row(static_cast<Index>(r)) = hidden.row(ce_rows[r]);
  const Mat logits = model.lm_head.forward(ce_in);
  Mat dlogits(logits.rows(), logits.cols());
  LossBreakdown loss;
  for (Index r = 0; r < logits.rows(); ++r) {
    const RowVec lsm = log_softmax_row(logits.row(r));
    const auto t = static_cast<Index>(ce_targets[static_cast<std::size_t>(r)]);
    const double w = ce_weights[static_cast<std::size_t>(r)];
    loss.ce -= w * lsm(t);
    dlogits.row(r) = w * lsm.array().exp().matrix();
    dlogits(r, t) -= w;
  }

  Mat picked(2 * static_cast<Index>(batch.size()), cfg.d_model);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    picked.row(2 * static_cast<Index>(b)) = hidden.row(segments[b].start + *subs[b].seq.base_position);
    picked.row(2 * static_cast<Index>(b) + 1) = hidden.row(segments[b].start + *subs[b].seq.gen_position);
  }
  nn::MlpCache out_cache;
  const Mat projected = model.p_out.forward(picked, &out_cache);
  Mat dprojected(projected.rows(), projected.cols());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto rb = 2 * static_cast<Index>(b);
    const RowVec eb = projected.row(rb) - batch[b].target_base.vec.transpose();
    const RowVec eg = projected.row(rb + 1) - batch[b].target_gen.vec.transpose();
    loss.base_mse += inv_b * eb.squaredNorm();
    loss.gen_mse += inv_b * eg.squaredNorm();
    dprojected.row(rb) = 2.0 * inv_b * eb;
    dprojected.row(rb + 1) = 2.0 * inv_b * eg;
  }
  loss.total = loss.ce + loss.base_mse + loss.gen_mse;
  if (!std::isfinite(loss.total)) {
    nn::zero_grads(params);
    throw Error(ErrorCode::NonFiniteLoss, "llm loss is not finite");
  }

  Mat dhidden = Mat::Zero(hidden.rows(), hidden.cols());
  const Mat dce_in = model.lm_head.backward(ce_in, dlogits);
  for (std::size_t r = 0; r < ce_rows.size(); ++r) dhidden.row(ce_rows[r]) += dce_in.row(static_cast<Index>(r));
  const Mat dpicked = model.p_out.backward(out_cache, dprojected);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    dhidden.row(segments[b].start + *subs[b].seq.base_position) += dpicked.row(2 * static_cast<Index>(b));
    dhidden.row(segments[b].start + *subs[b].seq.gen_position) += dpicked.row(2 * static_cast<Index>(b) + 1);
  }
  const Mat dx = model.backbone.backward(tcache, segments, dhidden);

  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& seq = subs[b].seq;
    const Index start = segments[b].start;
    std::vector<char> is_slot(seq.ids.size(), 0);
    for (const auto& sp : seq.slot_positions) is_slot[static_cast<std::size_t>(sp.index)] = 1;
    for (std::size_t i = 0; i < seq.ids.size(); ++i) {
      if (!is_slot[i]) model.token_embedding.accumulate_row(seq.ids[i], dx.row(start + static_cast<Index>(i)));
    }
    if (!seq.slot_positions.empty()) {
      Mat dslots(static_cast<Index>(seq.slot_positions.size()), cfg.d_model);
      for (const auto& sp : seq.slot_positions) dslots.row(sp.ordinal) = dx.row(start + sp.index);
      model.p_enc.backward(subs[b].p_enc_cache, dslots);
    }
  }
  if (!nn::grads_finite(params)) {
    nn::zero_grads(params);
    throw Error(ErrorCode::NonFiniteLoss, "llm gradient is not finite");
  }
  return loss;
}

LossBreakdown llm_train_step(LmModel& model, std::span<const LmExample> batch, nn::Optimizer& optimizer, int stage) {
  if (stage != 1 && stage != 2) throw Error(ErrorCode::InvalidArgument, "stage must be 1 or 2");
  if (stage == 1 && !model.frozen_backbone()) {
    throw Error(ErrorCode::InvalidArgument, "stage 1 requires a frozen backbone");
  }
  if (stage == 2 && model.frozen_backbone()) model.set_frozen_backbone(false);
  LossBreakdown loss = llm_loss_and_grad(model, batch);
  optimizer.step(model.params());
  return loss;
}

std::vector<int> greedy_decode(const LmModel& model, std::span<const int> prompt, std::span<const SlotRef> slots,
                               std::span<const Embedding> inputs, int max_new) {
  std::vector<int> ids(prompt.begin(), prompt.end());
  for (int step = 0; step < max_new; ++step) {
    if (static_cast<int>(ids.size()) >= model.config().max_len) break;
    const EmbeddedSequence seq = embed_and_substitute(ids, slots, inputs, model);
    const nn::Segment seg{0, seq.rows.rows()};
    const Mat hidden = model.backbone.forward(seq.rows, std::span(&seg, 1));
    const Mat logits = model.lm_head.forward(hidden.bottomRows(1));
    Index next = 0;
    logits.row(0).maxCoeff(&next);
    ids.push_back(static_cast<int>(next));
    if (next == model.vocab().eos_id()) break;
  }
  return ids;
}

}  // namespace mmedit
