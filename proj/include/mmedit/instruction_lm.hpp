#pragma once

#include "mmedit/nn.hpp"
#include "mmedit/unified_space.hpp"

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mmedit {

// Closed word-level vocabulary. Always contains the slot placeholders, the
// [base]/[gen]/[eos] output tokens and the response prefix "answer :".
class Vocabulary {
 public:
  static constexpr std::string_view kImage = "[image]";
  static constexpr std::string_view kAudio = "[audio]";
  static constexpr std::string_view kBase = "[base]";
  static constexpr std::string_view kGen = "[gen]";
  static constexpr std::string_view kEos = "[eos]";
  static constexpr std::string_view kAnswer = "answer";
  static constexpr std::string_view kColon = ":";

  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}
  // Missing special tokens are appended; duplicates are rejected.
  explicit Vocabulary(std::vector<std::string> tokens);

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  std::optional<int> find(std::string_view word) const;
  int id(std::string_view word) const;  // throws UnknownToken

  int image_id() const { return image_; }
  int audio_id() const { return audio_; }
  int base_id() const { return base_; }
  int gen_id() const { return gen_; }
  int eos_id() const { return eos_; }
  // Rows of the embedding table that stay trainable while the backbone is frozen.
  std::vector<int> new_token_ids() const { return {base_, gen_}; }

  std::string serialize() const;  // UTF-8, one token per line
  static Vocabulary parse(std::string_view text);
  std::uint64_t fingerprint() const;

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  int image_ = -1, audio_ = -1, base_ = -1, gen_ = -1, eos_ = -1;
};

struct SlotRef {
  Index position = 0;
  Modality modality = Modality::Image;
  friend bool operator==(const SlotRef&, const SlotRef&) = default;
};

struct TokenizedInstruction {
  std::vector<int> ids;
  std::vector<SlotRef> slots;
};

TokenizedInstruction tokenize_instruction(std::string_view text, const Vocabulary& vocab);
std::string detokenize(std::span<const int> ids, const Vocabulary& vocab);

// Appends "answer : [base] [gen] [eos]" and returns the index of the first
// response token.
Index append_response(std::vector<int>& ids, const Vocabulary& vocab);

struct LmConfig {
  int d_enc = 64;
  int d_model = 128;
  int layers = 2;
  int heads = 4;
  int max_len = 64;
  int proj_hidden = 128;
  double init_std = 0.02;
};

class LmModel {
 public:
  LmModel(const LmConfig& config, const Vocabulary& vocab, std::uint64_t seed);

  const LmConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }

  void set_frozen_backbone(bool frozen);
  bool frozen_backbone() const { return frozen_; }

  // Declaration order: token_embedding, backbone, p_enc, p_out, lm_head.
  nn::ParamList params();
  nn::ParamList backbone_params();
  Index parameter_count();

  nn::Param token_embedding;  // V x D_llm
  nn::Transformer backbone;
  nn::Mlp2 p_enc;             // D_enc -> D_llm
  nn::Mlp2 p_out;             // D_llm -> D_enc
  nn::Linear lm_head;         // D_llm -> V

 private:
  LmConfig config_;
  Vocabulary vocab_;
  bool frozen_ = false;
};

struct SlotPosition {
  Index index = 0;
  Index ordinal = 0;
};

struct EmbeddedSequence {
  Mat rows;  // L x D_llm
  std::vector<int> ids;
  std::vector<SlotPosition> slot_positions;
  std::optional<Index> base_position;
  std::optional<Index> gen_position;
};

EmbeddedSequence embed_and_substitute(std::span<const int> ids, std::span<const SlotRef> slots,
                                      std::span<const Embedding> inputs, const LmModel& model);

struct LmOutput {
  Embedding h_base;
  Embedding h_gen;
  Mat token_logits;  // L x V
};

LmOutput lm_forward_extract(const EmbeddedSequence& seq, const LmModel& model);

struct LossBreakdown {
  double ce = 0.0;
  double base_mse = 0.0;
  double gen_mse = 0.0;
  double total = 0.0;
};

// Cross-entropy over response positions + squared error of both extracted embeddings.
LossBreakdown llm_loss(const LmOutput& output, std::span<const int> ids, Index response_start,
                       const Embedding& target_base, const Embedding& target_gen);

// One teacher-forced training sample.
struct LmExample {
  std::vector<int> ids;  // prompt + response template
  std::vector<SlotRef> slots;
  std::vector<Embedding> inputs;
  Index response_start = 0;
  Embedding target_base;
  Embedding target_gen;
};

// Forward-only mean loss over the batch; the value llm_loss_and_grad differentiates.
LossBreakdown llm_batch_loss(const LmModel& model, std::span<const LmExample> batch);

// Mean training loss over the batch with gradients accumulated into the
// model's Param::grad (grads are zeroed first).
LossBreakdown llm_loss_and_grad(LmModel& model, std::span<const LmExample> batch);

// One optimizer step. Stage 1 requires a frozen backbone; stage 2 trains all
// parameters. Throws NonFiniteLoss without touching the parameters.
LossBreakdown llm_train_step(LmModel& model, std::span<const LmExample> batch, nn::Optimizer& optimizer, int stage);

// Greedy continuation of `prompt` until [eos] or `max_new` tokens.
std::vector<int> greedy_decode(const LmModel& model, std::span<const int> prompt, std::span<const SlotRef> slots,
                               std::span<const Embedding> inputs, int max_new = 8);

}  // namespace mmedit
