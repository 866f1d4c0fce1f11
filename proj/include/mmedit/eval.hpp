#pragma once

#include "mmedit/edit_pipeline.hpp"
#include "mmedit/mm_inst_synth.hpp"

#include <span>
#include <string>
#include <vector>

namespace mmedit {

struct EvalRecord {
  std::uint64_t id = 0;
  std::vector<EditKind> edit_kinds;
  double sim_dir = 0.0;
  double sim_im = 0.0;
  double sim_out = 0.0;
  double sim_src_tgt = 0.0;  // cos(e_src, e_tgt): sim_out of an edit that changed nothing
  bool retrieved_base = false;
  int candidates = 0;
  bool decode_fallback = false;
};

struct EvalReport {
  double sim_dir = 0.0;
  double sim_im = 0.0;
  double sim_out = 0.0;
  double retrieval_accuracy = 0.0;
  std::size_t n = 0;
  std::vector<EvalRecord> records;

  std::string to_text() const;  // "key=value" lines
};

// cos(out - src, tgt - src), 0 when either delta is the zero vector.
double sim_dir(const Vec& e_out, const Vec& e_src, const Vec& e_tgt);

// The pipeline's view of a corpus record: its prompt, slot features and the
// asset behind each non-text slot. input_indices are slot ordinals in marker order.
PreparedPrompt record_prompt(const ConceptWorld& world, const Vocabulary& vocab, const InstructionRecord& record,
                             const PriorModel& prior, double f = kDefaultAestheticScore);

// Marker-order ordinal of the record's base slot.
int designated_base(const InstructionRecord& record);

EvalReport eval_metrics(std::span<const InstructionRecord> records, const PipelineModels& models,
                        const EditControls& controls = {});

}  // namespace mmedit
