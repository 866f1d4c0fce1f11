#include "mmedit/eval.hpp"

#include <algorithm>
#include <sstream>

namespace mmedit {

double sim_dir(const Vec& e_out, const Vec& e_src, const Vec& e_tgt) {
  const Vec a = e_out - e_src;
  const Vec b = e_tgt - e_src;
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

namespace {

std::vector<const InstructionSlot*> marker_order(const InstructionRecord& record) {
  std::vector<const InstructionSlot*> out;
  for (const auto& s : record.slots) out.push_back(&s);
  std::sort(out.begin(), out.end(), [](const auto* a, const auto* b) { return a->marker < b->marker; });
  return out;
}

}  // namespace

PreparedPrompt record_prompt(const ConceptWorld& world, const Vocabulary& vocab, const InstructionRecord& record,
                             const PriorModel& prior, double f) {
  TokenizedInstruction tok = tokenize_instruction(prompt_text(world, record), vocab);
  PreparedPrompt p;
  p.ids = std::move(tok.ids);
  p.slots = std::move(tok.slots);
  p.embeddings = slot_embeddings(world, record, &prior, f);
  const auto ordered = marker_order(record);
  for (std::size_t i = 0; i < ordered.size(); ++i) {
    if (ordered[i]->modality == Modality::Text) continue;
    p.assets.push_back(ordered[i]->asset.as(ordered[i]->modality));
    p.input_indices.push_back(static_cast<int>(i));
  }
  return p;
}

int designated_base(const InstructionRecord& record) {
  const auto ordered = marker_order(record);
  for (std::size_t i = 0; i < ordered.size(); ++i)
    if (ordered[i]->role == SlotRole::Base) return static_cast<int>(i);
  throw Error(ErrorCode::MalformedRecord, "record " + std::to_string(record.id) + " has no base slot");
}

EvalReport eval_metrics(std::span<const InstructionRecord> records, const PipelineModels& models,
                        const EditControls& controls) {
  if (records.empty()) throw Error(ErrorCode::EmptyCorpus, "evaluation corpus is empty");
  EvalReport report;
  for (const auto& r : records) {
    const PreparedPrompt prompt = record_prompt(models.world, models.lm.vocab(), r, models.prior, controls.f);
    const EditResult result = run_edit(prompt, controls, models);
    const Vec e_src = encode_asset(models.world, r.base_asset).vec;
    const Vec e_tgt = encode_asset(models.world, r.oracle_target).vec;
    const Vec& e_out = result.output_embedding.vec;
    EvalRecord e;
    e.id = r.id;
    e.edit_kinds = r.edit_kinds;
    e.sim_dir = sim_dir(e_out, e_src, e_tgt);
    e.sim_im = cosine(e_out, e_src);
    e.sim_out = cosine(e_out, e_tgt);
    e.sim_src_tgt = cosine(e_src, e_tgt);
    e.retrieved_base = result.base_index == designated_base(r);
    e.candidates = static_cast<int>(prompt.assets.size());
    e.decode_fallback = result.decode_fallback;
    report.sim_dir += e.sim_dir;
    report.sim_im += e.sim_im;
    report.sim_out += e.sim_out;
    report.retrieval_accuracy += e.retrieved_base ? 1.0 : 0.0;
    report.records.push_back(std::move(e));
  }
  report.n = records.size();
  const auto n = static_cast<double>(report.n);
  report.sim_dir /= n;
  report.sim_im /= n;
  report.sim_out /= n;
  report.retrieval_accuracy /= n;
  return report;
}

std::string EvalReport::to_text() const {
  std::ostringstream os;
  os.precision(17);
  os << "sim_dir=" << sim_dir << '\n'
     << "sim_im=" << sim_im << '\n'
     << "sim_out=" << sim_out << '\n'
     << "retrieval_accuracy=" << retrieval_accuracy << '\n'
     << "n=" << n << '\n';
  return os.str();
}

}  // namespace mmedit
