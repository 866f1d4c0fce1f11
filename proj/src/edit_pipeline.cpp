#include "mmedit/edit_pipeline.hpp"

#include "mmedit/mm_inst_synth.hpp"

#include <cmath>
#include <sstream>

namespace mmedit {

void EditControls::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error(ErrorCode::InvalidArgument, "alpha must lie in [0, 1]");
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw Error(ErrorCode::InvalidArgument, "beta must be finite and >= 0");
  if (!(f >= 1.0 && f <= 10.0)) throw Error(ErrorCode::ScoreOutOfRange, "f must lie in [1, 10]");
  if (steps < 1) throw Error(ErrorCode::StepOutOfRange, "steps must be positive");
}

int retrieve_base(const Embedding& h_base, std::span<const RetrievalCandidate> candidates) {
  int best = -1;
  double best_cos = -2.0;
  for (const auto& c : candidates) {
    if (c.modality != Modality::Image) continue;
    const double cs = cosine(h_base.vec, c.embedding.vec);
    if (cs > best_cos || (cs == best_cos && c.index < best)) {
      best = c.index;
      best_cos = cs;
    }
  }
  if (best < 0) throw Error(ErrorCode::NoImageCandidate, "no Image-modality input to edit");
  return best;
}

Vec mix_latent(const Vec& z, double alpha, Rng& rng) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error(ErrorCode::InvalidArgument, "alpha must lie in [0, 1]");
  const Vec eps = rng.normal_vec(z.size());
  const double zn = z.norm();
  if (zn == 0.0) return Vec::Zero(z.size());
  if (alpha == 1.0) return z;
  const Vec mixed = alpha * z + (1.0 - alpha) * eps;
  const double mn = mixed.norm();
  if (mn == 0.0) return z;
  return mixed * (zn / mn);
}

Embedding mix_condition(const Embedding& h_gen, const Embedding& h_k, double beta, const PriorFn& prior, double f) {
  if (!(beta >= 0.0)) throw Error(ErrorCode::InvalidArgument, "beta must be >= 0");
  if (h_gen.vec.size() != h_k.vec.size()) throw Error(ErrorCode::DimensionMismatch, "h_gen and h_k differ in size");
  if (std::abs(h_k.vec.norm() - 1.0) > 1e-6) throw Error(ErrorCode::InvalidArgument, "h_k must be normalized");
  const Vec sum = prior(h_gen.vec, f) + h_gen.vec + beta * h_k.vec;
  return Embedding{l2_normalize(sum), std::nullopt, true};
}

Embedding mix_condition(const Embedding& h_gen, const Embedding& h_k, double beta, const PriorModel& prior, double f) {
  const PriorFn fn = [&prior](const Vec& h, double score) {
    return prior_forward(prior, Embedding::raw(h), score, Modality::Image).vec;
  };
  return mix_condition(h_gen, h_k, beta, fn, f);
}

PreparedPrompt prepare_prompt(const ConceptWorld& world, const Vocabulary& vocab, std::string_view instruction,
                              std::span<const MultimodalAsset> inputs) {
  std::istringstream in{std::string(instruction)};
  std::string word;
  std::string text;
  PreparedPrompt out;
  std::size_t next = 0;
  while (in >> word) {
    const bool marker = word == kSlotMarker || word == Vocabulary::kImage || word == Vocabulary::kAudio;
    if (marker) {
      if (next >= inputs.size()) {
        throw Error(ErrorCode::SlotArityMismatch, "instruction has more slot markers than inputs");
      }
      const MultimodalAsset& asset = inputs[next++];
      validate_asset(world, asset);
      if ((word == Vocabulary::kImage && asset.modality != Modality::Image) ||
          (word == Vocabulary::kAudio && asset.modality != Modality::Audio)) {
        throw Error(ErrorCode::InvalidArgument, "marker " + word + " does not match input modality " +
                                                    std::string(to_string(asset.modality)));
      }
      switch (asset.modality) {
        case Modality::Image: word = std::string(Vocabulary::kImage); break;
        case Modality::Audio: word = std::string(Vocabulary::kAudio); break;
        case Modality::Text: word = slot_caption(world, asset); break;
      }
      if (asset.modality != Modality::Text) {
        out.embeddings.push_back(encode_asset(world, asset));
        out.assets.push_back(asset);
        out.input_indices.push_back(static_cast<int>(next - 1));
      }
    }
    if (!text.empty()) text += ' ';
    text += word;
  }
  if (next != inputs.size()) {
    throw Error(ErrorCode::SlotArityMismatch, std::to_string(next) + " slot markers but " + std::to_string(inputs.size()) +
                                                  " inputs");
  }
  TokenizedInstruction tok = tokenize_instruction(text, vocab);
  out.ids = std::move(tok.ids);
  out.slots = std::move(tok.slots);
  return out;
}

namespace {

template <typename F>
auto staged(const char* stage, F&& body) {
  try {
    return body();
  } catch (const Error& e) {
    throw Error(e.code(), std::string(stage) + ": " + e.what());
  }
}

bool has_token(const std::vector<int>& ids, int id, std::size_t from) {
  for (std::size_t i = from; i < ids.size(); ++i)
    if (ids[i] == id) return true;
  return false;
}

}  // namespace

void generate_from_source(const MultimodalAsset& source, const EditControls& controls, const PipelineModels& models,
                          EditResult& result) {
  const Embedding h_k = encode_asset(models.world, source);
  staged("invert", [&] {
    result.z_source = models.latent_map.ground_truth(models.world, source);
    result.z_inverted = ddim_invert(models.diffusion, result.z_source, h_k, models.sched, controls.steps);
    return 0;
  });
  Rng rng(controls.seed);
  result.z_mixed = staged("mix_latent", [&] { return mix_latent(result.z_inverted, controls.alpha, rng); });
  result.h_gen_mixed = staged("mix_condition", [&] {
    return mix_condition(result.h_gen, h_k, controls.beta, models.prior, controls.f);
  });
  result.z_out = staged("sample", [&] {
    return ddim_sample(models.diffusion, result.z_mixed, result.h_gen_mixed, models.sched, controls.steps);
  });
  result.output_embedding = models.latent_map.reencode(result.z_out);
  result.rendered = models.renderer.render(result.z_out);
}

EditResult run_edit(const PreparedPrompt& prompt, const EditControls& controls, const PipelineModels& models) {
  staged("controls", [&] {
    controls.validate();
    if (prompt.embeddings.size() != prompt.slots.size() || prompt.assets.size() != prompt.slots.size() ||
        prompt.input_indices.size() != prompt.slots.size()) {
      throw Error(ErrorCode::SlotArityMismatch, "prompt slots, features and assets disagree in count");
    }
    return 0;
  });
  const Vocabulary& vocab = models.lm.vocab();
  EditResult result;
  staged("decode", [&] {
    result.decoded_ids = greedy_decode(models.lm, prompt.ids, prompt.slots, prompt.embeddings);
    const std::size_t from = prompt.ids.size();
    if (!has_token(result.decoded_ids, vocab.base_id(), from) || !has_token(result.decoded_ids, vocab.gen_id(), from)) {
      result.decoded_ids = prompt.ids;
      append_response(result.decoded_ids, vocab);
      result.decode_fallback = true;
    }
    return 0;
  });
  staged("lm", [&] {
    const EmbeddedSequence seq = embed_and_substitute(result.decoded_ids, prompt.slots, prompt.embeddings, models.lm);
    const LmOutput out = lm_forward_extract(seq, models.lm);
    result.h_base = out.h_base.normalized_copy();
    result.h_gen = out.h_gen.normalized_copy();
    return 0;
  });
  const int slot = staged("retrieve", [&] {
    std::vector<RetrievalCandidate> candidates;
    for (std::size_t i = 0; i < prompt.slots.size(); ++i) {
      candidates.push_back({static_cast<int>(i), prompt.embeddings[i], prompt.assets[i].modality});
    }
    return retrieve_base(result.h_base, candidates);
  });
  result.base_index = prompt.input_indices[static_cast<std::size_t>(slot)];
  generate_from_source(prompt.assets[static_cast<std::size_t>(slot)], controls, models, result);
  return result;
}

EditResult edit(const EditRequest& request, const PipelineModels& models) {
  const PreparedPrompt prompt = staged(
      "tokenize", [&] { return prepare_prompt(models.world, models.lm.vocab(), request.instruction, request.inputs); });
  return run_edit(prompt, request.controls, models);
}

std::string edit_report(const EditResult& r, const EditControls& c, const Vocabulary& vocab) {
  std::ostringstream os;
  os.precision(17);
  os << "decode tokens=\"" << detokenize(r.decoded_ids, vocab) << "\" fallback=" << (r.decode_fallback ? 1 : 0) << '\n';
  os << "lm h_base_norm=" << r.h_base.vec.norm() << " h_gen_norm=" << r.h_gen.vec.norm() << '\n';
  os << "retrieve base_index=" << r.base_index << '\n';
  os << "invert steps=" << c.steps << " z_source_norm=" << r.z_source.norm() << " z_inverted_norm=" << r.z_inverted.norm()
     << '\n';
  os << "mix_latent alpha=" << c.alpha << " seed=" << c.seed << " z_mixed_norm=" << r.z_mixed.norm() << '\n';
  os << "mix_condition beta=" << c.beta << " f=" << c.f << " h_gen_mixed_norm=" << r.h_gen_mixed.vec.norm()
     << " cos_h_gen=" << cosine(r.h_gen_mixed.vec, r.h_gen.vec) << '\n';
  os << "sample z_out_norm=" << r.z_out.norm() << " cos_source=" << cosine(r.z_out, r.z_source) << '\n';
  os << "render grid=" << r.rendered.rows() << 'x' << r.rendered.cols() << '\n';
  return os.str();
}

}  // namespace mmedit
