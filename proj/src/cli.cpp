#include "mmedit/cli.hpp"

#include "mmedit/checkpoint.hpp"
#include "mmedit/edit_pipeline.hpp"
#include "mmedit/eval.hpp"
#include "mmedit/grad_check.hpp"
#include "mmedit/io.hpp"
#include "mmedit/training.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <sstream>

namespace mmedit {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct GenWorldArgs {
  std::uint64_t seed = 0;
  double gap = WorldConfig{}.gap;
  int concepts = WorldConfig{}.num_concepts;
  std::string out;
};

struct GenDataArgs {
  std::string world;
  std::string out_dir;
  std::uint64_t seed = 0;
  std::size_t count = 5000;
  std::size_t finetune = 500;
  double p = 0.5;
};

struct TrainArgs {
  std::string target;
  std::optional<double> lr;
  std::optional<int> steps;
  std::optional<int> batch;
  std::uint64_t seed = 0;
  std::string corpus;
  std::string world;
  std::string in;
  std::string out;
  std::string curve;
  std::string replay;
  double replay_fraction = kStandardReplayFraction;
};

struct EditArgs {
  std::string checkpoint;
  std::string instruction;
  std::string inputs;
  EditControls controls;
  std::string out;
};

struct EvalArgs {
  std::string checkpoint;
  std::string corpus;
  std::size_t limit = 0;
  EditControls controls;
  std::string details;
};

struct GradCheckArgs {
  double tol = 1e-4;
  std::uint64_t seed = 0;
};

void add_controls(CLI::App* app, EditControls& c) {
  app->add_option("--alpha", c.alpha, "latent mixing weight in [0, 1]")->check(CLI::Range(0.0, 1.0));
  app->add_option("--beta", c.beta, "source condition strength, >= 0")->check(CLI::NonNegativeNumber);
  app->add_option("--f", c.f, "aesthetic score in [1, 10]")->check(CLI::Range(1.0, 10.0));
  app->add_option("--steps", c.steps, "DDIM steps (must divide 50)")->check(CLI::IsMember({1, 2, 5, 10, 25, 50}));
  app->add_option("--seed", c.seed, "seed for the mixing noise");
}

ConceptWorld load_world_file(const std::string& path) {
  if (path.empty()) throw Error(ErrorCode::MissingCheckpoint, "no world file given");
  if (!fs::exists(path)) throw Error(ErrorCode::MissingCheckpoint, "world file " + path + " not found");
  return ConceptWorld::load(path);
}

void run_gen_world(const GenWorldArgs& a, std::ostream& out) {
  WorldConfig config;
  config.gap = a.gap;
  config.num_concepts = a.concepts;
  const ConceptWorld world = ConceptWorld::generate(a.seed, config);
  world.save(a.out);
  out << "world " << a.out << " concepts=" << world.num_concepts() << " fingerprint=" << world.fingerprint() << '\n';
}

void run_gen_data(const GenDataArgs& a, std::ostream& out) {
  const ConceptWorld world = load_world_file(a.world);
  if (a.finetune > a.count) throw Error(ErrorCode::InvalidArgument, "--finetune exceeds --count");
  const auto mix = default_kind_mix();
  const auto records = synth_corpus(world, a.count, a.seed, mix, a.p);
  std::vector<InstructionRecord> finetune;
  finetune.reserve(a.finetune);
  for (std::size_t i = 0; i < a.finetune; ++i) finetune.push_back(finetune_view(records[i]));
  const fs::path dir(a.out_dir);
  fs::create_directories(dir);
  write_corpus(records, dir / "pretrain.jsonl");
  write_corpus(finetune, dir / "finetune.jsonl");
  CorpusManifest manifest{a.seed, a.count, a.finetune, mix, a.p, world.fingerprint()};
  io::write_text(dir / "manifest.json", manifest_to_json(manifest));
  out << "corpus " << dir.string() << " pretrain=" << records.size() << " finetune=" << finetune.size() << '\n';
}

void require_corpus(const std::string& path, TrainTarget target) {
  if (path.empty()) {
    throw Error(ErrorCode::InvalidArgument, std::string(to_string(target)) + " needs --corpus");
  }
  if (!fs::exists(path)) throw Error(ErrorCode::Io, "corpus " + path + " not found");
}

void run_train(const TrainArgs& a, std::ostream& out) {
  TrainConfig config = standard_config(parse_train_target(a.target));
  if (a.lr) config.lr = *a.lr;
  if (a.steps) config.steps = *a.steps;
  if (a.batch) config.batch = *a.batch;
  config.seed = a.seed;
  config.corpus = a.corpus;
  config.world = a.world;
  config.validate();

  Checkpoint ck;
  if (!a.in.empty()) ck = load_checkpoint(a.in);
  if (!a.world.empty()) {
    ConceptWorld world = load_world_file(a.world);
    if (ck.world && !(*ck.world == world)) {
      throw Error(ErrorCode::InvalidArgument, "--world differs from the world stored in " + a.in);
    }
    ck.world = std::move(world);
  }
  if (!ck.world) throw Error(ErrorCode::MissingCheckpoint, "training needs --world or a checkpoint with a WORLD section");
  const ConceptWorld& world = *ck.world;
  const SceneLatentMap latent_map = make_latent_map(world);
  const NoiseSchedule sched = NoiseSchedule::linear();

  LossCurve curve;
  switch (config.target) {
    case TrainTarget::Prior: {
      PriorModel model(PriorConfig{}, mix_seed(config.seed, 1));
      curve = train_prior(world, model, config);
      ck.prior = std::move(model);
      break;
    }
    case TrainTarget::Diffusion: {
      Denoiser model(DenoiserConfig{}, mix_seed(config.seed, 2));
      curve = train_diffusion(world, model, latent_map, sched, config);
      ck.diffusion = std::move(model);
      break;
    }
    case TrainTarget::LmStage1: {
      if (!ck.prior) throw Error(ErrorCode::MissingCheckpoint, "lm-stage1 needs a checkpoint with a PRIOR section (--in)");
      require_corpus(a.corpus, config.target);
      const auto records = load_corpus(a.corpus);
      LmModel model(LmConfig{}, instruction_vocabulary(world), mix_seed(config.seed, 3));
      const auto examples = build_lm_examples(world, model.vocab(), records, *ck.prior, 1);
      curve = train_lm(model, examples, config, 1);
      ck.lm = std::move(model);
      ck.lm_stage = 1;
      break;
    }
    case TrainTarget::LmStage2: {
      if (!ck.lm || ck.lm_stage < 1) {
        throw Error(ErrorCode::MissingCheckpoint, "lm-stage2 needs an lm-stage1 checkpoint (--in)");
      }
      if (!ck.prior || !ck.diffusion) {
        throw Error(ErrorCode::MissingCheckpoint, "lm-stage2 needs PRIOR and DIFF sections for pseudo targets");
      }
      require_corpus(a.corpus, config.target);
      auto records = load_corpus(a.corpus);
      const std::size_t low = attach_pseudo_targets(world, records, *ck.diffusion, latent_map, sched);
      out << "pseudo_targets=" << records.size() << " low_fidelity=" << low << '\n';
      std::vector<InstructionRecord> replay;
      if (!a.replay.empty()) {
        require_corpus(a.replay, config.target);
        replay = load_corpus(a.replay);
      }
      curve = train_lm(*ck.lm, world, records, *ck.prior, config, 2,
                       LmAugment{.resample_modalities = true, .replay = replay, .replay_fraction = a.replay_fraction});
      ck.lm_stage = 2;
      break;
    }
  }
  save_checkpoint(ck, a.out);
  const std::string curve_path = a.curve.empty() ? a.out + ".loss.csv" : a.curve;
  io::write_text(curve_path, curve.to_text());
  out << "trained " << to_string(config.target) << " steps=" << config.steps << " final_loss=" << curve.losses.back()
      << " checkpoint=" << a.out << " curve=" << curve_path << '\n';
}

// Asset spec file: a JSON array of {"concepts": [[name or id, weight], ...],
// "modality": "image", "style": 0, "quality": 6.5}; style and quality optional.
std::vector<MultimodalAsset> read_inputs(const ConceptWorld& world, const std::string& path) {
  if (!fs::exists(path)) throw Error(ErrorCode::Io, "inputs file " + path + " not found");
  json doc;
  try {
    doc = json::parse(io::read_text(path));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedRecord, path + ": " + e.what());
  }
  if (!doc.is_array()) throw Error(ErrorCode::MalformedRecord, path + ": expected a JSON array of assets");
  std::vector<MultimodalAsset> out;
  for (const auto& j : doc) {
    try {
      MultimodalAsset a;
      for (const auto& c : j.at("concepts")) {
        ConceptId id = 0;
        if (c.at(0).is_string()) {
          const auto name = c.at(0).get<std::string>();
          const auto found = world.find_concept(name);
          if (!found) throw Error(ErrorCode::UnknownConcept, "unknown concept '" + name + "'");
          id = *found;
        } else {
          id = c.at(0).get<ConceptId>();
        }
        a.concepts.push_back({id, c.at(1).get<double>()});
      }
      a.modality = parse_modality(j.at("modality").get<std::string>());
      a.style = j.value("style", 0.0);
      a.quality = j.value("quality", kDefaultAestheticScore);
      validate_asset(world, a);
      out.push_back(std::move(a));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::MalformedRecord, path + ": " + e.what());
    }
  }
  return out;
}

struct LoadedModels {
  Checkpoint ck;
  SceneLatentMap latent_map;
  LatentRenderer renderer;
  NoiseSchedule sched;

  PipelineModels view() const {
    return {*ck.world, *ck.lm, *ck.prior, *ck.diffusion, latent_map, renderer, sched};
  }
};

LoadedModels load_pipeline(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  if (!ck.world || !ck.lm || !ck.prior || !ck.diffusion) {
    throw Error(ErrorCode::MissingCheckpoint, path + " lacks one of the WORLD, LM, PRIOR, DIFF sections");
  }
  SceneLatentMap map = make_latent_map(*ck.world);
  LatentRenderer renderer = make_renderer(*ck.world);
  return {std::move(ck), std::move(map), std::move(renderer), NoiseSchedule::linear()};
}

void run_edit_cmd(const EditArgs& a, std::ostream& out) {
  const LoadedModels m = load_pipeline(a.checkpoint);
  EditRequest request{a.instruction, read_inputs(*m.ck.world, a.inputs), a.controls};
  const EditResult result = edit(request, m.view());
  const std::string report = edit_report(result, a.controls, m.ck.lm->vocab());
  out << report;
  if (!a.out.empty()) {
    io::write_text(a.out + ".txt", report);
    io::write_text(a.out + ".pgm", to_pgm(result.rendered));
  }
}

void run_eval(const EvalArgs& a, std::ostream& out) {
  const LoadedModels m = load_pipeline(a.checkpoint);
  auto records = load_corpus(a.corpus);
  if (a.limit > 0 && records.size() > a.limit) records.resize(a.limit);
  const EvalReport report = eval_metrics(records, m.view(), a.controls);
  out << report.to_text();
  if (!a.details.empty()) {
    std::ostringstream os;
    os.precision(17);
    os << "id,kinds,sim_dir,sim_im,sim_out,sim_src_tgt,retrieved_base,candidates,decode_fallback\n";
    for (const auto& r : report.records) {
      os << r.id << ',' << kind_list_name(r.edit_kinds) << ',' << r.sim_dir << ',' << r.sim_im << ',' << r.sim_out
         << ',' << r.sim_src_tgt << ',' << r.retrieved_base << ',' << r.candidates << ',' << r.decode_fallback << '\n';
    }
    io::write_text(a.details, os.str());
  }
}

int run_grad_check(const GradCheckArgs& a, std::ostream& out) {
  GradCheckOptions options;
  options.seed = a.seed;
  bool ok = true;
  const std::pair<const char*, std::function<GradCheckReport()>> checks[] = {
      {"llm", [&] { return check_llm_gradients(false, a.seed, options); }},
      {"llm-frozen", [&] { return check_llm_gradients(true, a.seed, options); }},
      {"prior", [&] { return check_prior_gradients(a.seed, options); }},
      {"diffusion", [&] { return check_diffusion_gradients(a.seed, options); }},
  };
  for (const auto& [name, run] : checks) {
    const GradCheckReport report = run();
    const bool passed = report.passed(a.tol);
    ok = ok && passed;
    out << "# " << name << (passed ? " PASS" : " FAIL") << " max_rel_err=" << report.max_rel_err() << '\n'
        << report.to_text();
  }
  return ok ? 0 : 2;
}

void run_inspect(const std::string& path, std::ostream& out) {
  if (!fs::exists(path)) throw Error(ErrorCode::MissingCheckpoint, "checkpoint " + path + " not found");
  const auto bytes = io::read_file(path);
  for (const auto& s : inspect_checkpoint(bytes)) {
    out << s.name << " bytes=" << s.bytes << " parameters=" << s.parameters << '\n';
  }
  const Checkpoint ck = deserialize_checkpoint(bytes);
  if (ck.lm) out << "lm_stage=" << ck.lm_stage << '\n';
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multimodal instruction editing over a synthetic concept world", "mmedit"};
  app.require_subcommand(1);

  GenWorldArgs gw;
  auto* gen_world = app.add_subcommand("gen-world", "generate a concept world");
  gen_world->add_option("--seed", gw.seed, "world seed");
  gen_world->add_option("--gap", gw.gap, "modality gap")->check(CLI::NonNegativeNumber);
  gen_world->add_option("--concepts", gw.concepts, "number of concepts")->check(CLI::Range(2, 4096));
  gen_world->add_option("--out", gw.out, "output world file")->required();

  GenDataArgs gd;
  auto* gen_data = app.add_subcommand("gen-data", "synthesize the pretrain / fine-tune instruction corpora");
  gen_data->add_option("--world", gd.world, "world file")->required();
  gen_data->add_option("--out-dir", gd.out_dir, "output directory")->required();
  gen_data->add_option("--seed", gd.seed, "corpus seed");
  gen_data->add_option("--count", gd.count, "pretrain records")->check(CLI::PositiveNumber);
  gen_data->add_option("--finetune", gd.finetune, "fine-tune records (a prefix of the pretrain ids)");
  gen_data->add_option("--p", gd.p, "slot substitution probability")->check(CLI::Range(0.0, 1.0));

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "train one module and write a checkpoint");
  train->add_option("--target", tr.target, "prior | diffusion | lm-stage1 | lm-stage2")
      ->required()
      ->check(CLI::IsMember({"prior", "diffusion", "lm-stage1", "lm-stage2"}));
  train->add_option("--lr", tr.lr, "learning rate")->check(CLI::PositiveNumber);
  train->add_option("--steps", tr.steps, "optimizer steps")->check(CLI::PositiveNumber);
  train->add_option("--batch", tr.batch, "batch size")->check(CLI::PositiveNumber);
  train->add_option("--seed", tr.seed, "training seed");
  train->add_option("--corpus", tr.corpus, "corpus (lm stages)");
  train->add_option("--world", tr.world, "world file");
  train->add_option("--in", tr.in, "input checkpoint");
  train->add_option("--out", tr.out, "output checkpoint")->required();
  train->add_option("--curve", tr.curve, "loss curve path (default <out>.loss.csv)");
  train->add_option("--replay", tr.replay, "lm-stage2: pretrain corpus mixed into the fine-tune draws");
  train->add_option("--replay-fraction", tr.replay_fraction, "lm-stage2: share of draws taken from --replay")
      ->check(CLI::Range(0.0, 1.0));

  EditArgs ed;
  auto* edit_cmd = app.add_subcommand("edit", "run the editing pipeline on one request");
  edit_cmd->add_option("--checkpoint", ed.checkpoint, "checkpoint with all four sections")->required();
  edit_cmd->add_option("--instruction", ed.instruction, "instruction with [image] / [audio] / [slot] markers")
      ->required();
  edit_cmd->add_option("--inputs", ed.inputs, "JSON asset spec file, one asset per marker")->required();
  add_controls(edit_cmd, ed.controls);
  edit_cmd->add_option("--out", ed.out, "write <out>.txt report and <out>.pgm render");

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "evaluate the pipeline on a corpus");
  eval->add_option("--checkpoint", ev.checkpoint, "checkpoint with all four sections")->required();
  eval->add_option("--corpus", ev.corpus, "corpus with oracle targets")->required();
  eval->add_option("--limit", ev.limit, "evaluate only the first N records");
  eval->add_option("--details", ev.details, "per-record CSV output");
  add_controls(eval, ev.controls);

  GradCheckArgs gc;
  auto* grad = app.add_subcommand("grad-check", "finite-difference gradient checks of every loss");
  grad->add_option("--tol", gc.tol, "relative error tolerance")->check(CLI::PositiveNumber);
  grad->add_option("--seed", gc.seed, "seed");

  std::string inspect_path;
  auto* inspect = app.add_subcommand("inspect", "list checkpoint sections and parameter counts");
  inspect->add_option("checkpoint", inspect_path, "checkpoint file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n';
    return 1;
  }

  try {
    if (gen_world->parsed()) run_gen_world(gw, out);
    if (gen_data->parsed()) run_gen_data(gd, out);
    if (train->parsed()) run_train(tr, out);
    if (edit_cmd->parsed()) run_edit_cmd(ed, out);
    if (eval->parsed()) run_eval(ev, out);
    if (grad->parsed()) return run_grad_check(gc, out);
    if (inspect->parsed()) run_inspect(inspect_path, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

}  // namespace mmedit
