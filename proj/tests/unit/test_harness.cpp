#include "mmedit/checkpoint.hpp"
#include "mmedit/cli.hpp"
#include "mmedit/eval.hpp"
#include "mmedit/io.hpp"
#include "mmedit/training.hpp"

#include "expect_error.hpp"

#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <sstream>

#include <unistd.h>

using namespace mmedit;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() / ("mmedit_harness_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

struct CliRun {
  int code = 0;
  std::string out;
  std::string err;
};

CliRun cli(std::vector<std::string> args) {
  args.insert(args.begin(), "mmedit");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  CliRun r;
  r.code = cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

const ConceptWorld& world() {
  static const ConceptWorld w = ConceptWorld::generate(0);
  return w;
}

// Every section populated, small enough to corrupt byte by byte.
Checkpoint small_checkpoint() {
  Checkpoint ck;
  ck.world = world();
  LmConfig lc;
  lc.d_model = 16;
  lc.layers = 1;
  lc.heads = 2;
  lc.proj_hidden = 16;
  ck.lm.emplace(lc, instruction_vocabulary(world()), 1);
  ck.lm_stage = 1;
  PriorConfig pc;
  pc.width = 16;
  pc.layers = 1;
  pc.heads = 2;
  ck.prior.emplace(pc, 2);
  DenoiserConfig dc;
  dc.hidden = 16;
  ck.diffusion.emplace(dc, 3);
  return ck;
}

void check_params_equal(nn::ParamList a, nn::ParamList b) {
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i]->name == b[i]->name);
    CHECK(a[i]->value.rows() == b[i]->value.rows());
    CHECK(a[i]->value.cols() == b[i]->value.cols());
    CHECK(std::memcmp(a[i]->value.data(), b[i]->value.data(), sizeof(double) * a[i]->value.size()) == 0);
  }
}

}  // namespace

TEST_CASE("checkpoint round trip is bit exact") {
  Checkpoint ck = small_checkpoint();
  Rng rng(1);
  for (auto* p : ck.prior->params()) p->value += Mat::NullaryExpr(p->value.rows(), p->value.cols(), [&] { return rng.normal(); });
  const auto bytes = serialize_checkpoint(ck);
  Checkpoint back = deserialize_checkpoint(bytes);
  REQUIRE(back.world);
  CHECK(*back.world == *ck.world);
  CHECK(back.lm_stage == 1);
  CHECK(back.lm->config().d_model == 16);
  CHECK(back.lm->vocab() == ck.lm->vocab());
  check_params_equal(back.lm->params(), ck.lm->params());
  check_params_equal(back.prior->params(), ck.prior->params());
  check_params_equal(back.diffusion->params(), ck.diffusion->params());
  CHECK(serialize_checkpoint(back) == bytes);

  Checkpoint partial;
  partial.diffusion = ck.diffusion;
  const Checkpoint pb = deserialize_checkpoint(serialize_checkpoint(partial));
  CHECK_FALSE(pb.world);
  CHECK_FALSE(pb.lm);
  CHECK(pb.diffusion);
}

TEST_CASE("every single-byte corruption is detected") {
  Checkpoint ck;
  ck.world = world();
  DenoiserConfig dc;
  dc.d_z = 4;
  dc.hidden = 4;
  ck.diffusion.emplace(dc, 4);
  const auto bytes = serialize_checkpoint(ck);
  int undetected = 0;
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    auto bad = bytes;
    bad[i] ^= 0x5a;
    try {
      deserialize_checkpoint(bad);
      ++undetected;
    } catch (const Error&) {
    }
  }
  CHECK(undetected == 0);

  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 1;
  expect_error([&] { deserialize_checkpoint(flipped); }, ErrorCode::CrcMismatch);
}

TEST_CASE("checkpoint header errors") {
  const auto bytes = serialize_checkpoint(small_checkpoint());
  auto magic = bytes;
  magic[0] = 'X';
  expect_error([&] { deserialize_checkpoint(magic); }, ErrorCode::BadMagic);
  auto version = bytes;
  version[4] = 2;
  expect_error([&] { deserialize_checkpoint(version); }, ErrorCode::VersionUnsupported);
  std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + static_cast<long>(bytes.size() - 3));
  expect_error([&] { deserialize_checkpoint(cut); }, ErrorCode::Io);
  expect_error([] { load_checkpoint("/nonexistent/ck.bin"); }, ErrorCode::MissingCheckpoint);

  Checkpoint lm_only;
  lm_only.lm = small_checkpoint().lm;
  expect_error([&] { serialize_checkpoint(lm_only); }, ErrorCode::MissingCheckpoint);
}

TEST_CASE("inspect lists sections in order with parameter counts") {
  Checkpoint ck = small_checkpoint();
  const auto info = inspect_checkpoint(serialize_checkpoint(ck));
  REQUIRE(info.size() == 4);
  CHECK(info[0].name == "WORLD");
  CHECK(info[1].name == "LM");
  CHECK(info[2].name == "PRIOR");
  CHECK(info[3].name == "DIFF");
  CHECK(info[2].parameters == ck.prior->parameter_count());
  CHECK(info[3].parameters == ck.diffusion->parameter_count());
  // Payload bytes also cover the small config header ahead of the parameters.
  for (const auto& s : info) CHECK(s.bytes > 8 * static_cast<std::uint64_t>(s.parameters));

  TempDir dir;
  save_checkpoint(ck, dir / "ck.bin");
  const CliRun r = cli({"inspect", dir / "ck.bin"});
  CHECK(r.code == 0);
  CHECK(r.out.find("WORLD bytes=") != std::string::npos);
  CHECK(r.out.find("DIFF bytes=" + std::to_string(info[3].bytes) + " parameters=" + std::to_string(info[3].parameters)) !=
        std::string::npos);
  CHECK(r.out.find("lm_stage=1") != std::string::npos);
}

TEST_CASE("train config validation and target names") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.lr = 0.0;
  expect_error([&] { c.validate(); }, ErrorCode::InvalidArgument);
  c = {};
  c.batch = 0;
  expect_error([&] { c.validate(); }, ErrorCode::InvalidArgument);
  for (auto t : {TrainTarget::Prior, TrainTarget::Diffusion, TrainTarget::LmStage1, TrainTarget::LmStage2}) {
    CHECK(parse_train_target(to_string(t)) == t);
  }
  expect_error([] { parse_train_target("vae"); }, ErrorCode::InvalidArgument);
  CHECK(standard_config(TrainTarget::Prior).steps == 2000);
  CHECK(standard_config(TrainTarget::Diffusion).steps == 3000);
  CHECK(standard_config(TrainTarget::LmStage1).steps == 1500);
  CHECK(standard_config(TrainTarget::LmStage2).steps == 1500);

  LossCurve curve{{0.5, 0.25}};
  CHECK(curve.to_text() == "1,0.5\n2,0.25\n");
}

TEST_CASE("sim_dir definitional cases") {
  Rng rng(5);
  const Vec src = l2_normalize(rng.normal_vec(64));
  const Vec tgt = l2_normalize(rng.normal_vec(64));
  CHECK(std::abs(sim_dir(tgt, src, tgt) - 1.0) < 1e-12);
  CHECK(std::abs(cosine(tgt, tgt) - 1.0) < 1e-12);
  CHECK(sim_dir(src, src, tgt) == 0.0);
  CHECK(std::abs(cosine(src, src) - 1.0) < 1e-12);
  CHECK(sim_dir(tgt, src, src) == 0.0);
  CHECK(std::abs(sim_dir(2.0 * tgt - src, src, tgt) - 1.0) < 1e-12);
}

TEST_CASE("CLI usage errors exit 1 and name the flag") {
  TempDir dir;
  const CliRun r = cli({"edit", "--checkpoint", dir / "ck.bin", "--instruction", "add [audio] to [image]", "--inputs",
                        dir / "in.json", "--alpha", "1.2"});
  CHECK(r.code == 1);
  CHECK(r.err.find("--alpha") != std::string::npos);
  CHECK(r.err.find("[0 - 1]") != std::string::npos);

  CHECK(cli({"train", "--target", "vae", "--out", dir / "x"}).code == 1);
  CHECK(cli({"frobnicate"}).code == 1);
  CHECK(cli({"eval", "--checkpoint", dir / "missing.bin", "--corpus", dir / "c.jsonl"}).code == 2);
}

TEST_CASE("CLI smoke chain at toy size") {
  TempDir dir;
  REQUIRE(cli({"gen-world", "--seed", "0", "--out", dir / "world.bin"}).code == 0);
  const CliRun data = cli({"gen-data", "--world", dir / "world.bin", "--out-dir", dir / "data", "--count", "60",
                           "--finetune", "20"});
  REQUIRE(data.code == 0);
  const auto pre = load_corpus(dir / "data/pretrain.jsonl");
  const auto ft = load_corpus(dir / "data/finetune.jsonl");
  REQUIRE(pre.size() == 60);
  REQUIRE(ft.size() == 20);
  for (std::size_t i = 0; i < ft.size(); ++i) CHECK(ft[i].id == pre[i].id);
  const CorpusManifest m = manifest_from_json(io::read_text(dir / "data/manifest.json"));
  CHECK(m.record_count == 60);
  CHECK(m.world_fingerprint == world().fingerprint());

  const std::string w = dir / "world.bin";
  auto train = [&](std::vector<std::string> extra) {
    std::vector<std::string> args{"train", "--world", w, "--steps", "4", "--batch", "4"};
    args.insert(args.end(), extra.begin(), extra.end());
    return cli(args);
  };

  SUBCASE("training is reproducible and stages are ordered") {
    REQUIRE(train({"--target", "prior", "--out", dir / "p1.bin"}).code == 0);
    REQUIRE(train({"--target", "prior", "--out", dir / "p2.bin"}).code == 0);
    CHECK(io::read_text(dir / "p1.bin.loss.csv") == io::read_text(dir / "p2.bin.loss.csv"));
    CHECK(serialize_checkpoint(load_checkpoint(dir / "p1.bin")) == serialize_checkpoint(load_checkpoint(dir / "p2.bin")));

    const CliRun no_stage1 = train({"--target", "lm-stage2", "--in", dir / "p1.bin", "--corpus",
                                    dir / "data/finetune.jsonl", "--out", dir / "bad.bin"});
    CHECK(no_stage1.code == 2);
    CHECK(no_stage1.err.find("lm-stage1") != std::string::npos);
    CHECK_FALSE(fs::exists(dir / "bad.bin"));

    const CliRun no_prior =
        train({"--target", "lm-stage1", "--corpus", dir / "data/pretrain.jsonl", "--out", dir / "bad.bin"});
    CHECK(no_prior.code == 2);
  }

  SUBCASE("full chain through edit and eval") {
    REQUIRE(train({"--target", "prior", "--out", dir / "ck1.bin"}).code == 0);
    REQUIRE(train({"--target", "diffusion", "--in", dir / "ck1.bin", "--out", dir / "ck2.bin"}).code == 0);
    REQUIRE(train({"--target", "lm-stage1", "--in", dir / "ck2.bin", "--corpus", dir / "data/pretrain.jsonl", "--out",
                   dir / "ck3.bin"})
                .code == 0);
    const CliRun s2 = train({"--target", "lm-stage2", "--in", dir / "ck3.bin", "--corpus", dir / "data/finetune.jsonl",
                             "--replay", dir / "data/pretrain.jsonl", "--out", dir / "ck4.bin"});
    REQUIRE(s2.code == 0);
    CHECK(s2.out.find("pseudo_targets=20") != std::string::npos);
    const Checkpoint ck = load_checkpoint(dir / "ck4.bin");
    CHECK(ck.world);
    CHECK(ck.lm_stage == 2);
    CHECK(ck.prior);
    CHECK(ck.diffusion);

    io::write_text(dir / "in.json",
                   R"([{"concepts": [[3, 1.0]], "modality": "audio"}, {"concepts": [[1, 1.0], [2, 0.5]], "modality": "image"}])");
    const CliRun e = cli({"edit", "--checkpoint", dir / "ck4.bin", "--instruction", "add [audio] to [image]",
                          "--inputs", dir / "in.json", "--out", dir / "edit"});
    CHECK(e.code == 0);
    CHECK(io::read_text(dir / "edit.pgm").rfind("P2\n8 8\n255\n", 0) == 0);
    CHECK(io::read_text(dir / "edit.txt").find("retrieve base_index=") != std::string::npos);

    const CliRun ev = cli({"eval", "--checkpoint", dir / "ck4.bin", "--corpus", dir / "data/finetune.jsonl",
                           "--limit", "8", "--details", dir / "details.csv"});
    CHECK(ev.code == 0);
    for (const char* key : {"sim_dir=", "sim_im=", "sim_out=", "retrieval_accuracy=", "n=8"}) {
      CHECK_MESSAGE(ev.out.find(key) != std::string::npos, key);
    }
    const CliRun again = cli({"eval", "--checkpoint", dir / "ck4.bin", "--corpus", dir / "data/finetune.jsonl",
                              "--limit", "8"});
    CHECK(again.out == ev.out);

    // Library view of the same evaluation: ranges and the empty-corpus error.
    const auto lmap = make_latent_map(*ck.world);
    const auto renderer = make_renderer(*ck.world);
    const auto sched = NoiseSchedule::linear();
    const PipelineModels pm{*ck.world, *ck.lm, *ck.prior, *ck.diffusion, lmap, renderer, sched};
    const std::span<const InstructionRecord> some(ft.data(), 4);
    const EvalReport rep = eval_metrics(some, pm);
    CHECK(rep.n == 4);
    CHECK(rep.records.size() == 4);
    CHECK(rep.retrieval_accuracy >= 0.0);
    CHECK(rep.retrieval_accuracy <= 1.0);
    for (double v : {rep.sim_dir, rep.sim_im, rep.sim_out}) {
      CHECK(v >= -1.0);
      CHECK(v <= 1.0);
    }
    expect_error([&] { eval_metrics(std::span<const InstructionRecord>{}, pm); }, ErrorCode::EmptyCorpus);
  }
}
